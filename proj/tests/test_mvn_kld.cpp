#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "lskld/mvn_kld.hpp"
#include "lskld/oracle_check.hpp"
#include "lskld/rng.hpp"
#include "lskld/sim_harness.hpp"

using namespace lskld;

namespace {

Eigen::MatrixXd random_spd(rng::Engine& eng, int n, double ridge) {
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = eng.normal();
  Eigen::MatrixXd s = a * a.transpose() / static_cast<double>(n);
  s.diagonal().array() += ridge;
  return s;
}

/// Sample-average estimate of E_{f1}[log f1 - log f2]; the independent
/// route for checking the closed-form divergence.
McEstimate mc_kld(const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1,
                  const Eigen::VectorXd& m2, const Eigen::MatrixXd& s2, long n,
                  std::uint64_t seed) {
  const Eigen::LLT<Eigen::MatrixXd> llt1(s1), llt2(s2);
  const Eigen::MatrixXd l1 = llt1.matrixL();
  const double ld1 = 2.0 * llt1.matrixLLT().diagonal().array().log().sum();
  const double ld2 = 2.0 * llt2.matrixLLT().diagonal().array().log().sum();
  rng::Engine eng(seed);
  double mean = 0.0, m2acc = 0.0;
  for (long i = 0; i < n; ++i) {
    const Eigen::VectorXd z = m1 + l1 * eng.normal_vector(m1.size());
    const double q1 = llt1.matrixL().solve(z - m1).squaredNorm();
    const double q2 = llt2.matrixL().solve(z - m2).squaredNorm();
    const double v = 0.5 * (ld2 - ld1 + q2 - q1);
    const double delta = v - mean;
    mean += delta / static_cast<double>(i + 1);
    m2acc += delta * (v - mean);
  }
  return {mean, std::sqrt(m2acc / static_cast<double>(n - 1) / static_cast<double>(n))};
}

}  // namespace

TEST_CASE("analytic divergences", "[kld]") {
  Eigen::VectorXd m0(1), m1(1);
  Eigen::MatrixXd s(1, 1);
  m0 << 0.0;
  m1 << 1.0;
  s << 1.0;
  REQUIRE(kld_gaussian(m0, s, m0, s) == 0.0);
  REQUIRE(kld_gaussian(m0, s, m1, s) == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(sym_kld(m0, s, m1, s) == Catch::Approx(1.0).margin(1e-12));

  rng::Engine eng(41);
  Eigen::VectorXd ma = eng.normal_vector(3), mb = eng.normal_vector(3);
  Eigen::MatrixXd sa = random_spd(eng, 3, 0.4), sb = random_spd(eng, 3, 0.4);
  REQUIRE(sym_kld(ma, sa, mb, sb) == Catch::Approx(sym_kld(mb, sb, ma, sa)).margin(1e-12));
  REQUIRE(kld_gaussian(ma, sa, ma, sa) == Catch::Approx(0.0).margin(1e-10));

  Eigen::MatrixXd notspd = -Eigen::MatrixXd::Identity(3, 3);
  REQUIRE_THROWS_AS(kld_gaussian(ma, notspd, mb, sb), std::invalid_argument);
}

TEST_CASE("divergence is nonnegative and zero iff equal", "[kld]") {
  rng::Engine eng(99);
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::VectorXd m1 = eng.normal_vector(3), m2 = eng.normal_vector(3);
    const Eigen::MatrixXd s1 = random_spd(eng, 3, 0.3), s2 = random_spd(eng, 3, 0.3);
    const double v = kld_gaussian(m1, s1, m2, s2);
    REQUIRE(v >= 0.0);
    if ((m1 - m2).norm() > 1e-6 || (s1 - s2).norm() > 1e-6) REQUIRE(v > 0.0);
  }
}

TEST_CASE("closed form matches the Monte-Carlo divergence", "[kld]") {
  rng::Engine eng(7321);
  const Eigen::VectorXd m1 = eng.normal_vector(3), m2 = eng.normal_vector(3);
  const Eigen::MatrixXd s1 = random_spd(eng, 3, 0.5), s2 = random_spd(eng, 3, 0.5);
  const double closed = kld_gaussian(m1, s1, m2, s2);
  const McEstimate mc = mc_kld(m1, s1, m2, s2, 1000000, 2024);
  REQUIRE(std::abs(closed - mc.estimate) <= 3.0 * mc.std_error);
}

TEST_CASE("purity coefficients of identical and gamma-equal groups", "[kld]") {
  const SimTruth t = default_truth(5.0, 2);
  PurityCoeffs c = purity_coeffs(t.group1, t.group1);
  REQUIRE(c.a1 == Catch::Approx(0.0).margin(1e-10));
  REQUIRE(c.a2 == Catch::Approx(0.0).margin(1e-10));
  REQUIRE(c.a3 == Catch::Approx(0.0).margin(1e-10));

  GroupParams g2 = t.group1;
  g2.beta = Eigen::Vector3d(1.0, -2.0, 0.3);
  c = purity_coeffs(t.group1, g2);
  REQUIRE(c.a2 == 0.0);
  REQUIRE(c.a3 == 0.0);
  REQUIRE(c.a1 > 0.0);
}

TEST_CASE("subject purity equals the direct symmetric divergence", "[kld]") {
  rng::Engine eng(1234);
  for (int rep = 0; rep < 100; ++rep) {
    GroupParams g1, g2;
    g1.beta = eng.normal_vector(3);
    g2.beta = eng.normal_vector(3);
    g1.gamma = eng.normal_vector(3);
    g2.gamma = eng.normal_vector(3);
    g1.d = random_spd(eng, 3, 0.3);
    g2.d = random_spd(eng, 3, 0.3);
    g1.sigma2 = g2.sigma2 = 1.0;
    const PurityCoeffs c = purity_coeffs(g1, g2);
    REQUIRE(c.a3 >= 0.0);
    const double w = 3.0 * eng.normal();
    const double direct =
        sym_kld(g1.beta + g1.gamma * w, g1.d, g2.beta + g2.gamma * w, g2.d);
    REQUIRE(subject_purity(c, w) == Catch::Approx(direct).margin(1e-8));
  }
  PurityCoeffs c{1.5, -0.3, 0.0};
  REQUIRE(subject_purity(c, 0.0) == 1.5);
}

TEST_CASE("quadratic purity grows without bound when a3 > 0", "[kld]") {
  const PurityCoeffs c{1.0, -2.0, 0.5};
  const double vertex = 2.0 / (2.0 * 0.5);
  double prev = subject_purity(c, vertex);
  for (double w = vertex + 1.0; w < vertex + 50.0; w += 1.0) {
    const double cur = subject_purity(c, w);
    REQUIRE(cur > prev);
    prev = cur;
  }
}

TEST_CASE("population purity closed cases", "[kld]") {
  PurityCoeffs c{2.0, 3.0, 4.0};
  CovariateMoments m;
  m.mu = Eigen::VectorXd::Zero(2);
  m.sigma = Eigen::MatrixXd::Identity(2, 2);
  Eigen::VectorXd alpha(2);
  alpha << 1.0, 0.0;
  REQUIRE(population_purity(c, m, alpha) == Catch::Approx(2.0 + 4.0));

  c.a2 = 0.0;
  c.a3 = 0.0;
  rng::Engine eng(5);
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::VectorXd a = eng.normal_vector(2);
    a /= a.norm();
    REQUIRE(population_purity(c, m, a) == Catch::Approx(2.0));
  }
}

TEST_CASE("population purity matches the Monte-Carlo oracle", "[kld]") {
  int agree = 0;
  const int cases = 50;
  for (int cse = 0; cse < cases; ++cse) {
    rng::Engine eng(rng::derive(777, cse));
    GroupParams g1, g2;
    g1.beta = 2.0 * eng.normal_vector(3);
    g2.beta = g1.beta + 0.5 * eng.normal_vector(3);
    g1.gamma = eng.normal_vector(3);
    g2.gamma = eng.normal_vector(3);
    g1.d = random_spd(eng, 3, 0.3);
    g2.d = random_spd(eng, 3, 0.3);
    g1.sigma2 = g2.sigma2 = 1.0;
    CovariateMoments m;
    m.mu = eng.normal_vector(4);
    m.sigma = random_spd(eng, 4, 0.5);
    Eigen::VectorXd alpha = eng.normal_vector(4);
    alpha /= alpha.norm();
    const double closed = population_purity(purity_coeffs(g1, g2), m, alpha);
    const McEstimate mc = mc_purity_oracle(g1, g2, m, alpha, 20000, rng::derive(991, cse));
    if (std::abs(closed - mc.estimate) <= 3.0 * mc.std_error) ++agree;
  }
  REQUIRE(agree >= 47);
}

TEST_CASE("oracle standard error shrinks like 1/sqrt(n)", "[kld]") {
  const SimTruth t = default_truth(5.0, 2);
  const McEstimate a = mc_purity_oracle(t.group1, t.group2, t.moments, t.alpha, 20000, 5);
  const McEstimate b = mc_purity_oracle(t.group1, t.group2, t.moments, t.alpha, 40000, 5);
  REQUIRE(b.std_error < a.std_error);
  REQUIRE(b.std_error / a.std_error == Catch::Approx(1.0 / std::sqrt(2.0)).epsilon(0.2));

  // identical groups: zero purity with zero spread
  const McEstimate z = mc_purity_oracle(t.group1, t.group1, t.moments, t.alpha, 10000, 5);
  REQUIRE(z.estimate == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(z.std_error == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("paper-style parameters agree with the oracle", "[kld]") {
  const SimTruth t = default_truth(5.0, 2);
  const double closed = population_purity(purity_coeffs(t.group1, t.group2), t.moments, t.alpha);
  const McEstimate mc = mc_purity_oracle(t.group1, t.group2, t.moments, t.alpha, 100000, 31);
  REQUIRE(std::abs(closed - mc.estimate) <= 3.0 * mc.std_error);
}

TEST_CASE("purity gradient matches finite differences", "[kld]") {
  rng::Engine eng(2718);
  PurityCoeffs c{1.2, -0.7, 2.5};
  CovariateMoments m;
  m.mu = eng.normal_vector(4);
  m.sigma = random_spd(eng, 4, 0.5);
  Eigen::VectorXd alpha = eng.normal_vector(4);
  alpha /= alpha.norm();

  const Eigen::MatrixXd second = m.mu * m.mu.transpose() + m.sigma;
  const Eigen::VectorXd analytic = c.a2 * m.mu + 2.0 * c.a3 * second * alpha;
  const double h = 1e-6;
  for (int j = 0; j < 4; ++j) {
    Eigen::VectorXd up = alpha, dn = alpha;
    up[j] += h;
    dn[j] -= h;
    const double fd = (population_purity(c, m, up) - population_purity(c, m, dn)) / (2.0 * h);
    REQUIRE(fd == Catch::Approx(analytic[j]).epsilon(1e-5));
  }
}

TEST_CASE("bundled oracle check passes", "[kld]") {
  std::ostringstream sink;
  REQUIRE(run_oracle_check(12345, sink, 50, 20000));
}
