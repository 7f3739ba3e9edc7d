#pragma once

#include <cmath>
#include <ostream>

#include <Eigen/Dense>

#include "lskld/mvn_kld.hpp"
#include "lskld/rng.hpp"

namespace lskld {

/// Self-check of the closed-form purity machinery against independent
/// routes: two analytic one-dimensional divergences, then closed-form
/// population purity versus the Monte-Carlo oracle on random parameter
/// draws (pass when at least 47 of 50 agree within 3 MC standard
/// errors). Prints one line per check; returns overall success.
inline bool run_oracle_check(std::uint64_t seed, std::ostream& os, int n_cases = 50,
                             long n_draws = 100000) {
  bool ok = true;
  auto report = [&](const char* name, bool pass, const std::string& detail) {
    os << (pass ? "PASS" : "FAIL") << "  " << name << "  " << detail << "\n";
    ok = ok && pass;
  };

  {
    Eigen::VectorXd m0(1), m1(1);
    Eigen::MatrixXd s(1, 1);
    m0 << 0.0;
    m1 << 1.0;
    s << 1.0;
    const double v = kld_gaussian(m0, s, m1, s);
    report("kld unit-shift dim-1 equals 0.5", std::abs(v - 0.5) <= 1e-12,
           "value=" + std::to_string(v));
    const double z = kld_gaussian(m1, s, m1, s);
    report("kld of identical distributions equals 0", std::abs(z) <= 1e-12,
           "value=" + std::to_string(z));
  }

  int agree = 0;
  double worst = 0.0;
  for (int c = 0; c < n_cases; ++c) {
    rng::Engine eng(rng::derive(seed, rng::tag(rng::Stream::oracle), c));
    const int q = 3, p = 3;
    auto random_spd = [&](int n, double ridge) {
      Eigen::MatrixXd a(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = eng.normal();
      Eigen::MatrixXd s = a * a.transpose() / static_cast<double>(n);
      s.diagonal().array() += ridge;
      return s;
    };
    GroupParams g1, g2;
    g1.beta = 2.0 * eng.normal_vector(q);
    g2.beta = g1.beta + 0.5 * eng.normal_vector(q);
    g1.gamma = eng.normal_vector(q);
    g2.gamma = eng.normal_vector(q);
    g1.d = random_spd(q, 0.3);
    g2.d = random_spd(q, 0.3);
    CovariateMoments m;
    m.mu = eng.normal_vector(p);
    m.sigma = random_spd(p, 0.5);
    Eigen::VectorXd alpha = eng.normal_vector(p);
    alpha /= alpha.norm();

    const double closed = population_purity(purity_coeffs(g1, g2), m, alpha);
    const McEstimate mc =
        mc_purity_oracle(g1, g2, m, alpha, n_draws, rng::derive(seed, c, 7));
    const double gap = std::abs(closed - mc.estimate);
    if (gap <= 3.0 * mc.std_error)
      ++agree;
    else
      worst = std::max(worst, mc.std_error > 0 ? gap / mc.std_error : 1e300);
  }
  report("closed-form purity vs Monte-Carlo oracle",
         agree >= n_cases - 3,
         std::to_string(agree) + "/" + std::to_string(n_cases) + " within 3 SE");
  return ok;
}

}  // namespace lskld
