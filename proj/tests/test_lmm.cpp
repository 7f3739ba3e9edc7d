#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "lskld/lmm.hpp"
#include "lskld/rng.hpp"
#include "lskld/sim_harness.hpp"

using namespace lskld;

namespace {

const BasisSpec kQuad{BasisSpec::Kind::polynomial, 2};

struct GenSettings {
  GroupParams params;
  Eigen::VectorXd alpha;
  Eigen::VectorXd mu_x;
  Eigen::MatrixXd sigma_x;
  int n = 100;
  bool noiseless = false;
};

std::vector<SubjectRecord> gen_one_group(const GenSettings& gs, std::uint64_t seed) {
  const Eigen::VectorXd grid = sim_design_times();
  const Eigen::MatrixXd g = design_matrix(grid, kQuad);
  const Eigen::MatrixXd lx = Eigen::LLT<Eigen::MatrixXd>(gs.sigma_x).matrixL();
  const Eigen::MatrixXd lb =
      gs.noiseless ? Eigen::MatrixXd::Zero(3, 3)
                   : Eigen::MatrixXd(Eigen::LLT<Eigen::MatrixXd>(gs.params.d).matrixL());
  std::vector<SubjectRecord> subs;
  for (int i = 0; i < gs.n; ++i) {
    rng::Engine eng(rng::derive(seed, i));
    SubjectRecord s;
    s.id = "s" + std::to_string(i);
    s.group = 1;
    s.covariates = gs.mu_x + lx * eng.normal_vector(gs.mu_x.size());
    const double w = gs.alpha.dot(s.covariates);
    const Eigen::VectorXd b = lb * eng.normal_vector(3);
    s.times = grid;
    s.outcomes = g * (gs.params.beta + b + gs.params.gamma * w);
    if (!gs.noiseless) {
      const double sd = std::sqrt(gs.params.sigma2);
      for (Eigen::Index j = 0; j < s.outcomes.size(); ++j) s.outcomes[j] += sd * eng.normal();
    }
    subs.push_back(std::move(s));
  }
  return subs;
}

GenSettings paper_group1(int p = 2) {
  const SimTruth t = default_truth(5.0, p);
  GenSettings gs;
  gs.params = t.group1;
  gs.alpha = t.alpha;
  gs.mu_x = t.moments.mu;
  gs.sigma_x = t.moments.sigma;
  return gs;
}

void require_monotone(const std::vector<double>& path) {
  for (std::size_t i = 1; i < path.size(); ++i) REQUIRE(path[i] >= path[i - 1] - 1e-8);
}

}  // namespace

TEST_CASE("subject design blocks", "[lmm]") {
  SubjectRecord s;
  s.id = "a";
  s.group = 1;
  s.times = Eigen::Vector3d(0.0, 1.0, 2.0);
  s.outcomes = Eigen::Vector3d(1.0, 2.0, 3.0);
  s.covariates = Eigen::Vector2d(1.0, -1.0);

  Eigen::VectorXd alpha(2);
  alpha << 1.0, 1.0;  // w = 0
  auto [fixed0, random0] = subject_design(s, alpha, kQuad);
  REQUIRE(fixed0.rows() == 3);
  REQUIRE(fixed0.cols() == 6);
  REQUIRE(random0.cols() == 3);
  REQUIRE(fixed0.rightCols(3).cwiseAbs().maxCoeff() == 0.0);

  alpha << 1.0, 0.0;  // w = 1
  auto [fixed1, random1] = subject_design(s, alpha, kQuad);
  REQUIRE((fixed1.leftCols(3) - fixed1.rightCols(3)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((fixed1.leftCols(3) - random1).cwiseAbs().maxCoeff() == 0.0);

  REQUIRE_THROWS_AS(subject_design(s, Eigen::VectorXd::Ones(3), kQuad), std::invalid_argument);
}

TEST_CASE("marginal loglik of a perfect single observation", "[lmm]") {
  SubjectRecord s;
  s.id = "a";
  s.group = 1;
  s.times = Eigen::VectorXd::Zero(1);
  s.outcomes = Eigen::VectorXd::Zero(1);
  s.covariates = Eigen::VectorXd::Zero(1);
  GroupParams gp;
  gp.beta = Eigen::Vector3d::Zero();  // residual is zero at t=0
  gp.gamma = Eigen::Vector3d::Zero();
  gp.d = 1e-12 * Eigen::Matrix3d::Identity();
  gp.sigma2 = 1.0;
  const double ll = marginal_loglik(gp, {s}, Eigen::VectorXd::Ones(1), kQuad);
  REQUIRE(ll == Catch::Approx(-0.5 * std::log(2.0 * M_PI)).margin(1e-9));
}

TEST_CASE("loglik is invariant to rescaling the index against gamma", "[lmm]") {
  GenSettings gs = paper_group1();
  const auto subs = gen_one_group(gs, 11);
  GroupParams gp = gs.params;
  const double base = marginal_loglik(gp, subs, gs.alpha, kQuad);
  GroupParams half = gp;
  half.gamma = gp.gamma / 2.0;
  const double scaled = marginal_loglik(half, subs, 2.0 * gs.alpha, kQuad);
  REQUIRE(scaled == base);  // exact: powers of two
}

TEST_CASE("woodbury loglik matches the dense multivariate normal", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.n = 17;
  auto subs = gen_one_group(gs, 5);
  // carve irregular patterns so several distinct time sets are exercised
  for (std::size_t i = 0; i < subs.size(); ++i) {
    const int drop = static_cast<int>(i % 4);
    if (drop > 0) {
      const Eigen::Index keep = subs[i].times.size() - drop;
      subs[i].times = subs[i].times.head(keep).eval();
      subs[i].outcomes = subs[i].outcomes.head(keep).eval();
    }
  }
  const GroupParams gp = gs.params;
  const double fast = marginal_loglik(gp, subs, gs.alpha, kQuad);

  double dense = 0.0;
  for (const auto& s : subs) {
    const Eigen::MatrixXd g = design_matrix(s.times, kQuad);
    const double w = gs.alpha.dot(s.covariates);
    const Eigen::MatrixXd v =
        g * gp.d * g.transpose() +
        gp.sigma2 * Eigen::MatrixXd::Identity(s.times.size(), s.times.size());
    const Eigen::VectorXd r = s.outcomes - g * (gp.beta + gp.gamma * w);
    const Eigen::LLT<Eigen::MatrixXd> llt(v);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    dense += -0.5 * (static_cast<double>(s.times.size()) * std::log(2.0 * M_PI) + logdet +
                     r.dot(llt.solve(r)));
  }
  REQUIRE(fast == Catch::Approx(dense).margin(1e-8));
}

TEST_CASE("noiseless data recovers the fixed effects", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.noiseless = true;
  gs.n = 40;
  const auto subs = gen_one_group(gs, 21);
  for (auto opt : {LmmFitOptions::Optimizer::em, LmmFitOptions::Optimizer::direct}) {
    LmmFitOptions opts;
    opts.optimizer = opt;
    const GroupFit fit = fit_group(subs, gs.alpha, kQuad, opts);
    REQUIRE((fit.params.beta - gs.params.beta).cwiseAbs().maxCoeff() < 1e-6);
    REQUIRE((fit.params.gamma - gs.params.gamma).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("em iterations never decrease the loglik", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.n = 80;
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    const auto subs = gen_one_group(gs, seed);
    const GroupFit fit = fit_group(subs, gs.alpha, kQuad);
    REQUIRE(fit.loglik_path.size() >= 2);
    require_monotone(fit.loglik_path);
    REQUIRE(fit.converged);
    REQUIRE(fit.loglik >= fit.loglik_path.front());
    Eigen::LLT<Eigen::MatrixXd> llt(fit.params.d);
    REQUIRE(llt.info() == Eigen::Success);
  }
}

TEST_CASE("group-1 parameters are recovered at n=500", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.n = 500;
  const int reps = 10;
  Eigen::MatrixXd betas(reps, 3);
  for (int r = 0; r < reps; ++r) {
    const auto subs = gen_one_group(gs, rng::derive(100, r));
    const GroupFit fit = fit_group(subs, gs.alpha, kQuad);
    betas.row(r) = fit.params.beta.transpose();
  }
  const Eigen::VectorXd mean = betas.colwise().mean();
  for (int j = 0; j < 3; ++j) {
    const double sd = std::sqrt((betas.col(j).array() - mean[j]).square().sum() / (reps - 1));
    const double se = sd / std::sqrt(static_cast<double>(reps));
    REQUIRE(std::abs(mean[j] - gs.params.beta[j]) <= 3.0 * se);
  }
}

TEST_CASE("null interaction stays within bootstrap error", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.params.gamma = Eigen::Vector3d::Zero();
  gs.n = 150;
  const auto subs0 = gen_one_group(gs, 42);
  const Eigen::VectorXd gamma0 = fit_group(subs0, gs.alpha, kQuad).params.gamma;

  const int boots = 200;
  Eigen::MatrixXd gammas(boots, 3);
  for (int b = 0; b < boots; ++b) {
    const auto subs = gen_one_group(gs, rng::derive(4242, b));
    gammas.row(b) = fit_group(subs, gs.alpha, kQuad).params.gamma.transpose();
  }
  const Eigen::VectorXd mean = gammas.colwise().mean();
  for (int j = 0; j < 3; ++j) {
    const double se = std::sqrt((gammas.col(j).array() - mean[j]).square().sum() / (boots - 1));
    REQUIRE(std::abs(gamma0[j]) <= 3.0 * se);
  }
}

TEST_CASE("rescaling the index rescales gamma only", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.n = 120;
  const auto subs = gen_one_group(gs, 77);
  const GroupFit base = fit_group(subs, gs.alpha, kQuad);
  for (double c : {0.5, 2.0}) {
    const GroupFit scaled = fit_group(subs, c * gs.alpha, kQuad);
    REQUIRE((scaled.params.gamma * c - base.params.gamma).cwiseAbs().maxCoeff() <
            1e-4 * (1.0 + base.params.gamma.cwiseAbs().maxCoeff()));
    REQUIRE((scaled.params.beta - base.params.beta).cwiseAbs().maxCoeff() <
            1e-4 * (1.0 + base.params.beta.cwiseAbs().maxCoeff()));
    REQUIRE((scaled.params.d - base.params.d).cwiseAbs().maxCoeff() <
            1e-4 * (1.0 + base.params.d.cwiseAbs().maxCoeff()));
    REQUIRE(scaled.params.sigma2 == Catch::Approx(base.params.sigma2).epsilon(1e-4));
    REQUIRE(scaled.loglik == Catch::Approx(base.loglik).epsilon(1e-4));
  }
}

TEST_CASE("deleting rows equals building without them", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.n = 30;
  auto full = gen_one_group(gs, 8);

  auto deleted = full;
  for (std::size_t i = 0; i < deleted.size(); i += 2) {
    auto& s = deleted[i];
    std::vector<double> t, y;
    for (Eigen::Index j = 0; j < s.times.size(); ++j) {
      if (j == 2 || j == 5) continue;
      t.push_back(s.times[j]);
      y.push_back(s.outcomes[j]);
    }
    s.times = Eigen::Map<Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
    s.outcomes = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  }

  std::vector<SubjectRecord> rebuilt;
  for (const auto& s : deleted) {
    SubjectRecord ns;
    ns.id = s.id;
    ns.group = s.group;
    ns.covariates = s.covariates;
    ns.times = s.times;
    ns.outcomes = s.outcomes;
    rebuilt.push_back(std::move(ns));
  }

  const GroupFit a = fit_group(deleted, gs.alpha, kQuad);
  const GroupFit b = fit_group(rebuilt, gs.alpha, kQuad);
  REQUIRE(a.loglik == b.loglik);
  REQUIRE(a.params.beta == b.params.beta);
  REQUIRE(a.params.gamma == b.params.gamma);
  REQUIRE(a.params.d == b.params.d);
  REQUIRE(a.params.sigma2 == b.params.sigma2);
}

TEST_CASE("direct optimizer agrees with em", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.n = 150;
  const auto subs = gen_one_group(gs, 13);
  LmmFitOptions em_opts;
  em_opts.loglik_tol = 1e-10;
  em_opts.max_iter = 2000;
  LmmFitOptions direct_opts = em_opts;
  direct_opts.optimizer = LmmFitOptions::Optimizer::direct;
  direct_opts.max_iter = 500;
  const GroupFit em = fit_group(subs, gs.alpha, kQuad, em_opts);
  const GroupFit direct = fit_group(subs, gs.alpha, kQuad, direct_opts);
  REQUIRE(direct.loglik == Catch::Approx(em.loglik).margin(1e-3));
  REQUIRE((direct.params.beta - em.params.beta).cwiseAbs().maxCoeff() < 1e-2);
  require_monotone(direct.loglik_path);
}

TEST_CASE("insufficient data is rejected", "[lmm]") {
  GenSettings gs = paper_group1();
  gs.n = 5;  // below 2q + 2 = 8
  const auto subs = gen_one_group(gs, 3);
  REQUIRE_THROWS_AS(fit_group(subs, gs.alpha, kQuad), std::invalid_argument);

  gs.n = 12;
  auto thin = gen_one_group(gs, 3);
  for (auto& s : thin) {  // nobody retains >= q observations
    s.times = s.times.head(2).eval();
    s.outcomes = s.outcomes.head(2).eval();
  }
  REQUIRE_THROWS_AS(fit_group(thin, gs.alpha, kQuad), std::invalid_argument);
}
