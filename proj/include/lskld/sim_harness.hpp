#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lskld/decision_rules.hpp"
#include "lskld/evaluation.hpp"
#include "lskld/lmm.hpp"
#include "lskld/parallel.hpp"
#include "lskld/rng.hpp"
#include "lskld/trajectory_model.hpp"

namespace lskld {

enum class Missingness { none, mcar, dropout };

inline std::string to_string(Missingness m) {
  switch (m) {
    case Missingness::none: return "none";
    case Missingness::mcar: return "mcar";
    case Missingness::dropout: return "dropout";
  }
  throw std::logic_error("unknown missingness mode");
}

inline Missingness missingness_from_string(const std::string& s) {
  if (s == "none") return Missingness::none;
  if (s == "mcar") return Missingness::mcar;
  if (s == "dropout") return Missingness::dropout;
  throw std::invalid_argument("unknown missingness mode '" + s + "'");
}

/// One simulation cell. theta_deg is the per-arm tilt of the index
/// coefficient vectors, so the angle between them is 2 * theta_deg.
struct Scenario {
  double theta_deg = 0.0;
  int p = 2;
  Missingness missingness = Missingness::none;
  int n_train_per_group = 100;
  int n_test = 1000;
  int n_reps = 50;
  std::uint64_t seed = 0;

  void validate() const {
    if (theta_deg < 0.0) throw std::invalid_argument("Scenario: theta_deg must be >= 0");
    if (p < 1 || n_train_per_group < 1 || n_test < 1 || n_reps < 1)
      throw std::invalid_argument("Scenario: sizes must be >= 1");
  }
};

struct SimTruth {
  GroupParams group1;
  GroupParams group2;
  Eigen::VectorXd alpha;
  CovariateMoments moments;
};

/// The generating constants of the simulation design: quadratic mean
/// curves with identical average tangent slopes, per-arm index
/// directions (0, cos t, +-sin t), AR(1)-style covariate correlations,
/// and a covariate mean vector chosen so the true index has mean zero
/// (exact for even p).
inline SimTruth default_truth(double theta_deg, int p) {
  if (p < 1) throw std::invalid_argument("default_truth: p must be >= 1");
  SimTruth t;
  t.group1.beta = Eigen::Vector3d(20.0, 3.0, -0.5);
  t.group2.beta = Eigen::Vector3d(20.0, 2.3, -0.4);
  t.group1.d.resize(3, 3);
  t.group1.d << 0.5, -0.1, -0.01, -0.1, 0.5, -0.01, -0.01, -0.01, 0.01;
  t.group2.d.resize(3, 3);
  t.group2.d << 0.4, -0.12, -0.01, -0.12, 0.5, -0.01, -0.01, -0.01, 0.01;
  const double th = theta_deg * M_PI / 180.0;
  t.group1.gamma = Eigen::Vector3d(0.0, std::cos(th), std::sin(th));
  t.group2.gamma = Eigen::Vector3d(0.0, std::cos(th), -std::sin(th));
  t.group1.sigma2 = 1.0;
  t.group2.sigma2 = 1.0;

  t.alpha.resize(p);
  for (int i = 0; i < p; ++i) t.alpha[i] = static_cast<double>(i + 1);
  t.alpha /= t.alpha.norm();

  t.moments.mu.resize(p);
  for (int i = 0; i < p; ++i)
    t.moments.mu[i] = (i < p / 2) ? -static_cast<double>(p - i) : static_cast<double>(p - i);
  t.moments.sigma.resize(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) t.moments.sigma(i, j) = std::pow(0.5, std::abs(i - j));
  return t;
}

/// Protocol grid: baseline plus seven weekly follow-ups.
inline Eigen::VectorXd sim_design_times() {
  Eigen::VectorXd t(8);
  for (int j = 0; j < 8; ++j) t[j] = static_cast<double>(j);
  return t;
}

inline BasisSpec sim_basis() { return BasisSpec{BasisSpec::Kind::polynomial, 2}; }

/// Counterfactual truth for one generated subject: random-effect draws
/// under both arms (independent across arms) and the assigned arm.
struct SubjectTruth {
  Eigen::VectorXd b1;
  Eigen::VectorXd b2;
  int assigned = 0;
};

struct GeneratedTrial {
  TrialData data;
  std::vector<SubjectTruth> truth;  // parallel to data.subjects
};

namespace detail {

struct TruthCache {
  SimTruth truth;
  Eigen::MatrixXd chol_x;
  Eigen::MatrixXd chol_b1;
  Eigen::MatrixXd chol_b2;
  Eigen::MatrixXd basis_rows;  // 8 x 3 design on the protocol grid

  explicit TruthCache(const Scenario& scn) : truth(default_truth(scn.theta_deg, scn.p)) {
    chol_x = Eigen::LLT<Eigen::MatrixXd>(truth.moments.sigma).matrixL();
    chol_b1 = Eigen::LLT<Eigen::MatrixXd>(truth.group1.d).matrixL();
    chol_b2 = Eigen::LLT<Eigen::MatrixXd>(truth.group2.d).matrixL();
    basis_rows = design_matrix(sim_design_times(), sim_basis());
  }
};

}  // namespace detail

/// Generate one replication's training trial: covariates from the truth
/// moments, random effects drawn under both arms (the unassigned arm's
/// draw feeds only the decision oracle), outcomes under the assigned arm
/// at every protocol time. Deterministic given (scenario seed, rep).
inline GeneratedTrial gen_dataset(const Scenario& scn, int rep_index) {
  scn.validate();
  const detail::TruthCache cache(scn);
  const auto& tt = cache.truth;
  GeneratedTrial out;
  out.data.p = scn.p;
  out.data.design_times = sim_design_times();
  const int n_total = 2 * scn.n_train_per_group;
  out.data.subjects.reserve(static_cast<std::size_t>(n_total));
  out.truth.reserve(static_cast<std::size_t>(n_total));
  for (int i = 0; i < n_total; ++i) {
    const int group = i < scn.n_train_per_group ? 1 : 2;
    rng::Engine ex(rng::derive(scn.seed, rep_index, rng::tag(rng::Stream::covariates), i));
    rng::Engine eb(rng::derive(scn.seed, rep_index, rng::tag(rng::Stream::random_effects), i));
    rng::Engine ee(rng::derive(scn.seed, rep_index, rng::tag(rng::Stream::noise), i));

    SubjectRecord s;
    s.id = "s" + std::to_string(i);
    s.group = group;
    s.covariates = rng::mvn_draw(ex, tt.moments.mu, cache.chol_x);
    const double w = tt.alpha.dot(s.covariates);

    SubjectTruth st;
    st.b1 = cache.chol_b1 * eb.normal_vector(3);
    st.b2 = cache.chol_b2 * eb.normal_vector(3);
    st.assigned = group;

    const GroupParams& gp = group == 1 ? tt.group1 : tt.group2;
    const Eigen::VectorXd& b = group == 1 ? st.b1 : st.b2;
    const Eigen::VectorXd coeff = gp.beta + b + gp.gamma * w;
    s.times = out.data.design_times;
    s.outcomes = cache.basis_rows * coeff;
    const double sd = std::sqrt(gp.sigma2);
    for (Eigen::Index j = 0; j < s.outcomes.size(); ++j) s.outcomes[j] += sd * ee.normal();

    out.data.subjects.push_back(std::move(s));
    out.truth.push_back(std::move(st));
  }
  return out;
}

/// Fresh-draw evaluation set: covariates plus both arms' random effects
/// per subject (row-wise), on streams independent of the training draw.
struct TestSet {
  Eigen::MatrixXd x;   // n_test x p
  Eigen::MatrixXd b1;  // n_test x q
  Eigen::MatrixXd b2;
};

inline TestSet gen_testset(const Scenario& scn, int rep_index) {
  scn.validate();
  const detail::TruthCache cache(scn);
  TestSet ts;
  ts.x.resize(scn.n_test, scn.p);
  ts.b1.resize(scn.n_test, 3);
  ts.b2.resize(scn.n_test, 3);
  for (int i = 0; i < scn.n_test; ++i) {
    rng::Engine ex(rng::derive(scn.seed, rep_index, rng::tag(rng::Stream::test_covariates), i));
    rng::Engine eb(rng::derive(scn.seed, rep_index, rng::tag(rng::Stream::test_random_effects), i));
    ts.x.row(i) = rng::mvn_draw(ex, cache.truth.moments.mu, cache.chol_x).transpose();
    ts.b1.row(i) = (cache.chol_b1 * eb.normal_vector(3)).transpose();
    ts.b2.row(i) = (cache.chol_b2 * eb.normal_vector(3)).transpose();
  }
  return ts;
}

/// Delete rows according to the missingness mode. The first two design
/// times are always retained; under mcar each later time is dropped
/// independently with probability 0.4, under dropout each subject loses
/// all later times with probability 0.5.
inline TrialData apply_missingness(const TrialData& data, Missingness mode, std::uint64_t seed) {
  if (mode == Missingness::none) return data;
  if (data.design_times.size() < 3)
    throw std::invalid_argument("apply_missingness: design grid too short");
  TrialData out;
  out.p = data.p;
  out.design_times = data.design_times;
  out.subjects.reserve(data.subjects.size());
  for (std::size_t i = 0; i < data.subjects.size(); ++i) {
    const auto& s = data.subjects[i];
    rng::Engine eng(rng::derive(seed, rng::tag(rng::Stream::missingness), i));
    std::vector<bool> keep_design(static_cast<std::size_t>(data.design_times.size()), true);
    if (mode == Missingness::mcar) {
      for (Eigen::Index j = 2; j < data.design_times.size(); ++j)
        keep_design[static_cast<std::size_t>(j)] = eng.uniform() >= 0.4;
    } else {  // dropout
      if (eng.uniform() < 0.5)
        for (Eigen::Index j = 2; j < data.design_times.size(); ++j)
          keep_design[static_cast<std::size_t>(j)] = false;
    }
    std::vector<double> kt, ko;
    for (Eigen::Index j = 0; j < s.times.size(); ++j) {
      Eigen::Index pos = 0;
      while (pos < data.design_times.size() && data.design_times[pos] != s.times[j]) ++pos;
      if (pos >= data.design_times.size())
        throw std::invalid_argument("apply_missingness: observation off the design grid");
      if (keep_design[static_cast<std::size_t>(pos)]) {
        kt.push_back(s.times[j]);
        ko.push_back(s.outcomes[j]);
      }
    }
    SubjectRecord ns;
    ns.id = s.id;
    ns.group = s.group;
    ns.covariates = s.covariates;
    ns.times = Eigen::Map<Eigen::VectorXd>(kt.data(), static_cast<Eigen::Index>(kt.size()));
    ns.outcomes = Eigen::Map<Eigen::VectorXd>(ko.data(), static_cast<Eigen::Index>(ko.size()));
    out.subjects.push_back(std::move(ns));
  }
  return out;
}

struct NamedRuleBuilder {
  std::string name;
  RuleBuilder build;
};

struct MethodPcd {
  std::string method;
  double mean_pcd = 0.0;
  double sd_pcd = 0.0;
  int n_ok = 0;
  int n_fail = 0;
};

struct ScenarioResult {
  Scenario scenario;
  std::vector<MethodPcd> methods;
};

/// Run every (scenario, replication): train each method on the
/// post-missingness training set, score the fresh test set against the
/// random-effects decision oracle, and aggregate PCD across reps.
/// An "actual-alpha" reference (true index, refit slopes) is always
/// reported first. Per-replication method failures are counted, never
/// fatal. Bit-identical output for identical scenarios.
inline std::vector<ScenarioResult> run_grid(const std::vector<Scenario>& scenarios,
                                            const std::vector<NamedRuleBuilder>& methods,
                                            const LmmFitOptions& reference_lmm = {},
                                            int n_threads = 0) {
  struct RepOutcome {
    std::vector<double> pcd;   // per method, NaN on failure
  };
  std::vector<ScenarioResult> results(scenarios.size());

  for (std::size_t si = 0; si < scenarios.size(); ++si) {
    const Scenario& scn = scenarios[si];
    scn.validate();
    const detail::TruthCache cache(scn);
    const BasisSpec spec = sim_basis();
    const Eigen::VectorXd tgrid = sim_design_times();
    const double t0 = tgrid[0], t1 = tgrid[tgrid.size() - 1];
    const std::size_t n_methods = methods.size() + 1;

    std::vector<RepOutcome> reps(static_cast<std::size_t>(scn.n_reps));
    parallel_for(static_cast<std::size_t>(scn.n_reps), [&](std::size_t rep) {
      auto& out = reps[rep];
      out.pcd.assign(n_methods, std::numeric_limits<double>::quiet_NaN());
      const int rep_index = static_cast<int>(rep);
      GeneratedTrial gen = gen_dataset(scn, rep_index);
      const TrialData train = apply_missingness(
          gen.data, scn.missingness,
          rng::derive(scn.seed, rep_index, rng::tag(rng::Stream::missingness)));
      const TestSet test = gen_testset(scn, rep_index);

      std::vector<int> truth_labels(static_cast<std::size_t>(scn.n_test));
      for (int i = 0; i < scn.n_test; ++i)
        truth_labels[static_cast<std::size_t>(i)] =
            true_rule(cache.truth.group1, cache.truth.group2, test.b1.row(i).transpose(),
                      test.b2.row(i).transpose(), test.x.row(i).transpose(), cache.truth.alpha,
                      spec, t0, t1);

      auto score = [&](const TrainedRule& rule) {
        std::vector<int> pred(static_cast<std::size_t>(scn.n_test));
        for (int i = 0; i < scn.n_test; ++i)
          pred[static_cast<std::size_t>(i)] = rule(test.x.row(i).transpose());
        return pcd(pred, truth_labels);
      };

      // reference method: plug the true index into the decision rule with
      // refit per-arm parameters
      try {
        FittedModel ref;
        ref.alpha = cache.truth.alpha;
        auto g1 = detail::PreparedGroup::build(train.group(1), spec);
        auto g2 = detail::PreparedGroup::build(train.group(2), spec);
        g1.set_index(ref.alpha);
        g2.set_index(ref.alpha);
        ref.group1 = fit_prepared(g1, reference_lmm).params;
        ref.group2 = fit_prepared(g2, reference_lmm).params;
        out.pcd[0] = score([&](const Eigen::VectorXd& x) {
          return decide(ref, x, spec, t0, t1).assignment;
        });
      } catch (const std::exception&) {
      }

      for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        try {
          const TrainedRule rule = methods[mi].build(train);
          out.pcd[mi + 1] = score(rule);
        } catch (const std::exception&) {
        }
      }
    }, n_threads);

    ScenarioResult sr;
    sr.scenario = scn;
    for (std::size_t mi = 0; mi < n_methods; ++mi) {
      MethodPcd mp;
      mp.method = mi == 0 ? "actual-alpha" : methods[mi - 1].name;
      double sum = 0.0;
      for (const auto& r : reps) {
        if (std::isnan(r.pcd[mi])) {
          ++mp.n_fail;
        } else {
          sum += r.pcd[mi];
          ++mp.n_ok;
        }
      }
      if (mp.n_ok > 0) {
        mp.mean_pcd = sum / mp.n_ok;
        double ss = 0.0;
        for (const auto& r : reps)
          if (!std::isnan(r.pcd[mi])) ss += (r.pcd[mi] - mp.mean_pcd) * (r.pcd[mi] - mp.mean_pcd);
        mp.sd_pcd = mp.n_ok > 1 ? std::sqrt(ss / (mp.n_ok - 1)) : 0.0;
      }
      sr.methods.push_back(std::move(mp));
    }
    results[si] = std::move(sr);
  }
  return results;
}

}  // namespace lskld
