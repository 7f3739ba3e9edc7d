#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace lskld {

/// Basis functions of time. Only the polynomial family is provided:
/// basis j evaluated at t is t^(j-1), giving q = degree + 1 functions.
struct BasisSpec {
  enum class Kind { polynomial };

  Kind kind = Kind::polynomial;
  int degree = 2;

  int q() const { return degree + 1; }

  void validate() const {
    if (kind != Kind::polynomial) throw std::invalid_argument("BasisSpec: unknown basis kind");
    if (degree < 1) throw std::invalid_argument("BasisSpec: degree must be >= 1");
  }
};

/// One subject: observed times (strictly increasing), outcomes at those
/// times, baseline covariates, and the arm label. Missing visits are
/// represented by absent rows, never by sentinel values.
struct SubjectRecord {
  std::string id;
  int group = 0;  // 1 or 2
  Eigen::VectorXd times;
  Eigen::VectorXd outcomes;
  Eigen::VectorXd covariates;

  void validate() const {
    if (group != 1 && group != 2)
      throw std::invalid_argument("SubjectRecord '" + id + "': group must be 1 or 2");
    if (times.size() != outcomes.size())
      throw std::invalid_argument("SubjectRecord '" + id + "': times/outcomes length mismatch");
    if (times.size() < 1)
      throw std::invalid_argument("SubjectRecord '" + id + "': needs at least one observation");
    for (Eigen::Index j = 1; j < times.size(); ++j)
      if (!(times[j] > times[j - 1]))
        throw std::invalid_argument("SubjectRecord '" + id + "': times must be strictly increasing");
    if (!times.allFinite() || !outcomes.allFinite() || !covariates.allFinite())
      throw std::invalid_argument("SubjectRecord '" + id + "': non-finite value");
  }
};

/// A two-arm longitudinal trial. design_times is the protocol grid;
/// every observed time must be one of the design times.
struct TrialData {
  std::vector<SubjectRecord> subjects;
  int p = 0;  // covariate dimension
  Eigen::VectorXd design_times;

  void validate() const {
    if (subjects.empty()) throw std::invalid_argument("TrialData: no subjects");
    bool has1 = false, has2 = false;
    for (const auto& s : subjects) {
      s.validate();
      if (s.covariates.size() != p)
        throw std::invalid_argument("TrialData: subject '" + s.id + "' has " +
                                    std::to_string(s.covariates.size()) +
                                    " covariates, expected " + std::to_string(p));
      has1 |= s.group == 1;
      has2 |= s.group == 2;
      for (Eigen::Index j = 0; j < s.times.size(); ++j) {
        bool found = false;
        for (Eigen::Index k = 0; k < design_times.size() && !found; ++k)
          found = s.times[j] == design_times[k];
        if (!found)
          throw std::invalid_argument("TrialData: subject '" + s.id +
                                      "' observed off the design grid");
      }
    }
    if (!has1 || !has2) throw std::invalid_argument("TrialData: both groups must be present");
  }

  std::vector<const SubjectRecord*> group(int k) const {
    std::vector<const SubjectRecord*> out;
    for (const auto& s : subjects)
      if (s.group == k) out.push_back(&s);
    return out;
  }
};

/// Per-arm mixed-model parameters: fixed effects beta, index
/// coefficients gamma, random-effect covariance d, error variance.
struct GroupParams {
  Eigen::VectorXd beta;
  Eigen::VectorXd gamma;
  Eigen::MatrixXd d;
  double sigma2 = 1.0;

  int q() const { return static_cast<int>(beta.size()); }

  void validate() const {
    const auto n = beta.size();
    if (gamma.size() != n || d.rows() != n || d.cols() != n)
      throw std::invalid_argument("GroupParams: inconsistent dimensions");
    if (!(sigma2 > 0.0)) throw std::invalid_argument("GroupParams: sigma2 must be positive");
  }
};

/// First two moments of the baseline covariates.
struct CovariateMoments {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
};

/// Result of the full index estimation: the unit-norm index vector,
/// both arms' refit parameters at that index, the covariate moments,
/// and the achieved log-likelihood and purity.
struct FittedModel {
  Eigen::VectorXd alpha;
  GroupParams group1;
  GroupParams group2;
  CovariateMoments moments;
  double loglik = 0.0;
  double purity = 0.0;

  void validate() const {
    if (std::abs(alpha.norm() - 1.0) > 1e-10)
      throw std::invalid_argument("FittedModel: alpha must have unit norm");
    for (Eigen::Index i = 0; i < alpha.size(); ++i) {
      if (alpha[i] != 0.0) {
        if (alpha[i] < 0.0)
          throw std::invalid_argument("FittedModel: first nonzero alpha component must be positive");
        break;
      }
    }
    group1.validate();
    group2.validate();
  }
};

/// g(t) = (t^0, t^1, ..., t^degree).
inline Eigen::VectorXd eval_basis(double t, const BasisSpec& spec) {
  spec.validate();
  Eigen::VectorXd g(spec.q());
  g[0] = 1.0;
  for (int j = 1; j < spec.q(); ++j) g[j] = g[j - 1] * t;
  return g;
}

/// Stacked basis rows, one per observation time.
inline Eigen::MatrixXd design_matrix(const Eigen::VectorXd& times, const BasisSpec& spec) {
  spec.validate();
  if (times.size() == 0)
    throw std::invalid_argument("design_matrix: empty time vector (degenerate subject)");
  Eigen::MatrixXd g(times.size(), spec.q());
  for (Eigen::Index i = 0; i < times.size(); ++i) g.row(i) = eval_basis(times[i], spec);
  return g;
}

/// Mean trajectory g(t)'(beta + gamma w) at index value w, with the
/// random effect at its zero mean.
inline double mean_trajectory(const GroupParams& params, double w, double t,
                              const BasisSpec& spec) {
  params.validate();
  if (params.q() != spec.q()) throw std::invalid_argument("mean_trajectory: q mismatch");
  return eval_basis(t, spec).dot(params.beta + params.gamma * w);
}

}  // namespace lskld
