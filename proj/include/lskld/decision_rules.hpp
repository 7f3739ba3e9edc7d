#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "lskld/trajectory_model.hpp"

namespace lskld {

/// A treatment decision: the assigned arm and the average-tangent-slope
/// margin (arm 2 minus arm 1). assignment == 2 exactly when margin > 0;
/// ties go to arm 1.
struct Decision {
  int assignment = 1;
  double margin = 0.0;
};

/// Change-score comparator: per-arm least squares of (last - first
/// outcome) on (1, x), kept as the between-arm contrast.
struct ChangeScoreRule {
  Eigen::VectorXd coef_diff;  // arm 2 minus arm 1
  double intercept_diff = 0.0;
};

/// Contraction weights such that w'z = (f(t_last) - f(t_first)) /
/// (t_last - t_first) for the trajectory f = g(.)'z; exact for any
/// coefficient vector z.
inline Eigen::VectorXd ats_weights(const BasisSpec& spec, double t_first, double t_last) {
  if (!(t_last > t_first)) throw std::invalid_argument("ats_weights: need t_last > t_first");
  return (eval_basis(t_last, spec) - eval_basis(t_first, spec)) / (t_last - t_first);
}

namespace detail {

inline int assign_from_margin(double margin) { return margin > 0.0 ? 2 : 1; }

}  // namespace detail

/// Rule for a new subject: compare the fitted mean average tangent
/// slopes of the two arms at the subject's index value. Larger outcomes
/// must be preferable; callers pre-negate outcomes otherwise.
inline Decision decide(const FittedModel& model, const Eigen::VectorXd& x, const BasisSpec& spec,
                       double t_first, double t_last) {
  if (x.size() != model.alpha.size()) throw std::invalid_argument("decide: dimension mismatch");
  const double w = model.alpha.dot(x);
  const Eigen::VectorXd ats = ats_weights(spec, t_first, t_last);
  Decision d;
  d.margin = ats.dot(model.group2.beta + model.group2.gamma * w) -
             ats.dot(model.group1.beta + model.group1.gamma * w);
  d.assignment = detail::assign_from_margin(d.margin);
  return d;
}

/// Oracle assignment for a simulated subject: the same slope comparison
/// but with the generating parameters and the subject's own random
/// effects under both arms.
inline int true_rule(const GroupParams& g1, const GroupParams& g2, const Eigen::VectorXd& b1,
                     const Eigen::VectorXd& b2, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& alpha_true, const BasisSpec& spec, double t_first,
                     double t_last) {
  if (x.size() != alpha_true.size()) throw std::invalid_argument("true_rule: dimension mismatch");
  const double w = alpha_true.dot(x);
  const Eigen::VectorXd ats = ats_weights(spec, t_first, t_last);
  const double margin =
      ats.dot(g2.beta + b2 + g2.gamma * w) - ats.dot(g1.beta + b1 + g1.gamma * w);
  return detail::assign_from_margin(margin);
}

/// Per-arm OLS of the change score (last minus first observed outcome)
/// on (1, x); subjects with a single observation are excluded.
inline ChangeScoreRule fit_changescore_rule(const TrialData& data) {
  data.validate();
  std::vector<Eigen::VectorXd> coefs;
  for (int k = 1; k <= 2; ++k) {
    std::vector<const SubjectRecord*> rows;
    for (const auto& s : data.subjects)
      if (s.group == k && s.times.size() >= 2) rows.push_back(&s);
    if (static_cast<int>(rows.size()) < data.p + 2)
      throw std::runtime_error("fit_changescore_rule: group " + std::to_string(k) +
                               " has fewer than p+2 usable subjects");
    Eigen::MatrixXd x(rows.size(), data.p + 1);
    Eigen::VectorXd cs(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x(static_cast<Eigen::Index>(i), 0) = 1.0;
      x.row(static_cast<Eigen::Index>(i)).tail(data.p) = rows[i]->covariates;
      cs[static_cast<Eigen::Index>(i)] =
          rows[i]->outcomes[rows[i]->outcomes.size() - 1] - rows[i]->outcomes[0];
    }
    Eigen::VectorXd c = (x.transpose() * x).ldlt().solve(x.transpose() * cs);
    if (!c.allFinite())
      c = x.colPivHouseholderQr().solve(cs);
    if (!c.allFinite()) throw std::runtime_error("fit_changescore_rule: singular regression");
    coefs.push_back(c);
  }
  ChangeScoreRule rule;
  rule.intercept_diff = coefs[1][0] - coefs[0][0];
  rule.coef_diff = coefs[1].tail(data.p) - coefs[0].tail(data.p);
  return rule;
}

/// Assigns arm 2 exactly when the predicted change score under arm 2
/// exceeds arm 1; ties go to arm 1.
inline int apply_changescore_rule(const ChangeScoreRule& rule, const Eigen::VectorXd& x) {
  if (x.size() != rule.coef_diff.size())
    throw std::invalid_argument("apply_changescore_rule: dimension mismatch");
  return detail::assign_from_margin(rule.intercept_diff + rule.coef_diff.dot(x));
}

}  // namespace lskld
