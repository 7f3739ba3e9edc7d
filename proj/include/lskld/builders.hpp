#pragma once

#include <memory>

#include "lskld/biosignature_search.hpp"
#include "lskld/decision_rules.hpp"
#include "lskld/evaluation.hpp"

namespace lskld {

/// Index-based rule: estimate the index and per-arm slopes on the
/// training trial, decide by the average-tangent-slope contrast over
/// [t_first, t_last] of the training design grid.
inline RuleBuilder make_lskld_builder(const BasisSpec& spec, const SearchOptions& search,
                                      const LmmFitOptions& lmm) {
  return [spec, search, lmm](const TrialData& train) -> TrainedRule {
    const auto model = std::make_shared<FittedModel>(estimate_alpha(train, spec, search, lmm));
    const double t0 = train.design_times[0];
    const double t1 = train.design_times[train.design_times.size() - 1];
    return [model, spec, t0, t1](const Eigen::VectorXd& x) {
      return decide(*model, x, spec, t0, t1).assignment;
    };
  };
}

inline RuleBuilder make_changescore_builder() {
  return [](const TrialData& train) -> TrainedRule {
    const auto rule = std::make_shared<ChangeScoreRule>(fit_changescore_rule(train));
    return [rule](const Eigen::VectorXd& x) { return apply_changescore_rule(*rule, x); };
  };
}

inline RuleBuilder make_constant_builder(int arm) {
  if (arm != 1 && arm != 2) throw std::invalid_argument("make_constant_builder: arm must be 1 or 2");
  return [arm](const TrialData&) -> TrainedRule {
    return [arm](const Eigen::VectorXd&) { return arm; };
  };
}

}  // namespace lskld
