#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "lskld/parallel.hpp"
#include "lskld/rng.hpp"
#include "lskld/trajectory_model.hpp"

namespace lskld {

/// Repeated stratified k-fold cross-validation plan.
struct CvPlan {
  int n_folds = 10;
  int n_repeats = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_folds < 2) throw std::invalid_argument("CvPlan: n_folds must be >= 2");
    if (n_repeats < 1) throw std::invalid_argument("CvPlan: n_repeats must be >= 1");
  }
};

/// Fraction of positions where the predicted arm matches the truth.
inline double pcd(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size() || predicted.empty())
    throw std::invalid_argument("pcd: vectors must have equal nonzero length");
  long hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if ((predicted[i] != 1 && predicted[i] != 2) || (truth[i] != 1 && truth[i] != 2))
      throw std::invalid_argument("pcd: assignments must be 1 or 2");
    hits += predicted[i] == truth[i];
  }
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

/// Matched-mean value estimate: the average improvement among subjects
/// whose observed assignment agrees with the rule.
inline double ipwe(const std::vector<double>& improvements, const std::vector<int>& observed,
                   const std::vector<int>& predicted) {
  if (improvements.size() != observed.size() || observed.size() != predicted.size())
    throw std::invalid_argument("ipwe: length mismatch");
  double sum = 0.0;
  long matched = 0;
  for (std::size_t i = 0; i < improvements.size(); ++i) {
    if (observed[i] == predicted[i]) {
      sum += improvements[i];
      ++matched;
    }
  }
  if (matched == 0)
    throw std::runtime_error("ipwe: undefined, no subject follows the rule (zero denominator)");
  return sum / static_cast<double>(matched);
}

/// A trained rule maps baseline covariates to an arm in {1,2}.
using TrainedRule = std::function<int(const Eigen::VectorXd&)>;
/// A rule builder trains on a trial and returns the decision rule.
using RuleBuilder = std::function<TrainedRule(const TrialData&)>;

struct FoldIpwe {
  int repeat = 0;
  int fold = 0;
  double value = 0.0;
  int n_matched = 0;
};

struct CvResult {
  std::vector<FoldIpwe> folds;  // successful folds, ordered by (repeat, fold)
  double mean = 0.0;
  double sd = 0.0;
  int n_failed = 0;         // folds skipped because the builder or scoring failed
  int n_missing_last = 0;   // subjects whose last observation precedes the design end
};

namespace detail {

/// Stratified fold labels: within each arm, a seeded shuffle dealt
/// round-robin, so per-fold group counts differ from the proportional
/// share by at most one.
inline std::vector<int> fold_labels(const TrialData& data, int n_folds, std::uint64_t seed,
                                    int repeat) {
  std::vector<int> labels(data.subjects.size(), -1);
  for (int k = 1; k <= 2; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.subjects.size(); ++i)
      if (data.subjects[i].group == k) idx.push_back(i);
    rng::Engine eng(rng::derive(seed, rng::tag(rng::Stream::folds), repeat, k));
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[eng.index(i)]);
    for (std::size_t j = 0; j < idx.size(); ++j)
      labels[idx[j]] = static_cast<int>(j % static_cast<std::size_t>(n_folds));
  }
  return labels;
}

}  // namespace detail

/// Repeated stratified k-fold CV of a rule builder. For each fold the
/// rule is trained on the remaining subjects and scored on the held-out
/// ones with the matched-mean estimator; improvements are last minus
/// first observed outcome (callers orient outcomes larger-is-better).
/// Subjects with one observation train but are not scored. Builder
/// failures skip the fold and are counted.
inline CvResult cross_validate(const TrialData& data, const RuleBuilder& builder,
                               const CvPlan& plan) {
  data.validate();
  plan.validate();
  CvResult res;
  const double t_end = data.design_times[data.design_times.size() - 1];
  for (const auto& s : data.subjects)
    if (s.times[s.times.size() - 1] != t_end) ++res.n_missing_last;

  struct FoldSlot {
    bool ok = false;
    bool failed = false;
    FoldIpwe out;
  };
  std::vector<FoldSlot> slots(static_cast<std::size_t>(plan.n_repeats) *
                              static_cast<std::size_t>(plan.n_folds));

  parallel_for(static_cast<std::size_t>(plan.n_repeats), [&](std::size_t r) {
    const auto labels = detail::fold_labels(data, plan.n_folds, plan.seed, static_cast<int>(r));
    for (int f = 0; f < plan.n_folds; ++f) {
      auto& slot = slots[r * static_cast<std::size_t>(plan.n_folds) + static_cast<std::size_t>(f)];
      try {
        TrialData train;
        train.p = data.p;
        train.design_times = data.design_times;
        std::vector<std::size_t> held;
        for (std::size_t i = 0; i < data.subjects.size(); ++i) {
          if (labels[i] == f)
            held.push_back(i);
          else
            train.subjects.push_back(data.subjects[i]);
        }
        if (held.empty() || train.subjects.empty())
          throw std::runtime_error("cross_validate: empty fold");
        const TrainedRule rule = builder(train);
        std::vector<double> u;
        std::vector<int> observed, predicted;
        for (std::size_t i : held) {
          const auto& s = data.subjects[i];
          if (s.times.size() < 2) continue;  // no change score to evaluate
          u.push_back(s.outcomes[s.outcomes.size() - 1] - s.outcomes[0]);
          observed.push_back(s.group);
          predicted.push_back(rule(s.covariates));
        }
        if (u.empty()) throw std::runtime_error("cross_validate: no scorable held-out subjects");
        slot.out.repeat = static_cast<int>(r);
        slot.out.fold = f;
        slot.out.value = ipwe(u, observed, predicted);
        for (std::size_t i = 0; i < observed.size(); ++i)
          slot.out.n_matched += observed[i] == predicted[i];
        slot.ok = true;
      } catch (const std::exception&) {
        slot.failed = true;
      }
    }
  });

  double sum = 0.0;
  for (const auto& slot : slots) {
    if (slot.ok) {
      res.folds.push_back(slot.out);
      sum += slot.out.value;
    } else {
      ++res.n_failed;
    }
  }
  if (!res.folds.empty()) {
    res.mean = sum / static_cast<double>(res.folds.size());
    double ss = 0.0;
    for (const auto& fo : res.folds) ss += (fo.value - res.mean) * (fo.value - res.mean);
    res.sd = res.folds.size() > 1
                 ? std::sqrt(ss / static_cast<double>(res.folds.size() - 1))
                 : 0.0;
  }
  return res;
}

}  // namespace lskld
