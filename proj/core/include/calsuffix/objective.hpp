#pragma once

#include <map>
#include <span>
#include <unordered_map>

#include "calsuffix/scoring.hpp"
#include "calsuffix/tasks.hpp"

namespace calsuffix {

// The harm objective E[CalCE] on a seen backend, over the 0-shot prompts of
// a multi-task pool. Shared by the trainer and the baselines.
class HarmObjective {
 public:
  HarmObjective(const ModelBackend& backend, std::span<const TaskSpec> tasks,
                Calibration calibration = Calibration::kCalibrated);

  const ModelBackend& backend() const { return *backend_; }
  const TaskScorer& scorer(const TaskSpec& task) const;
  // 0-shot wrapped prompt ids, memoized per example.
  const TokenIds& prompt(const TaskExample& ex);

  double mean_calce(std::span<const TaskExample> batch, const SuffixInput& suffix);

  struct ValueAndGrad {
    double value = 0.0;
    Matrix span;  // ∂ mean CalCE / ∂δ
    bool finite = true;
  };
  ValueAndGrad mean_calce_grad(std::span<const TaskExample> batch, const Matrix& delta);

 private:
  const ModelBackend* backend_;
  std::map<const TaskSpec*, TaskScorer> scorers_;
  std::unordered_map<const Example*, TokenIds> prompts_;
};

}  // namespace calsuffix
