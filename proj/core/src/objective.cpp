#include "calsuffix/objective.hpp"

#include <cmath>

#include "calsuffix/error.hpp"

namespace calsuffix {

HarmObjective::HarmObjective(const ModelBackend& backend, std::span<const TaskSpec> tasks, Calibration calibration)
    : backend_(&backend) {
  for (const auto& t : tasks) scorers_.try_emplace(&t, backend, t, calibration);
}

const TaskScorer& HarmObjective::scorer(const TaskSpec& task) const {
  auto it = scorers_.find(&task);
  if (it == scorers_.end()) throw std::invalid_argument("task " + task.name + " is not part of this objective");
  return it->second;
}

const TokenIds& HarmObjective::prompt(const TaskExample& ex) {
  auto it = prompts_.find(ex.example);
  if (it != prompts_.end()) return it->second;
  auto wrapped = render_prompt(*ex.example, *ex.task, {}, backend_->vocab());
  return prompts_.emplace(ex.example, std::move(wrapped.ids)).first->second;
}

double HarmObjective::mean_calce(std::span<const TaskExample> batch, const SuffixInput& suffix) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  double sum = 0.0;
  for (const auto& ex : batch) sum += scorer(*ex.task).calce(prompt(ex), suffix, ex.example->label);
  return sum / static_cast<double>(batch.size());
}

HarmObjective::ValueAndGrad HarmObjective::mean_calce_grad(std::span<const TaskExample> batch, const Matrix& delta) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  ValueAndGrad out;
  out.span = Matrix::Zero(delta.rows(), delta.cols());
  // Fixed summation order keeps results reproducible.
  for (const auto& ex : batch) {
    const auto vg = scorer(*ex.task).calce_with_grad(prompt(ex), delta, ex.example->label);
    out.value += vg.value;
    out.span += vg.span;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.value *= inv;
  out.span *= inv;
  out.finite = std::isfinite(out.value) && out.span.allFinite();
  return out;
}

}  // namespace calsuffix
