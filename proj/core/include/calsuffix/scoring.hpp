#pragma once

#include <span>
#include <variant>
#include <vector>

#include "calsuffix/backend.hpp"
#include "calsuffix/tasks.hpp"

namespace calsuffix {

// What sits between w(x) and the answer prefix: nothing, hard token ids, or
// a K×H soft span δ.
using SuffixInput = std::variant<std::monostate, TokenIds, Matrix>;

// A scoring sequence and the label positions T(s) inside it.
struct ScoringSequence {
  MixedSequence seq;
  std::vector<std::size_t> positions;
  std::size_t truncated = 0;  // prompt tokens dropped from the left to fit
};

// [BOS] ∥ w(x) ∥ δ ∥ p ∥ s. When longer than the backend's context limit,
// prompt tokens are dropped from the left (after BOS).
ScoringSequence context_sequence(const ModelBackend& backend, std::span<const TokenId> prompt_ids,
                                 const SuffixInput& suffix, std::span<const TokenId> prefix_ids,
                                 std::span<const TokenId> surface_ids);
// [BOS] ∥ p ∥ s.
ScoringSequence null_sequence(const ModelBackend& backend, std::span<const TokenId> prefix_ids,
                              std::span<const TokenId> surface_ids);

// −Σ_{t∈positions} log p(z_t | z_<t).
double masked_ce(const ModelBackend& backend, const MixedSequence& seq, std::span<const std::size_t> positions);

// Soft minimum −log Σ exp(−a_s), max-shifted.
double softmin_aggregate(std::span<const double> values);
// ∂softmin/∂a_s: a probability vector over the inputs.
std::vector<double> softmin_weights(std::span<const double> values);

enum class Calibration { kCalibrated, kUncalibrated };
enum class PredictionRule { kCalibrated, kRaw };

struct ScoredLabel {
  std::size_t label = 0;
  std::vector<double> ce_ctx;   // per surface
  std::vector<double> ce_null;  // per surface
  double calce = 0.0;
  double ell_ctx = 0.0;
  double ell_null = 0.0;
  double ell_cal = 0.0;  // ell_ctx − ell_null
};

// Scoring state for one (backend, task) pair: the prefix and surfaces
// tokenized under the backend's vocabulary, and the context-free null CEs.
class TaskScorer {
 public:
  TaskScorer(const ModelBackend& backend, const TaskSpec& task, Calibration calibration = Calibration::kCalibrated);

  const ModelBackend& backend() const { return *backend_; }
  const TaskSpec& task() const { return *task_; }
  const TokenIds& prefix_ids() const { return prefix_ids_; }
  const LabelSurfaceMap& surfaces() const { return surfaces_; }
  Calibration calibration() const { return calibration_; }

  double ce_null(std::size_t label, std::size_t surface) const { return null_ce_[label][surface]; }
  double ce_ctx(std::span<const TokenId> prompt, const SuffixInput& suffix, std::size_t label,
                std::size_t surface) const;

  // softmin over S(y) of ce_ctx − ce_null (ce_null taken as 0 when uncalibrated).
  double calce(std::span<const TokenId> prompt, const SuffixInput& suffix, std::size_t label) const;

  struct ValueAndGrad {
    double value = 0.0;
    Matrix span;  // ∂/∂δ
  };
  ValueAndGrad calce_with_grad(std::span<const TokenId> prompt, const Matrix& soft, std::size_t label) const;

  std::vector<ScoredLabel> cal_logp(std::span<const TokenId> prompt, const SuffixInput& suffix) const;

  // Prompt tokens dropped for the longest surface; 0 when everything fits.
  std::size_t truncation(std::span<const TokenId> prompt, const SuffixInput& suffix) const;

 private:
  const ModelBackend* backend_;
  const TaskSpec* task_;
  Calibration calibration_;
  TokenIds prefix_ids_;
  LabelSurfaceMap surfaces_;
  std::vector<std::vector<double>> null_ce_;
};

// argmax over labels of ell_cal (or ell_ctx for the raw rule); ties go to the
// first label in task order.
std::size_t predict_label(std::span<const ScoredLabel> scores, PredictionRule rule = PredictionRule::kCalibrated);

// Convenience forms that tokenize on every call.
double ce_ctx(const ModelBackend& backend, const WrappedPrompt& wrapped, const SuffixInput& suffix,
              const TaskSpec& spec, std::size_t label, std::size_t surface);
double ce_null(const ModelBackend& backend, const TaskSpec& spec, std::size_t label, std::size_t surface);
double calce(const ModelBackend& backend, const WrappedPrompt& wrapped, const SuffixInput& suffix,
             const TaskSpec& spec, std::size_t label);
std::vector<ScoredLabel> cal_logp(const ModelBackend& backend, const WrappedPrompt& wrapped,
                                  const SuffixInput& suffix, const TaskSpec& spec);
std::size_t predict_label(const ModelBackend& backend, const WrappedPrompt& wrapped, const SuffixInput& suffix,
                          const TaskSpec& spec, PredictionRule rule = PredictionRule::kCalibrated);

}  // namespace calsuffix
