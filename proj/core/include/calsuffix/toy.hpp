#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "calsuffix/backend.hpp"
#include "calsuffix/scoring.hpp"
#include "calsuffix/tasks.hpp"

namespace calsuffix {

// Two-class review sentiment over the toy vocabulary, separable by the
// polarity of its adjectives. sst2-shaped: field "sentence", labels
// negative/positive with surfaces {" no"," No"} / {" yes"," Yes"}.
TaskSpec sentiment_fixture(std::size_t n_train = 128, std::size_t n_validation = 128, std::uint64_t seed = 0);

// Passage/question topic agreement over the toy vocabulary (boolq-shaped).
TaskSpec topic_fixture(std::size_t n_train = 64, std::size_t n_validation = 64, std::uint64_t seed = 0);

// Three-letter strings over the tiny vocabulary; label " yes" when letters
// from a-d outnumber those from e-h.
TaskSpec tiny_fixture(std::size_t n_train = 32, std::size_t n_validation = 32, std::uint64_t seed = 0);

void save_jsonl(std::span<const Example> examples, const TaskSpec& spec, const std::filesystem::path& path);

struct FitOptions {
  std::size_t hidden = 16;
  std::size_t ffn = 32;
  std::size_t context_limit = 64;
  double init_scale = 0.3;
  double lr = 1e-2;
  std::size_t batch_size = 32;
  double accuracy_floor = 0.95;
};

// Trains a single-block transformer on the first half of `fixture` with the
// label cross-entropy over calibrated scores, then checks the calibrated
// prediction rule on the second half. Throws FitFailed below the floor.
std::unique_ptr<TransformerLM> fit_toy_backend(std::span<const Example> fixture, const TaskSpec& spec,
                                               std::size_t steps, std::uint64_t seed,
                                               const Vocabulary& vocab = toy_vocabulary(),
                                               const FitOptions& options = {});

// Fraction of examples whose predicted label equals gold, 0-shot.
double task_accuracy(const ModelBackend& backend, const TaskSpec& spec, std::span<const Example> examples,
                     const SuffixInput& suffix = {}, PredictionRule rule = PredictionRule::kCalibrated);

}  // namespace calsuffix
