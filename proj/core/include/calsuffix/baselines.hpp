#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calsuffix/artifact.hpp"
#include "calsuffix/objective.hpp"
#include "calsuffix/trainer.hpp"

namespace calsuffix {

enum class BaselineMethod { kUat, kAutoPrompt, kSoftPrompt };

std::string_view to_string(BaselineMethod m);
BaselineMethod parse_baseline_method(std::string_view name);  // throws ConfigError

struct BaselineConfig {
  BaselineMethod method = BaselineMethod::kUat;
  std::size_t K = 4;
  // uat: swap rounds; autoprompt: position visits; softprompt: optimizer steps.
  std::size_t budget = 100;
  std::size_t candidates = 16;
  // Examples drawn once (task-uniform) to form the fixed objective batch of
  // the discrete methods; softprompt samples a fresh minibatch per step.
  std::size_t objective_examples = 64;
  bool uncalibrated = false;
  std::uint64_t seed = 0;
  // Optimizer/schedule for softprompt (K, steps and seed are taken from above).
  TrainConfig optimizer;

  void validate() const;
  nlohmann::json to_json() const;
  static BaselineConfig from_json(const nlohmann::json& j);
};

struct BaselineResult {
  SuffixArtifact artifact;
  // uat / autoprompt: objective after initialization and after every accepted
  // change. softprompt: per-step batch objective.
  std::vector<double> trajectory;
  bool converged = false;  // autoprompt fixed point / uat no improving swap
  std::size_t iterations = 0;
  // softprompt only.
  double soft_objective = 0.0;
  double projected_objective = 0.0;
};

// The fixed batch the discrete methods optimize over, drawn with the
// config's seed.
std::vector<TaskExample> baseline_objective_batch(std::span<const TaskSpec> tasks, const BaselineConfig& config);

// Most frequent allowed token in the tasks' 0-shot train prompts (lowest id
// on ties).
TokenId most_frequent_allowed_token(std::span<const TaskSpec> tasks, const Vocabulary& vocab, const ForbidMask& mask);

// Per-position first-order scores g_k·(E_v − E_cur) for every token.
Matrix first_order_scores(const Matrix& span_grad, const Matrix& E, std::span<const TokenId> current);

// Nearest allowed embedding row by Euclidean distance (lowest id on ties).
TokenId project_to_token(const RowVector& vec, const Matrix& E, const ForbidMask& mask);

BaselineResult uat_train(const BaselineConfig& config, std::span<const TaskSpec> tasks, const ModelBackend& seen,
                         const ForbidMask& mask, std::optional<TokenIds> init = std::nullopt);
BaselineResult autoprompt_train(const BaselineConfig& config, std::span<const TaskSpec> tasks,
                                const ModelBackend& seen, const ForbidMask& mask,
                                std::optional<TokenIds> init = std::nullopt);
BaselineResult softprompt_train(const BaselineConfig& config, std::span<const TaskSpec> tasks,
                                const ModelBackend& seen, const ForbidMask& mask);

BaselineResult run_baseline(const BaselineConfig& config, std::span<const TaskSpec> tasks, const ModelBackend& seen,
                            const ForbidMask& mask);

}  // namespace calsuffix
