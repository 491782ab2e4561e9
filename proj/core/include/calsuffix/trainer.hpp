#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "calsuffix/artifact.hpp"
#include "calsuffix/objective.hpp"
#include "calsuffix/suffix.hpp"

namespace calsuffix {

struct TrainConfig {
  std::size_t K = 4;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double lr = 5e-2;
  std::size_t warmup_steps = 50;
  double lambda_H = 0.01;
  double lambda_F = 0.0;
  double tau0 = 1.0;
  double alpha = 0.999;
  double tau_min = 0.9;
  double clip_norm = 1.0;
  double init_stddev = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::size_t max_consecutive_guards = 10;
  Calibration calibration = Calibration::kCalibrated;

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Linear warmup to lr at step == warmup_steps, cosine decay to 0 at step == steps.
double lr_at_step(std::size_t step, const TrainConfig& config);

struct GuardStats {
  std::size_t tripped = 0;
};

// Rescales to clip_norm when the global L2 norm exceeds it. A non-finite
// entry zeroes the whole gradient, bumps the counter and returns true.
bool clip_and_guard(Matrix& gradient, double clip_norm, GuardStats& stats);

struct FullLoss {
  double loss = 0.0;  // minimized: −mean CalCE − λ_H·H + λ_F·F
  double mean_calce = 0.0;
  double entropy = 0.0;
  double fluency = 0.0;
  Matrix grad;  // ∂loss/∂W, K×V
  Matrix P;
  HardSuffix hard;
};

// Loss and gradient for one minibatch under a fixed Gumbel draw.
FullLoss compute_full_loss(HarmObjective& objective, std::span<const TaskExample> batch, const SuffixLogits& logits,
                           const ForbidMask& mask, const Matrix& noise, double tau, const TrainConfig& config);

// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW(Eigen::Index rows, Eigen::Index cols, double beta1, double beta2, double eps, double weight_decay);
  void step(Matrix& params, const Matrix& grad, double lr);
  std::size_t steps_taken() const { return t_; }
  nlohmann::json to_json() const;
  void load_json(const nlohmann::json& j);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  Matrix m_, v_;
};

struct TrainLogRecord {
  std::size_t step = 0;
  bool guarded = false;
  double loss = 0.0;
  double mean_calce = 0.0;
  double entropy = 0.0;
  double fluency = 0.0;
  double tau = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // after clipping
  std::size_t guard_count = 0;
  double forbidden_mass = 0.0;  // Σ P over masked columns

  // Guarded steps omit the loss terms rather than logging non-finite values.
  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<nlohmann::json> resume_from;
  std::function<void(const TrainLogRecord&)> on_step;
  // Stop after this step (checkpointing first); for resume tests.
  std::optional<std::size_t> stop_after;
  std::string config_hash;
};

struct TrainResult {
  SuffixArtifact artifact;
  SuffixLogits logits;
  std::vector<TrainLogRecord> log;
  std::size_t guard_count = 0;
  nlohmann::json last_checkpoint;
};

TrainResult train_suffix(const TrainConfig& config, std::span<const TaskSpec> tasks, const ModelBackend& seen,
                         const ForbidMask& mask, const TrainOptions& options = {});

// The forbid mask over the union of every task's surfaces.
ForbidMask mixture_mask(const Vocabulary& vocab, std::span<const TaskSpec> tasks, const MaskPolicy& policy);

std::string rng_to_string(const std::mt19937_64& rng);
std::mt19937_64 rng_from_string(const std::string& s);

}  // namespace calsuffix
