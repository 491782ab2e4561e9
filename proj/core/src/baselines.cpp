#include "calsuffix/baselines.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "calsuffix/error.hpp"
#include "calsuffix/hash.hpp"

namespace calsuffix {

using nlohmann::json;

std::string_view to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::kUat:
      return "uat";
    case BaselineMethod::kAutoPrompt:
      return "autoprompt";
    case BaselineMethod::kSoftPrompt:
      return "softprompt";
  }
  return "uat";
}

BaselineMethod parse_baseline_method(std::string_view name) {
  if (name == "uat") return BaselineMethod::kUat;
  if (name == "autoprompt") return BaselineMethod::kAutoPrompt;
  if (name == "softprompt") return BaselineMethod::kSoftPrompt;
  throw ConfigError("unknown baseline method \"" + std::string(name) + "\"");
}

void BaselineConfig::validate() const {
  if (K < 1) throw ConfigError("baseline config: K must be at least 1");
  if (candidates < 1) throw ConfigError("baseline config: candidates must be at least 1");
  if (objective_examples < 1) throw ConfigError("baseline config: objective_examples must be at least 1");
  if (method == BaselineMethod::kSoftPrompt) {
    TrainConfig opt = optimizer;
    opt.K = K;
    opt.steps = std::max<std::size_t>(budget, 1);
    opt.warmup_steps = std::min(opt.warmup_steps, opt.steps);
    opt.validate();
  }
}

json BaselineConfig::to_json() const {
  return {{"method", std::string(to_string(method))},
          {"K", K},
          {"budget", budget},
          {"candidates", candidates},
          {"objective_examples", objective_examples},
          {"uncalibrated", uncalibrated},
          {"seed", seed},
          {"optimizer", optimizer.to_json()}};
}

BaselineConfig BaselineConfig::from_json(const json& j) {
  static const std::vector<std::string> keys = {"method",  "K",           "budget", "candidates", "objective_examples",
                                                "uncalibrated", "seed", "optimizer"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError("baseline config: unknown key \"" + key + "\"");
    }
  }
  BaselineConfig c;
  try {
    if (j.contains("method")) c.method = parse_baseline_method(j.at("method").get<std::string>());
    c.K = j.value("K", c.K);
    c.budget = j.value("budget", c.budget);
    c.candidates = j.value("candidates", c.candidates);
    c.objective_examples = j.value("objective_examples", c.objective_examples);
    c.uncalibrated = j.value("uncalibrated", c.uncalibrated);
    c.seed = j.value("seed", c.seed);
    if (j.contains("optimizer")) c.optimizer = TrainConfig::from_json(j.at("optimizer"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("baseline config: ") + e.what());
  }
  return c;
}

TokenId most_frequent_allowed_token(std::span<const TaskSpec> tasks, const Vocabulary& vocab, const ForbidMask& mask) {
  std::vector<std::size_t> counts(vocab.size(), 0);
  for (const auto& task : tasks) {
    for (const auto& ex : task.train) {
      for (TokenId id : render_prompt(ex, task, {}, vocab).ids) ++counts[static_cast<std::size_t>(id)];
    }
  }
  TokenId best = -1;
  for (std::size_t v = 0; v < counts.size(); ++v) {
    const auto id = static_cast<TokenId>(v);
    if (mask.forbidden(id)) continue;
    if (best < 0 || counts[v] > counts[static_cast<std::size_t>(best)]) best = id;
  }
  if (best < 0) throw AllForbidden();
  return best;
}

Matrix first_order_scores(const Matrix& span_grad, const Matrix& E, std::span<const TokenId> current) {
  Matrix scores = span_grad * E.transpose();
  for (Eigen::Index k = 0; k < scores.rows(); ++k) {
    const double base = span_grad.row(k).dot(E.row(current[static_cast<std::size_t>(k)]));
    scores.row(k).array() -= base;
  }
  return scores;
}

TokenId project_to_token(const RowVector& vec, const Matrix& E, const ForbidMask& mask) {
  TokenId best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index v = 0; v < E.rows(); ++v) {
    if (mask.forbidden(static_cast<TokenId>(v))) continue;
    const double d = (E.row(v) - vec).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<TokenId>(v);
    }
  }
  if (best < 0) throw AllForbidden();
  return best;
}

namespace {

struct DiscreteSetup {
  HarmObjective objective;
  std::vector<TaskExample> batch;
  TokenIds current;
};

Matrix embed_ids(const Matrix& E, std::span<const TokenId> ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), E.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = E.row(ids[k]);
  return out;
}

// Top-n allowed candidates at position k by first-order score, excluding the
// current token. Ties by lower id.
std::vector<TokenId> top_candidates(const Matrix& scores, Eigen::Index k, TokenId current, const ForbidMask& mask,
                                    std::size_t n) {
  std::vector<TokenId> ids;
  for (Eigen::Index v = 0; v < scores.cols(); ++v) {
    const auto id = static_cast<TokenId>(v);
    if (!mask.forbidden(id) && id != current) ids.push_back(id);
  }
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return scores(k, a) > scores(k, b); });
  if (ids.size() > n) ids.resize(n);
  return ids;
}

SuffixArtifact discrete_artifact(std::string method, const TokenIds& ids, const ModelBackend& seen,
                                 const ForbidMask& mask, const BaselineConfig& config) {
  SuffixArtifact a;
  a.method = std::move(method);
  a.K = ids.size();
  a.token_ids = ids;
  a.text = seen.vocab().detokenize(ids);
  a.seen_model = seen.name();
  a.vocab_hash = hex_digest(seen.vocab().fingerprint());
  a.mask_hash = hex_digest(mask.fingerprint());
  a.seed = config.seed;
  return a;
}


TokenIds initial_suffix(std::span<const TaskSpec> tasks, const ModelBackend& seen, const ForbidMask& mask,
                        const BaselineConfig& config, const std::optional<TokenIds>& init) {
  if (init) {
    if (init->size() != config.K) throw ConfigError("initial suffix length differs from K");
    for (TokenId id : *init) {
      if (mask.forbidden(id)) throw ConfigError("initial suffix contains a forbidden token");
    }
    return *init;
  }
  return TokenIds(config.K, most_frequent_allowed_token(tasks, seen.vocab(), mask));
}

Calibration calibration_of(const BaselineConfig& c) {
  return c.uncalibrated ? Calibration::kUncalibrated : Calibration::kCalibrated;
}

json discrete_metrics(const BaselineResult& r, const BaselineConfig& config) {
  return {{"trajectory", r.trajectory},
          {"converged", r.converged},
          {"iterations", r.iterations},
          {"final_objective", r.trajectory.empty() ? 0.0 : r.trajectory.back()},
          {"config", config.to_json()}};
}

}  // namespace

BaselineResult uat_train(const BaselineConfig& config, std::span<const TaskSpec> tasks, const ModelBackend& seen,
                         const ForbidMask& mask, std::optional<TokenIds> init) {
  config.validate();
  if (mask.num_allowed() == 0) throw AllForbidden();
  const Matrix& E = seen.embeddings();
  HarmObjective objective(seen, tasks, calibration_of(config));
  const auto batch = baseline_objective_batch(tasks, config);
  TokenIds current = initial_suffix(tasks, seen, mask, config, init);

  BaselineResult r;
  double value = objective.mean_calce(batch, current);
  r.trajectory.push_back(value);
  for (std::size_t round = 0; round < config.budget; ++round) {
    ++r.iterations;
    const auto vg = objective.mean_calce_grad(batch, embed_ids(E, current));
    const Matrix scores = first_order_scores(vg.span, E, current);

    double best_value = value;
    std::optional<std::pair<std::size_t, TokenId>> best_swap;
    for (std::size_t k = 0; k < config.K; ++k) {
      for (TokenId cand : top_candidates(scores, static_cast<Eigen::Index>(k), current[k], mask, config.candidates)) {
        TokenIds trial = current;
        trial[k] = cand;
        const double v = objective.mean_calce(batch, trial);
        if (v > best_value) {
          best_value = v;
          best_swap = {k, cand};
        }
      }
    }
    if (!best_swap) {
      r.converged = true;
      break;
    }
    current[best_swap->first] = best_swap->second;
    value = best_value;
    r.trajectory.push_back(value);
  }
  r.artifact = discrete_artifact("uat", current, seen, mask, config);
  r.artifact.metrics = discrete_metrics(r, config);
  return r;
}

BaselineResult autoprompt_train(const BaselineConfig& config, std::span<const TaskSpec> tasks,
                                const ModelBackend& seen, const ForbidMask& mask, std::optional<TokenIds> init) {
  config.validate();
  if (mask.num_allowed() == 0) throw AllForbidden();
  const Matrix& E = seen.embeddings();
  HarmObjective objective(seen, tasks, calibration_of(config));
  const auto batch = baseline_objective_batch(tasks, config);
  TokenIds current = initial_suffix(tasks, seen, mask, config, init);

  BaselineResult r;
  double value = objective.mean_calce(batch, current);
  r.trajectory.push_back(value);
  bool changed_this_cycle = false;
  for (std::size_t visit = 0; visit < config.budget; ++visit) {
    ++r.iterations;
    const std::size_t k = visit % config.K;
    if (k == 0) changed_this_cycle = false;

    const auto vg = objective.mean_calce_grad(batch, embed_ids(E, current));
    const Matrix scores = first_order_scores(vg.span, E, current);
    TokenId keep = current[k];
    double keep_value = value;
    for (TokenId cand : top_candidates(scores, static_cast<Eigen::Index>(k), current[k], mask, config.candidates)) {
      TokenIds trial = current;
      trial[k] = cand;
      const double v = objective.mean_calce(batch, trial);
      if (v > keep_value) {
        keep_value = v;
        keep = cand;
      }
    }
    if (keep != current[k]) {
      current[k] = keep;
      value = keep_value;
      changed_this_cycle = true;
      r.trajectory.push_back(value);
    }
    if (k + 1 == config.K && !changed_this_cycle) {
      r.converged = true;
      break;
    }
  }
  r.artifact = discrete_artifact("autoprompt", current, seen, mask, config);
  r.artifact.metrics = discrete_metrics(r, config);
  return r;
}

BaselineResult softprompt_train(const BaselineConfig& config, std::span<const TaskSpec> tasks,
                                const ModelBackend& seen, const ForbidMask& mask) {
  config.validate();
  if (mask.num_allowed() == 0) throw AllForbidden();
  const Matrix& E = seen.embeddings();
  HarmObjective objective(seen, tasks, calibration_of(config));
  const auto eval_batch = baseline_objective_batch(tasks, config);

  TrainConfig opt_cfg = config.optimizer;
  opt_cfg.K = config.K;
  opt_cfg.steps = std::max<std::size_t>(config.budget, 1);
  opt_cfg.warmup_steps = std::min(opt_cfg.warmup_steps, opt_cfg.steps);
  opt_cfg.seed = config.seed;

  const TokenId init = most_frequent_allowed_token(tasks, seen.vocab(), mask);
  Matrix vectors = embed_ids(E, TokenIds(config.K, init));
  AdamW adam(vectors.rows(), vectors.cols(), opt_cfg.beta1, opt_cfg.beta2, opt_cfg.adam_eps, opt_cfg.weight_decay);
  std::mt19937_64 sampler(config.seed ^ 0x9e3779b97f4a7c15ULL);
  GuardStats guards;

  BaselineResult r;
  for (std::size_t step = 1; step <= config.budget; ++step) {
    ++r.iterations;
    const auto batch = sample_minibatch(tasks, opt_cfg.batch_size, sampler);
    const auto vg = objective.mean_calce_grad(batch, vectors);
    Matrix grad = -vg.span;
    if (!vg.finite) grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    if (!clip_and_guard(grad, opt_cfg.clip_norm, guards)) {
      adam.step(vectors, grad, lr_at_step(step, opt_cfg));
      r.trajectory.push_back(vg.value);
    }
  }

  TokenIds ids;
  for (Eigen::Index k = 0; k < vectors.rows(); ++k) ids.push_back(project_to_token(vectors.row(k), E, mask));
  r.soft_objective = objective.mean_calce(eval_batch, vectors);
  r.projected_objective = objective.mean_calce(eval_batch, ids);
  r.converged = true;

  r.artifact = discrete_artifact("softprompt", ids, seen, mask, config);
  r.artifact.soft_embeddings = vectors;
  r.artifact.metrics = {{"soft_objective", r.soft_objective},
                        {"projected_objective", r.projected_objective},
                        {"projection_gap", r.soft_objective - r.projected_objective},
                        {"iterations", r.iterations},
                        {"guard_count", guards.tripped},
                        {"config", config.to_json()}};
  return r;
}

BaselineResult run_baseline(const BaselineConfig& config, std::span<const TaskSpec> tasks, const ModelBackend& seen,
                            const ForbidMask& mask) {
  switch (config.method) {
    case BaselineMethod::kUat:
      return uat_train(config, tasks, seen, mask);
    case BaselineMethod::kAutoPrompt:
      return autoprompt_train(config, tasks, seen, mask);
    case BaselineMethod::kSoftPrompt:
      return softprompt_train(config, tasks, seen, mask);
  }
  throw ConfigError("unknown baseline method");
}

std::vector<TaskExample> baseline_objective_batch(std::span<const TaskSpec> tasks, const BaselineConfig& config) {
  std::mt19937_64 rng(config.seed);
  return sample_minibatch(tasks, config.objective_examples, rng);
}

}  // namespace calsuffix
