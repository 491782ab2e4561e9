#include "calsuffix/trainer.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <fstream>
#include <numbers>
#include <sstream>

#include "calsuffix/error.hpp"
#include "calsuffix/hash.hpp"

namespace calsuffix {

using nlohmann::json;

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("train config: ") + what);
  };
  require(K >= 1, "K must be at least 1");
  require(steps >= 1, "steps must be at least 1");
  require(batch_size >= 1, "batch_size must be at least 1");
  require(lr > 0.0, "lr must be positive");
  require(warmup_steps <= steps, "warmup_steps must not exceed steps");
  require(lambda_H >= 0.0 && lambda_F >= 0.0, "regularizer weights must be non-negative");
  require(tau0 > 0.0 && tau_min > 0.0, "temperatures must be positive");
  require(tau_min <= tau0, "tau_min must not exceed tau0");
  require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
  require(clip_norm > 0.0, "clip_norm must be positive");
  require(init_stddev >= 0.0, "init_stddev must be non-negative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(max_consecutive_guards >= 1, "max_consecutive_guards must be at least 1");
}

json TrainConfig::to_json() const {
  return {{"K", K},
          {"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"warmup_steps", warmup_steps},
          {"lambda_H", lambda_H},
          {"lambda_F", lambda_F},
          {"tau0", tau0},
          {"alpha", alpha},
          {"tau_min", tau_min},
          {"clip_norm", clip_norm},
          {"init_stddev", init_stddev},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay},
          {"seed", seed},
          {"checkpoint_every", checkpoint_every},
          {"max_consecutive_guards", max_consecutive_guards},
          {"calibrated", calibration == Calibration::kCalibrated}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  const json defaults = c.to_json();
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("train config: unknown key \"" + key + "\"");
  }
  try {
    c.K = j.value("K", c.K);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.lambda_H = j.value("lambda_H", c.lambda_H);
    c.lambda_F = j.value("lambda_F", c.lambda_F);
    c.tau0 = j.value("tau0", c.tau0);
    c.alpha = j.value("alpha", c.alpha);
    c.tau_min = j.value("tau_min", c.tau_min);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.init_stddev = j.value("init_stddev", c.init_stddev);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.max_consecutive_guards = j.value("max_consecutive_guards", c.max_consecutive_guards);
    c.calibration = j.value("calibrated", true) ? Calibration::kCalibrated : Calibration::kUncalibrated;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

double lr_at_step(std::size_t step, const TrainConfig& config) {
  if (step <= config.warmup_steps) {
    if (config.warmup_steps == 0) return config.lr;
    return config.lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  const double progress = static_cast<double>(step - config.warmup_steps) /
                          static_cast<double>(config.steps - config.warmup_steps);
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

bool clip_and_guard(Matrix& gradient, double clip_norm, GuardStats& stats) {
  if (!gradient.allFinite()) {
    gradient.setZero();
    ++stats.tripped;
    return true;
  }
  const double norm = gradient.norm();
  if (norm > clip_norm) gradient *= clip_norm / norm;
  return false;
}

FullLoss compute_full_loss(HarmObjective& objective, std::span<const TaskExample> batch, const SuffixLogits& logits,
                           const ForbidMask& mask, const Matrix& noise, double tau, const TrainConfig& config) {
  const auto& backend = objective.backend();
  const Matrix& E = backend.embeddings();

  FullLoss out;
  const Matrix masked = mask_logits(logits, mask);
  out.P = gumbel_softmax(masked, noise, tau);
  const Matrix delta = soft_embed(out.P, E);

  const auto calce = objective.mean_calce_grad(batch, delta);
  out.mean_calce = calce.value;
  out.entropy = entropy_bonus(out.P);

  // ∂loss/∂P, harm term first (maximizing CalCE = minimizing its negation).
  Matrix dP = -(calce.span * E.transpose());
  dP -= config.lambda_H * entropy_bonus_grad(out.P);

  out.hard = hard_decode(logits, mask, backend.vocab());
  if (config.lambda_F > 0.0) {
    out.fluency = fluency_penalty(backend, out.hard.ids);
    dP += config.lambda_F * fluency_penalty_st_grad(backend, out.hard.ids);
  }

  out.loss = -out.mean_calce - config.lambda_H * out.entropy + config.lambda_F * out.fluency;
  out.grad = gumbel_softmax_backward(out.P, dP, tau);
  // Masked columns carry no gradient; make that exact.
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (mask.forbidden(static_cast<TokenId>(v))) out.grad.col(static_cast<Eigen::Index>(v)).setZero();
  }
  if (!calce.finite) out.grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  return out;
}

AdamW::AdamW(Eigen::Index rows, Eigen::Index cols, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay),
      m_(Matrix::Zero(rows, cols)),
      v_(Matrix::Zero(rows, cols)) {}

void AdamW::step(Matrix& params, const Matrix& grad, double lr) {
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto update = (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  params.array() -= lr * (update + weight_decay_ * params.array());
}

json AdamW::to_json() const { return {{"t", t_}, {"m", matrix_to_json(m_)}, {"v", matrix_to_json(v_)}}; }

void AdamW::load_json(const json& j) {
  t_ = j.at("t").get<std::size_t>();
  m_ = matrix_from_json_rows(j.at("m"));
  v_ = matrix_from_json_rows(j.at("v"));
}

json TrainLogRecord::to_json() const {
  json j = {{"step", step}, {"guarded", guarded}, {"tau", tau}, {"lr", lr},
            {"grad_norm", grad_norm}, {"guard_count", guard_count}};
  if (!guarded) {
    j["loss"] = loss;
    j["mean_calce"] = mean_calce;
    j["entropy"] = entropy;
    j["fluency"] = fluency;
    j["forbidden_mass"] = forbidden_mass;
  }
  return j;
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
  std::istringstream is(s);
  std::mt19937_64 rng;
  is >> rng;
  if (!is) throw ConfigError("corrupt generator state in checkpoint");
  return rng;
}

ForbidMask mixture_mask(const Vocabulary& vocab, std::span<const TaskSpec> tasks, const MaskPolicy& policy) {
  std::vector<LabelSurfaceMap> maps;
  for (const auto& t : tasks) maps.push_back(t.surface_map(vocab));
  return build_forbid_mask(vocab, maps, policy);
}

namespace {

constexpr int kTrainCheckpointVersion = 1;

struct LoopState {
  std::size_t step = 0;  // last completed step
  SuffixLogits logits;
  RelaxationState relax;
  std::mt19937_64 sampler;
  GuardStats guards;
  std::size_t consecutive_guards = 0;
  double loss_sum = 0.0;
  double calce_sum = 0.0;
  std::size_t finite_steps = 0;
};

json checkpoint_json(const LoopState& s, const AdamW& opt, const ForbidMask& mask, const Vocabulary& vocab,
                     const std::string& config_hash) {
  const auto preview = hard_decode(s.logits, mask, vocab);
  return {{"format", "calsuffix.train_checkpoint"},
          {"version", kTrainCheckpointVersion},
          {"step", s.step},
          {"config_hash", config_hash},
          {"W", matrix_to_json(s.logits.W)},
          {"optimizer", opt.to_json()},
          {"relaxation",
           {{"tau", s.relax.tau}, {"tau_min", s.relax.tau_min}, {"alpha", s.relax.alpha},
            {"rng", rng_to_string(s.relax.rng)}}},
          {"sampler_rng", rng_to_string(s.sampler)},
          {"guard_count", s.guards.tripped},
          {"consecutive_guards", s.consecutive_guards},
          {"running", {{"loss_sum", s.loss_sum}, {"calce_sum", s.calce_sum}, {"finite_steps", s.finite_steps}}},
          {"preview", {{"ids", preview.ids}, {"text", preview.text}}}};
}

void restore(const json& j, LoopState& s, AdamW& opt) {
  if (j.value("format", "") != "calsuffix.train_checkpoint" || j.value("version", 0) != kTrainCheckpointVersion) {
    throw ConfigError("not a training checkpoint");
  }
  s.step = j.at("step").get<std::size_t>();
  s.logits.W = matrix_from_json_rows(j.at("W"));
  opt.load_json(j.at("optimizer"));
  const auto& r = j.at("relaxation");
  s.relax.tau = r.at("tau").get<double>();
  s.relax.tau_min = r.at("tau_min").get<double>();
  s.relax.alpha = r.at("alpha").get<double>();
  s.relax.rng = rng_from_string(r.at("rng").get<std::string>());
  s.sampler = rng_from_string(j.at("sampler_rng").get<std::string>());
  s.guards.tripped = j.at("guard_count").get<std::size_t>();
  s.consecutive_guards = j.at("consecutive_guards").get<std::size_t>();
  const auto& run = j.at("running");
  s.loss_sum = run.at("loss_sum").get<double>();
  s.calce_sum = run.at("calce_sum").get<double>();
  s.finite_steps = run.at("finite_steps").get<std::size_t>();
}

void write_checkpoint(const std::filesystem::path& dir, const json& ckpt) {
  std::filesystem::create_directories(dir);
  const auto path = dir / ("checkpoint_" + std::to_string(ckpt.at("step").get<std::size_t>()) + ".json");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << ckpt.dump() << '\n';
}

}  // namespace

TrainResult train_suffix(const TrainConfig& config, std::span<const TaskSpec> tasks, const ModelBackend& seen,
                         const ForbidMask& mask, const TrainOptions& options) {
  config.validate();
  if (tasks.empty()) throw ConfigError("training needs at least one task");
  if (mask.size() != seen.vocab().size()) throw ConfigError("forbid mask length differs from vocabulary size");
  if (mask.num_allowed() == 0) throw AllForbidden();

  const auto V = seen.vocab().size();
  HarmObjective objective(seen, tasks, config.calibration);

  // Independent streams: W init, Gumbel noise, minibatch sampling.
  std::seed_seq seq{config.seed, std::uint64_t{0x5eed}};
  std::array<std::uint64_t, 3> seeds{};
  seq.generate(seeds.begin(), seeds.end());

  LoopState s;
  std::mt19937_64 init_rng(seeds[0]);
  s.logits = SuffixLogits::gaussian(config.K, V, config.init_stddev, init_rng);
  s.relax = {config.tau0, config.tau_min, config.alpha, std::mt19937_64(seeds[1])};
  s.sampler = std::mt19937_64(seeds[2]);
  AdamW opt(s.logits.W.rows(), s.logits.W.cols(), config.beta1, config.beta2, config.adam_eps, config.weight_decay);
  if (options.resume_from) restore(*options.resume_from, s, opt);
  if (static_cast<std::size_t>(s.logits.W.rows()) != config.K || static_cast<std::size_t>(s.logits.W.cols()) != V) {
    throw ConfigError("checkpoint W shape does not match K × V");
  }

  TrainResult result;
  json last_good = checkpoint_json(s, opt, mask, seen.vocab(), options.config_hash);

  for (std::size_t step = s.step + 1; step <= config.steps; ++step) {
    const auto batch = sample_minibatch(tasks, config.batch_size, s.sampler);
    const Matrix noise = sample_gumbel(config.K, V, s.relax.rng);
    FullLoss fl = compute_full_loss(objective, batch, s.logits, mask, noise, s.relax.tau, config);

    TrainLogRecord rec;
    rec.step = step;
    rec.tau = s.relax.tau;
    rec.lr = lr_at_step(step, config);
    Matrix grad = std::move(fl.grad);
    bool guarded = clip_and_guard(grad, config.clip_norm, s.guards);
    if (!guarded && !std::isfinite(fl.loss)) {
      grad.setZero();
      ++s.guards.tripped;
      guarded = true;
    }
    rec.guarded = guarded;
    if (!guarded) {
      opt.step(s.logits.W, grad, rec.lr);
      s.consecutive_guards = 0;
      rec.loss = fl.loss;
      rec.mean_calce = fl.mean_calce;
      rec.entropy = fl.entropy;
      rec.fluency = fl.fluency;
      rec.grad_norm = grad.norm();
      for (std::size_t v = 0; v < mask.size(); ++v) {
        if (mask.forbidden(static_cast<TokenId>(v))) rec.forbidden_mass += fl.P.col(static_cast<Eigen::Index>(v)).sum();
      }
      s.loss_sum += fl.loss;
      s.calce_sum += fl.mean_calce;
      ++s.finite_steps;
    } else {
      ++s.consecutive_guards;
    }
    rec.guard_count = s.guards.tripped;

    anneal_in_place(s.relax);
    s.step = step;

    if (options.on_step) options.on_step(rec);
    result.log.push_back(rec);

    if (s.consecutive_guards >= config.max_consecutive_guards) {
      if (options.checkpoint_dir) write_checkpoint(*options.checkpoint_dir, last_good);
      throw NonFiniteLoss("aborting after " + std::to_string(s.consecutive_guards) +
                          " consecutive non-finite steps; last good step " +
                          std::to_string(last_good.at("step").get<std::size_t>()));
    }
    if (!guarded) last_good = checkpoint_json(s, opt, mask, seen.vocab(), options.config_hash);

    const bool periodic = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
    const bool stopping = options.stop_after && step == *options.stop_after;
    if ((periodic || stopping) && options.checkpoint_dir) {
      write_checkpoint(*options.checkpoint_dir, checkpoint_json(s, opt, mask, seen.vocab(), options.config_hash));
    }
    if (stopping) break;
  }

  result.last_checkpoint = checkpoint_json(s, opt, mask, seen.vocab(), options.config_hash);
  result.guard_count = s.guards.tripped;
  result.logits = s.logits;

  const auto hard = hard_decode(s.logits, mask, seen.vocab());
  auto& a = result.artifact;
  a.method = "soft_suffix";
  a.K = config.K;
  a.token_ids = hard.ids;
  a.text = hard.text;
  a.logits = s.logits.W;
  a.seen_model = seen.name();
  a.vocab_hash = hex_digest(seen.vocab().fingerprint());
  a.mask_hash = hex_digest(mask.fingerprint());
  a.config_hash = options.config_hash;
  a.seed = config.seed;
  a.schedule = {{"tau", s.relax.tau}, {"tau_min", s.relax.tau_min}, {"alpha", s.relax.alpha}};
  a.metrics = {{"steps", s.step},
               {"guard_count", s.guards.tripped},
               {"mean_loss", s.finite_steps ? s.loss_sum / static_cast<double>(s.finite_steps) : 0.0},
               {"mean_batch_calce", s.finite_steps ? s.calce_sum / static_cast<double>(s.finite_steps) : 0.0}};
  return result;
}

}  // namespace calsuffix
