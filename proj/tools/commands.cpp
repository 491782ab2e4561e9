#include "commands.hpp"

#include <fstream>

#include <fmt/format.h>

#include "calsuffix/error.hpp"
#include "calsuffix/hash.hpp"

namespace calsuffix::cli {

using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError(0, path.string() + ": " + e.what());
  }
}

fs::path prepare_output(RunConfig& config) {
  config.output_dir = resolve_output_dir(config);
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw IoError("cannot create " + config.output_dir.string() + ": " + ec.message());
  return config.output_dir;
}

// Snapshot of the fully resolved configuration next to an output.
void write_snapshot(const RunConfig& config, const fs::path& out, const std::string& stem) {
  write_text(out / (stem + ".config.json"), config.to_json().dump(2) + "\n");
}

std::string run_hash(const RunConfig& config, const json& section) {
  Fnv1a h;
  h.update(section.dump());
  h.update(config.seen_backend);
  for (const auto& t : config.tasks) h.update(t.spec.dump());
  h.update(config.to_json().at("mask_policy").dump());
  return hex_digest(h.digest());
}

ForbidMask config_mask(const RunConfig& config, const ModelBackend& seen, std::span<const TaskSpec> tasks) {
  return mixture_mask(seen.vocab(), tasks, config.mask);
}

std::vector<SuffixArtifact> load_artifacts(const std::vector<fs::path>& paths) {
  std::vector<SuffixArtifact> out;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw MissingArtifact("artifact " + p.string() + " does not exist");
    out.push_back(load_artifact(p));
  }
  return out;
}

void apply_eval_overrides(RunConfig& config, const EvalOverrides& o) {
  if (o.seed) config.apply_seed(*o.seed);
  if (!o.k_shots.empty()) config.eval.k_shots = o.k_shots;
  if (o.cap) config.eval.cap = *o.cap;
  if (!o.artifacts.empty()) {
    config.artifacts.clear();
    for (const auto& a : o.artifacts) config.artifacts.push_back(fs::absolute(a).lexically_normal());
  }
}

EvalOptions eval_options(const RunConfig& config) {
  EvalOptions opt;
  opt.seed = config.seed;
  opt.cap = config.eval.cap;
  opt.rule = config.eval.rule;
  return opt;
}

void print_written(const std::vector<fs::path>& paths) {
  for (const auto& p : paths) fmt::print("wrote {}\n", p.string());
}

}  // namespace

int cmd_train(const fs::path& config_path, const TrainOverrides& o) {
  RunConfig config = RunConfig::load(config_path);
  if (o.seed) config.apply_seed(*o.seed);
  auto& t = config.train;
  if (o.K) t.K = *o.K;
  if (o.steps) t.steps = *o.steps;
  if (o.batch_size) t.batch_size = *o.batch_size;
  if (o.warmup_steps) t.warmup_steps = *o.warmup_steps;
  if (o.checkpoint_every) t.checkpoint_every = *o.checkpoint_every;
  if (o.lr) t.lr = *o.lr;
  if (o.lambda_H) t.lambda_H = *o.lambda_H;
  if (o.lambda_F) t.lambda_F = *o.lambda_F;
  if (o.tau0) t.tau0 = *o.tau0;
  if (o.alpha) t.alpha = *o.alpha;
  if (o.tau_min) t.tau_min = *o.tau_min;
  if (o.clip_norm) t.clip_norm = *o.clip_norm;
  if (o.uncalibrated) t.calibration = *o.uncalibrated ? Calibration::kUncalibrated : Calibration::kCalibrated;
  t.validate();

  const auto tasks = config.load_tasks();
  const auto seen = config.make(config.backend_entry(config.seen_backend));
  const ForbidMask mask = config_mask(config, *seen, tasks);
  const fs::path out = prepare_output(config);
  const std::string stem = fmt::format("soft_suffix_K{}_seed{}", t.K, t.seed);

  TrainOptions opts;
  opts.checkpoint_dir = out / (stem + "_checkpoints");
  opts.config_hash = run_hash(config, t.to_json());
  if (o.resume) opts.resume_from = read_json(*o.resume);
  std::ofstream log(out / (stem + ".log.jsonl"), std::ios::binary);
  if (!log) throw IoError("cannot write training log");
  opts.on_step = [&](const TrainLogRecord& r) { log << r.to_json().dump() << '\n'; };

  write_snapshot(config, out, stem);
  const std::uint64_t theta_before = seen->parameter_hash();
  const TrainResult result = train_suffix(t, tasks, *seen, mask, opts);
  if (seen->parameter_hash() != theta_before) throw Error("backend parameters changed during training");
  save_artifact(result.artifact, out / (stem + ".json"));
  fmt::print("suffix \"{}\" ids [{}] -> {}\n", result.artifact.text, fmt::join(result.artifact.token_ids, ", "),
             (out / (stem + ".json")).string());
  return 0;
}

int cmd_baseline(const fs::path& config_path, const BaselineOverrides& o) {
  RunConfig config = RunConfig::load(config_path);
  if (o.seed) config.apply_seed(*o.seed);
  auto& b = config.baseline;
  if (o.method) b.method = parse_baseline_method(*o.method);
  if (o.K) b.K = *o.K;
  if (o.budget) b.budget = *o.budget;
  if (o.candidates) b.candidates = *o.candidates;
  if (o.uncalibrated) b.uncalibrated = *o.uncalibrated;
  b.validate();

  const auto tasks = config.load_tasks();
  const auto seen = config.make(config.backend_entry(config.seen_backend));
  const ForbidMask mask = config_mask(config, *seen, tasks);
  const fs::path out = prepare_output(config);
  const std::string stem = fmt::format("{}_K{}_seed{}", to_string(b.method), b.K, b.seed);
  write_snapshot(config, out, stem);

  BaselineResult result = run_baseline(b, tasks, *seen, mask);
  result.artifact.config_hash = run_hash(config, b.to_json());
  save_artifact(result.artifact, out / (stem + ".json"));
  fmt::print("{} suffix \"{}\" after {} iterations{} -> {}\n", to_string(b.method), result.artifact.text,
             result.iterations, result.converged ? " (converged)" : "", (out / (stem + ".json")).string());
  return 0;
}

int cmd_eval(const fs::path& config_path, const EvalOverrides& o) {
  RunConfig config = RunConfig::load(config_path);
  apply_eval_overrides(config, o);
  const auto tasks = config.load_tasks();
  const auto suffixes = load_artifacts(config.artifacts);
  const fs::path out = prepare_output(config);

  if (suffixes.empty()) {
    std::vector<EvalResult> results;
    for (const auto& entry : config.backends) {
      const auto backend = config.make(entry);
      for (const auto& task : tasks) {
        for (std::size_t k : config.eval.k_shots) {
          EvalOptions opt = eval_options(config);
          opt.k_shot = k;
          results.push_back(evaluate_task(*backend, task, nullptr, opt));
        }
      }
    }
    write_snapshot(config, out, "clean");
    print_written(emit_clean_report(results, config.eval.formats, out, "clean"));
    fmt::print("{}", clean_report_md(results));
    return 0;
  }
  const auto seen = config.make(config.backend_entry(config.seen_backend));
  const ModelBackend* backends[] = {seen.get()};
  const auto report = transfer_matrix(suffixes, backends, tasks, config.eval.k_shots, eval_options(config));
  write_snapshot(config, out, "eval");
  print_written(emit_report(report, config.eval.formats, out, "eval"));
  fmt::print("{}", report_md(report));
  return 0;
}

int cmd_transfer(const fs::path& config_path, const EvalOverrides& o) {
  RunConfig config = RunConfig::load(config_path);
  apply_eval_overrides(config, o);
  if (config.artifacts.empty()) throw ConfigError("transfer needs at least one --artifact");
  const auto tasks = config.load_tasks();
  const auto suffixes = load_artifacts(config.artifacts);
  const fs::path out = prepare_output(config);

  std::vector<std::unique_ptr<ModelBackend>> owned;
  std::vector<const ModelBackend*> backends;
  for (const auto& entry : config.backends) {
    owned.push_back(config.make(entry));
    backends.push_back(owned.back().get());
  }
  const auto report = transfer_matrix(suffixes, backends, tasks, config.eval.k_shots, eval_options(config));
  write_snapshot(config, out, "transfer");
  print_written(emit_report(report, config.eval.formats, out, "transfer"));
  fmt::print("{}", report_md(report));
  return 0;
}

int cmd_fit(const fs::path& config_path, std::optional<std::uint64_t> seed) {
  RunConfig config = RunConfig::load(config_path);
  if (seed) config.apply_seed(*seed);
  if (!config.fit) throw ConfigError("config has no fit section");
  const auto tasks = config.load_tasks();
  const TaskSpec* spec = nullptr;
  for (const auto& t : tasks) {
    if (t.name == config.fit->task) spec = &t;
  }
  if (!spec) throw ConfigError("fit: task \"" + config.fit->task + "\" is not configured");
  std::vector<Example> fixture = spec->train;
  fixture.insert(fixture.end(), spec->validation.begin(), spec->validation.end());
  if (spec->train.size() != spec->validation.size()) {
    throw ConfigError("fit: train and validation splits must have equal size");
  }
  auto model = fit_toy_backend(fixture, *spec, config.fit->steps, config.seed, toy_vocabulary(), config.fit->options);
  const fs::path ckpt = config.fit->checkpoint;
  std::error_code ec;
  fs::create_directories(ckpt.parent_path(), ec);
  save_toy_checkpoint(*model, ckpt);
  write_text(fs::path(ckpt).replace_extension(".config.json"), config.to_json().dump(2) + "\n");
  fmt::print("fitted {} on {}: validation accuracy {:.3f} -> {}\n", model->name(), spec->name,
             task_accuracy(*model, *spec, spec->validation), ckpt.string());
  return 0;
}

int cmd_fixtures(const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());
  const TaskSpec specs[] = {sentiment_fixture(), topic_fixture()};
  const char* stems[] = {"sentiment", "topic"};
  for (std::size_t i = 0; i < 2; ++i) {
    save_jsonl(specs[i].train, specs[i], out_dir / (std::string(stems[i]) + "_train.jsonl"));
    save_jsonl(specs[i].validation, specs[i], out_dir / (std::string(stems[i]) + "_validation.jsonl"));
  }
  fmt::print("wrote toy fixtures to {}\n", out_dir.string());
  return 0;
}

}  // namespace calsuffix::cli
