#include "run_config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include "calsuffix/error.hpp"

namespace calsuffix::cli {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<std::string_view> keys, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError(std::string(where) + ": unknown key \"" + key + "\"");
    }
  }
}

fs::path absolute_from(const fs::path& base, const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  return path.lexically_normal();
}

MaskPolicy mask_from_json(const json& j) {
  reject_unknown(j, {"predicates", "extra_forbidden"}, "mask_policy");
  MaskPolicy m;
  for (const auto& p : j.value("predicates", json::array())) {
    const auto name = p.get<std::string>();
    if (name == "special") {
      m.forbid_special = true;
    } else if (name == "whitespace") {
      m.forbid_whitespace = true;
    } else if (name == "disallowed_chars") {
      m.forbid_disallowed_chars = true;
    } else {
      throw ConfigError("mask_policy: unknown predicate \"" + name + "\"");
    }
  }
  m.extra_forbidden = j.value("extra_forbidden", std::vector<std::string>{});
  return m;
}

json mask_to_json(const MaskPolicy& m) {
  json preds = json::array();
  if (m.forbid_special) preds.push_back("special");
  if (m.forbid_whitespace) preds.push_back("whitespace");
  if (m.forbid_disallowed_chars) preds.push_back("disallowed_chars");
  return {{"predicates", preds}, {"extra_forbidden", m.extra_forbidden}};
}

TaskSpec spec_from_json(const json& j) {
  TaskSpec spec;
  if (j.contains("bundled")) spec = bundled_task(j.at("bundled").get<std::string>());
  if (j.contains("name")) spec.name = j.at("name").get<std::string>();
  if (j.contains("labels")) spec.labels = j.at("labels").get<std::vector<std::string>>();
  if (j.contains("surfaces")) spec.surfaces = j.at("surfaces").get<std::vector<std::vector<std::string>>>();
  if (j.contains("fields")) spec.fields = j.at("fields").get<std::vector<std::string>>();
  if (j.contains("template")) spec.template_text = j.at("template").get<std::string>();
  if (j.contains("answer_prefix")) spec.answer_prefix = j.at("answer_prefix").get<std::string>();
  if (j.contains("wrapper")) spec.wrapper = parse_wrapper_style(j.at("wrapper").get<std::string>());
  return spec;
}

json spec_to_json(const TaskSpec& s) {
  return {{"name", s.name},           {"labels", s.labels},
          {"surfaces", s.surfaces},   {"fields", s.fields},
          {"template", s.template_text}, {"answer_prefix", s.answer_prefix},
          {"wrapper", std::string(to_string(s.wrapper))}};
}

}  // namespace

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base) {
  reject_unknown(j, {"seed", "output_dir", "backends", "seen_backend", "tasks", "mask_policy", "train", "baseline",
                     "eval", "fit", "artifacts"},
                 "config");
  RunConfig c;
  try {
    c.output_dir = absolute_from(base, j.value("output_dir", std::string("runs")));
    for (const auto& b : j.at("backends")) {
      reject_unknown(b, {"name", "adapter", "checkpoint", "options"}, "backends[]");
      BackendEntry e;
      e.name = b.at("name").get<std::string>();
      e.adapter = b.at("adapter").get<std::string>();
      if (b.contains("checkpoint")) e.checkpoint = absolute_from(base, b.at("checkpoint").get<std::string>());
      if (b.contains("options")) e.options = b.at("options");
      c.backends.push_back(std::move(e));
    }
    c.seen_backend = j.value("seen_backend", c.backends.empty() ? std::string() : c.backends.front().name);
    for (const auto& t : j.at("tasks")) {
      reject_unknown(t, {"bundled", "name", "labels", "surfaces", "fields", "template", "answer_prefix", "wrapper",
                         "train", "validation"},
                     "tasks[]");
      TaskEntry e;
      e.spec = spec_to_json(spec_from_json(t));
      e.train = absolute_from(base, t.at("train").get<std::string>());
      e.validation = absolute_from(base, t.at("validation").get<std::string>());
      c.tasks.push_back(std::move(e));
    }
    if (j.contains("mask_policy")) c.mask = mask_from_json(j.at("mask_policy"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("baseline")) c.baseline = BaselineConfig::from_json(j.at("baseline"));
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e, {"cap", "k_shots", "formats", "prediction_rule"}, "eval");
      c.eval.cap = e.value("cap", c.eval.cap);
      c.eval.k_shots = e.value("k_shots", c.eval.k_shots);
      if (e.contains("formats")) {
        c.eval.formats.clear();
        for (const auto& f : e.at("formats")) c.eval.formats.insert(parse_report_format(f.get<std::string>()));
      }
      const auto rule = e.value("prediction_rule", std::string("calibrated"));
      if (rule == "calibrated") {
        c.eval.rule = PredictionRule::kCalibrated;
      } else if (rule == "raw") {
        c.eval.rule = PredictionRule::kRaw;
      } else {
        throw ConfigError("eval: unknown prediction_rule \"" + rule + "\"");
      }
    }
    if (j.contains("fit")) {
      const auto& f = j.at("fit");
      reject_unknown(f, {"task", "steps", "checkpoint", "hidden", "ffn", "context_limit", "init_scale", "lr",
                         "batch_size", "accuracy_floor"},
                     "fit");
      FitEntry e;
      e.task = f.at("task").get<std::string>();
      e.steps = f.value("steps", e.steps);
      e.checkpoint = absolute_from(base, f.at("checkpoint").get<std::string>());
      e.options.hidden = f.value("hidden", e.options.hidden);
      e.options.ffn = f.value("ffn", e.options.ffn);
      e.options.context_limit = f.value("context_limit", e.options.context_limit);
      e.options.init_scale = f.value("init_scale", e.options.init_scale);
      e.options.lr = f.value("lr", e.options.lr);
      e.options.batch_size = f.value("batch_size", e.options.batch_size);
      e.options.accuracy_floor = f.value("accuracy_floor", e.options.accuracy_floor);
      c.fit = e;
    }
    for (const auto& a : j.value("artifacts", json::array())) {
      c.artifacts.push_back(absolute_from(base, a.get<std::string>()));
    }
    c.apply_seed(j.value("seed", std::uint64_t{0}));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  baseline.seed = s;
}

void RunConfig::validate() const {
  if (backends.empty()) throw ConfigError("config: at least one backend is required");
  if (tasks.empty()) throw ConfigError("config: at least one task is required");
  for (const auto& b : backends) {
    if (b.adapter == "toy_checkpoint" && !b.checkpoint) {
      throw ConfigError("backend " + b.name + ": toy_checkpoint needs a checkpoint path");
    }
    if (std::count_if(backends.begin(), backends.end(), [&](const auto& o) { return o.name == b.name; }) > 1) {
      throw ConfigError("duplicate backend name " + b.name);
    }
  }
  backend_entry(seen_backend);
  for (const auto& t : tasks) spec_from_json(t.spec).validate();
  train.validate();
  baseline.validate();
  if (eval.k_shots.empty()) throw ConfigError("eval: k_shots must not be empty");
  if (fit && std::none_of(tasks.begin(), tasks.end(),
                          [&](const auto& t) { return t.spec.at("name").template get<std::string>() == fit->task; })) {
    throw ConfigError("fit: unknown task " + fit->task);
  }
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir.string();
  j["backends"] = json::array();
  for (const auto& b : backends) {
    json e = {{"name", b.name}, {"adapter", b.adapter}, {"options", b.options}};
    if (b.checkpoint) e["checkpoint"] = b.checkpoint->string();
    j["backends"].push_back(e);
  }
  j["seen_backend"] = seen_backend;
  j["tasks"] = json::array();
  for (const auto& t : tasks) {
    json e = t.spec;
    e["train"] = t.train.string();
    e["validation"] = t.validation.string();
    j["tasks"].push_back(e);
  }
  j["mask_policy"] = mask_to_json(mask);
  j["train"] = train.to_json();
  j["baseline"] = baseline.to_json();
  json formats = json::array();
  for (auto f : eval.formats) formats.push_back(f == ReportFormat::kCsv ? "csv" : f == ReportFormat::kJson ? "json" : "md");
  j["eval"] = {{"cap", eval.cap},
               {"k_shots", eval.k_shots},
               {"formats", formats},
               {"prediction_rule", eval.rule == PredictionRule::kCalibrated ? "calibrated" : "raw"}};
  if (fit) {
    j["fit"] = {{"task", fit->task},
                {"steps", fit->steps},
                {"checkpoint", fit->checkpoint.string()},
                {"hidden", fit->options.hidden},
                {"ffn", fit->options.ffn},
                {"context_limit", fit->options.context_limit},
                {"init_scale", fit->options.init_scale},
                {"lr", fit->options.lr},
                {"batch_size", fit->options.batch_size},
                {"accuracy_floor", fit->options.accuracy_floor}};
  }
  j["artifacts"] = json::array();
  for (const auto& a : artifacts) j["artifacts"].push_back(a.string());
  return j;
}

std::vector<TaskSpec> RunConfig::load_tasks() const {
  std::vector<TaskSpec> out;
  for (const auto& t : tasks) {
    TaskSpec spec = spec_from_json(t.spec);
    spec.train = load_jsonl(t.train, spec);
    spec.validation = load_jsonl(t.validation, spec);
    out.push_back(std::move(spec));
  }
  return out;
}

const BackendEntry& RunConfig::backend_entry(const std::string& name) const {
  for (const auto& b : backends) {
    if (b.name == name) return b;
  }
  throw ConfigError("no backend named \"" + name + "\"");
}

std::unique_ptr<ModelBackend> RunConfig::make(const BackendEntry& entry) const {
  if (entry.adapter == "toy_checkpoint") {
    if (!fs::exists(*entry.checkpoint)) {
      throw ConfigError("backend " + entry.name + ": checkpoint " + entry.checkpoint->string() +
                        " does not exist (run `calsuffix fit` first)");
    }
    auto model = load_toy_checkpoint(*entry.checkpoint);
    model->set_name(entry.name);
    return model;
  }
  auto backend = make_backend(entry.adapter, entry.options);
  if (auto* toy = dynamic_cast<ToyCausalLM*>(backend.get())) toy->set_name(entry.name);
  return backend;
}

fs::path resolve_output_dir(const RunConfig& config) {
  if (const char* env = std::getenv("CALSUFFIX_OUTPUT_DIR"); env && *env) return fs::absolute(env);
  return config.output_dir;
}

}  // namespace calsuffix::cli
