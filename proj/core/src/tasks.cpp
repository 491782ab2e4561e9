#include "calsuffix/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "calsuffix/error.hpp"

namespace calsuffix {

std::string_view to_string(WrapperStyle style) {
  switch (style) {
    case WrapperStyle::kChatML:
      return "chatml";
    case WrapperStyle::kAlpaca:
      return "alpaca";
    case WrapperStyle::kRaw:
      return "raw";
  }
  return "raw";
}

WrapperStyle parse_wrapper_style(std::string_view name) {
  if (name == "chatml") return WrapperStyle::kChatML;
  if (name == "alpaca") return WrapperStyle::kAlpaca;
  if (name == "raw") return WrapperStyle::kRaw;
  throw ConfigError("unknown wrapper style \"" + std::string(name) + "\"");
}

std::size_t TaskSpec::label_index(std::string_view label) const {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) return i;
  }
  throw ConfigError("task " + name + " has no label \"" + std::string(label) + "\"");
}

LabelSurfaceMap TaskSpec::surface_map(const Vocabulary& vocab) const {
  return LabelSurfaceMap::build(vocab, labels, surfaces);
}

namespace {

// Splits a template into literal text and {field} references.
std::vector<std::pair<bool, std::string>> parse_template(const std::string& text) {
  std::vector<std::pair<bool, std::string>> parts;
  std::string literal;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '{') {
      const auto close = text.find('}', i);
      if (close == std::string::npos) throw ConfigError("unterminated placeholder in template");
      if (!literal.empty()) parts.emplace_back(false, std::exchange(literal, {}));
      parts.emplace_back(true, text.substr(i + 1, close - i - 1));
      i = close;
    } else {
      literal.push_back(text[i]);
    }
  }
  if (!literal.empty()) parts.emplace_back(false, literal);
  return parts;
}

}  // namespace

void TaskSpec::validate() const {
  if (name.empty()) throw ConfigError("task name must not be empty");
  if (answer_prefix.empty()) throw ConfigError("task " + name + ": answer prefix must not be empty");
  if (labels.size() < 2) throw ConfigError("task " + name + ": need at least two labels");
  if (labels.size() != surfaces.size()) {
    throw ConfigError("task " + name + ": surfaces must be given for every label");
  }
  for (std::size_t y = 0; y < labels.size(); ++y) {
    if (surfaces[y].empty()) throw ConfigError("task " + name + ": label " + labels[y] + " has no surface");
  }
  const std::set<std::string> declared(fields.begin(), fields.end());
  for (const auto& [is_field, text] : parse_template(template_text)) {
    if (is_field && !declared.contains(text)) {
      throw ConfigError("task " + name + ": template references undeclared field \"" + text + "\"");
    }
  }
}

std::vector<Example> parse_jsonl(std::istream& in, const TaskSpec& schema) {
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(lineno, e.what());
    }
    if (!obj.is_object()) throw SchemaError(lineno, "expected a JSON object");
    Example ex;
    ex.task_id = schema.name;
    for (const auto& field : schema.fields) {
      auto it = obj.find(field);
      if (it == obj.end() || !it->is_string()) {
        throw SchemaError(lineno, "missing string field \"" + field + "\"");
      }
      ex.fields[field] = it->get<std::string>();
    }
    auto label = obj.find("label");
    if (label == obj.end()) throw SchemaError(lineno, "missing field \"label\"");
    if (label->is_string()) {
      const auto& name = label->get_ref<const std::string&>();
      auto pos = std::find(schema.labels.begin(), schema.labels.end(), name);
      if (pos == schema.labels.end()) throw SchemaError(lineno, "label \"" + name + "\" not in label set");
      ex.label = static_cast<std::size_t>(pos - schema.labels.begin());
    } else if (label->is_number_integer()) {
      const auto idx = label->get<long long>();
      if (idx < 0 || static_cast<std::size_t>(idx) >= schema.labels.size()) {
        throw SchemaError(lineno, "label index " + std::to_string(idx) + " out of range");
      }
      ex.label = static_cast<std::size_t>(idx);
    } else {
      throw SchemaError(lineno, "label must be a string or integer");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Example> load_jsonl(const std::filesystem::path& path, const TaskSpec& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  return parse_jsonl(in, schema);
}

std::string render_template(const TaskSpec& spec, const Example& example) {
  std::string out;
  for (const auto& [is_field, text] : parse_template(spec.template_text)) {
    if (!is_field) {
      out += text;
      continue;
    }
    auto it = example.fields.find(text);
    if (it == example.fields.end()) throw ConfigError("example lacks field \"" + text + "\"");
    out += it->second;
  }
  return out;
}

std::string wrap(WrapperStyle style, const std::string& content) {
  switch (style) {
    case WrapperStyle::kChatML:
      return "<|im_start|>user\n" + content + "<|im_end|>\n<|im_start|>assistant\n";
    case WrapperStyle::kAlpaca:
      return "### Instruction:\n" + content + "\n\n### Response:\n";
    case WrapperStyle::kRaw:
      return content;
  }
  return content;
}

WrappedPrompt render_prompt(const Example& example, const TaskSpec& spec,
                            std::span<const Example> demos, const Vocabulary& vocab) {
  std::string content;
  for (const auto& demo : demos) {
    if (demo.fields == example.fields) {
      throw ConfigError("task " + spec.name + ": query example appears in its own demo list");
    }
    content += render_template(spec, demo);
    content += spec.answer_prefix;
    content += spec.surfaces.at(demo.label).front();
    content += "\n";
  }
  content += render_template(spec, example);
  WrappedPrompt prompt;
  prompt.text = wrap(spec.wrapper, content);
  prompt.ids = vocab.tokenize(prompt.text);
  return prompt;
}

std::vector<Example> assemble_kshot(const TaskSpec& task, std::size_t k, std::uint64_t seed) {
  if (k == 0) return {};
  if (task.train.size() < k) {
    throw InsufficientData("task " + task.name + ": " + std::to_string(k) + "-shot needs " +
                           std::to_string(k) + " train examples, have " +
                           std::to_string(task.train.size()));
  }
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first k slots are the sample.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<Example> demos;
  demos.reserve(k);
  for (std::size_t i = 0; i < k; ++i) demos.push_back(task.train[order[i]]);
  return demos;
}

std::vector<TaskExample> sample_minibatch(std::span<const TaskSpec> tasks, std::size_t batch_size,
                                          std::mt19937_64& rng) {
  if (tasks.empty()) throw ConfigError("minibatch sampling needs at least one task");
  for (const auto& t : tasks) {
    if (t.train.empty()) throw InsufficientData("task " + t.name + " has an empty train split");
  }
  std::vector<TaskExample> batch;
  batch.reserve(batch_size);
  std::uniform_int_distribution<std::size_t> pick_task(0, tasks.size() - 1);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto& task = tasks[pick_task(rng)];
    std::uniform_int_distribution<std::size_t> pick_example(0, task.train.size() - 1);
    batch.push_back({&task.train[pick_example(rng)], &task});
  }
  return batch;
}

namespace {

TaskSpec make_spec(std::string name, std::vector<std::string> fields, std::vector<std::string> labels,
                   std::vector<std::vector<std::string>> surfaces, std::string templ) {
  TaskSpec t;
  t.name = std::move(name);
  t.fields = std::move(fields);
  t.labels = std::move(labels);
  t.surfaces = std::move(surfaces);
  t.template_text = std::move(templ);
  t.answer_prefix = "\nThe answer is:";
  t.wrapper = WrapperStyle::kChatML;
  return t;
}

const std::vector<std::string> kNo = {" no", " No.", " NO"};
const std::vector<std::string> kYes = {" yes", " Yes.", " YES"};

}  // namespace

TaskSpec bundled_task(std::string_view name) {
  if (name == "sst2") {
    return make_spec("sst2", {"sentence"}, {"negative", "positive"}, {kNo, kYes},
                     "Review: {sentence}\nIs the sentiment of this review positive?");
  }
  if (name == "rte") {
    // GLUE order: 0 = entailment.
    return make_spec("rte", {"premise", "hypothesis"}, {"entailment", "not_entailment"}, {kYes, kNo},
                     "Premise: {premise}\nHypothesis: {hypothesis}\nDoes the premise entail the hypothesis?");
  }
  if (name == "mrpc") {
    return make_spec("mrpc", {"sentence1", "sentence2"}, {"not_equivalent", "equivalent"}, {kNo, kYes},
                     "Sentence 1: {sentence1}\nSentence 2: {sentence2}\nDo both sentences mean the same thing?");
  }
  if (name == "boolq") {
    return make_spec("boolq", {"passage", "question"}, {"false", "true"}, {kNo, kYes},
                     "Passage: {passage}\nQuestion: {question}?");
  }
  if (name == "piqa") {
    return make_spec("piqa", {"goal", "sol1", "sol2"}, {"sol1", "sol2"},
                     {{" 1", " 1.", " Solution 1"}, {" 2", " 2.", " Solution 2"}},
                     "Goal: {goal}\nSolution 1: {sol1}\nSolution 2: {sol2}\nWhich solution is better, 1 or 2?");
  }
  throw ConfigError("no bundled task named \"" + std::string(name) + "\"");
}

std::vector<std::string> bundled_task_names() { return {"sst2", "rte", "mrpc", "boolq", "piqa"}; }

}  // namespace calsuffix
