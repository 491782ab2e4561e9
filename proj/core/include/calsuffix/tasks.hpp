#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "calsuffix/vocab.hpp"

namespace calsuffix {

enum class WrapperStyle { kChatML, kAlpaca, kRaw };

std::string_view to_string(WrapperStyle style);
WrapperStyle parse_wrapper_style(std::string_view name);

struct Example {
  std::map<std::string, std::string> fields;
  std::size_t label = 0;  // index into TaskSpec::labels
  std::string task_id;
};

struct TaskSpec {
  std::string name;
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> surfaces;  // S(y), parallel to labels
  std::vector<std::string> fields;                 // declared input fields
  std::string answer_prefix;
  std::string template_text;  // "{field}" placeholders
  WrapperStyle wrapper = WrapperStyle::kRaw;
  std::vector<Example> train;
  std::vector<Example> validation;

  std::size_t label_index(std::string_view label) const;  // throws ConfigError
  LabelSurfaceMap surface_map(const Vocabulary& vocab) const;
  // Throws ConfigError on an empty prefix or undeclared template fields.
  void validate() const;
};

struct WrappedPrompt {
  std::string text;
  TokenIds ids;  // no BOS; that is added when a scoring sequence is built
};

// Reads one JSON object per line. Each object carries the declared fields as
// strings plus "label". Throws SchemaError with the 1-based line number.
std::vector<Example> load_jsonl(const std::filesystem::path& path, const TaskSpec& schema);
std::vector<Example> parse_jsonl(std::istream& in, const TaskSpec& schema);

std::string render_template(const TaskSpec& spec, const Example& example);
std::string wrap(WrapperStyle style, const std::string& content);

// w(x): demos (each followed by the prefix and its gold surface) then the
// query, all inside the wrapper. Neither suffix nor prefix is appended for
// the query; scoring does that.
WrappedPrompt render_prompt(const Example& example, const TaskSpec& spec,
                            std::span<const Example> demos, const Vocabulary& vocab);

// Deterministic k-shot draw from the train split.
std::vector<Example> assemble_kshot(const TaskSpec& task, std::size_t k, std::uint64_t seed);

struct TaskExample {
  const Example* example;
  const TaskSpec* task;
};

// Task-uniform, then example-uniform within that task's train split.
std::vector<TaskExample> sample_minibatch(std::span<const TaskSpec> tasks, std::size_t batch_size,
                                          std::mt19937_64& rng);

// Bundled specs for sst2, rte, mrpc, boolq, piqa (no data attached).
TaskSpec bundled_task(std::string_view name);
std::vector<std::string> bundled_task_names();

}  // namespace calsuffix
