#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calsuffix/backend.hpp"
#include "calsuffix/baselines.hpp"
#include "calsuffix/error.hpp"
#include "calsuffix/eval.hpp"
#include "calsuffix/toy.hpp"
#include "calsuffix/trainer.hpp"

namespace calsuffix::cli {

namespace fs = std::filesystem;

// Thrown for a suffix artifact path that does not exist; exit code 2.
class MissingArtifact : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct BackendEntry {
  std::string name;
  std::string adapter;  // "toy_checkpoint" or a registered adapter
  std::optional<fs::path> checkpoint;
  nlohmann::json options = nlohmann::json::object();
};

struct TaskEntry {
  nlohmann::json spec;  // resolved task object as written in the snapshot
  fs::path train;
  fs::path validation;
};

struct FitEntry {
  std::string task;
  std::size_t steps = 300;
  fs::path checkpoint;
  FitOptions options;
};

struct EvalEntry {
  std::size_t cap = 256;
  std::vector<std::size_t> k_shots = {0};
  std::set<ReportFormat> formats = {ReportFormat::kCsv, ReportFormat::kJson, ReportFormat::kMd};
  PredictionRule rule = PredictionRule::kCalibrated;
};

// One JSON file carrying everything a run needs. Relative paths resolve
// against the file's directory; unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  fs::path output_dir;
  std::vector<BackendEntry> backends;
  std::string seen_backend;
  std::vector<TaskEntry> tasks;
  MaskPolicy mask = MaskPolicy::standard();
  TrainConfig train;
  BaselineConfig baseline;
  EvalEntry eval;
  std::optional<FitEntry> fit;
  std::vector<fs::path> artifacts;

  static RunConfig load(const fs::path& path);
  static RunConfig from_json(const nlohmann::json& j, const fs::path& base_dir);
  // Every default filled in and every path absolute; loading it back gives
  // the same run.
  nlohmann::json to_json() const;

  // Pushes the top-level seed into the train and baseline sections.
  void apply_seed(std::uint64_t s);
  void validate() const;

  std::vector<TaskSpec> load_tasks() const;
  const BackendEntry& backend_entry(const std::string& name) const;
  std::unique_ptr<ModelBackend> make(const BackendEntry& entry) const;
};

// CALSUFFIX_OUTPUT_DIR wins over the configured output directory.
fs::path resolve_output_dir(const RunConfig& config);

}  // namespace calsuffix::cli
