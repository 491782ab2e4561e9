#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calsuffix/artifact.hpp"
#include "calsuffix/scoring.hpp"
#include "calsuffix/tasks.hpp"

namespace calsuffix {

struct EvalRecord {
  std::size_t gold = 0;
  std::size_t predicted = 0;
  double cal_logp_gold = 0.0;
};

struct EvalResult {
  std::string model;
  std::string task;
  std::size_t k_shot = 0;
  std::uint64_t seed = 0;
  std::size_t n_examples = 0;
  std::size_t cap = 0;  // 0 means the full validation split
  double accuracy = 0.0;
  double mean_cal_logp = 0.0;
  std::size_t truncations = 0;  // examples whose prompt was left-truncated
  std::string suffix_text;      // empty when clean
  TokenIds suffix_ids;          // as embedded by the target backend
  std::vector<EvalRecord> records;

  nlohmann::json to_json() const;
  static EvalResult from_json(const nlohmann::json& j);
};

struct EvalOptions {
  std::size_t k_shot = 0;
  std::uint64_t seed = 0;
  std::size_t cap = 256;  // 0 disables
  PredictionRule rule = PredictionRule::kCalibrated;
};

// Suffix ids under the target backend: stored ids when the vocabularies
// match, otherwise the decoded text re-tokenized. Throws VocabularyGap.
TokenIds suffix_ids_for(const SuffixArtifact& artifact, const ModelBackend& target);

// Demos (k_shot > 0) are drawn once per run from the train split with
// `seed`; the first `cap` validation examples are scored.
EvalResult evaluate_task(const ModelBackend& backend, const TaskSpec& task, const SuffixArtifact* suffix,
                         const EvalOptions& options);

struct TransferCell {
  std::string method;
  std::size_t K = 0;
  std::string seen_model;
  std::string target_model;
  std::string task;
  std::size_t k_shot = 0;
  double acc_clean = 0.0;
  double acc_attacked = 0.0;
  double delta_acc = 0.0;
  double callogp_clean = 0.0;
  double callogp_attacked = 0.0;
  double delta_callogp = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

// Attacked minus clean. Throws MismatchedRuns unless model, task, k-shot,
// seed and the scored examples agree.
TransferCell delta_metrics(const EvalResult& clean, const EvalResult& attacked);
TransferCell delta_metrics(const EvalResult& clean, const EvalResult& attacked, const SuffixArtifact& suffix);

struct TransferReport {
  std::vector<TransferCell> cells;
  std::vector<EvalResult> clean;
  std::vector<EvalResult> attacked;
  std::size_t cap = 0;
};

TransferReport transfer_matrix(std::span<const SuffixArtifact> suffixes, std::span<const ModelBackend* const> backends,
                               std::span<const TaskSpec> tasks, std::span<const std::size_t> k_shots,
                               const EvalOptions& options);

enum class ReportFormat { kCsv, kJson, kMd };
ReportFormat parse_report_format(std::string_view name);

// "-0.172 / +0.428": signed, three decimals, no negative zero.
std::string format_delta_cell(double delta_acc, double delta_callogp);
// "0.91 / 8.58".
std::string format_clean_cell(double accuracy, double mean_cal_logp);

inline constexpr std::string_view kReportCsvHeader =
    "method,K,seen_model,target_model,task,k_shot,acc_clean,acc_attacked,delta_acc,callogp_clean,"
    "callogp_attacked,delta_callogp,n,seed";

std::string report_csv(const TransferReport& report);
std::vector<TransferCell> parse_report_csv(const std::string& text);  // throws SchemaError
nlohmann::json report_json(const TransferReport& report);
std::string report_md(const TransferReport& report);

// Writes <stem>.csv / .json / .md into dir; returns the paths written.
std::vector<std::filesystem::path> emit_report(const TransferReport& report, const std::set<ReportFormat>& formats,
                                               const std::filesystem::path& dir, const std::string& stem = "transfer");

// Clean-only report: rows k-shot × task, one column per model.
std::string clean_report_md(std::span<const EvalResult> results);
nlohmann::json clean_report_json(std::span<const EvalResult> results);
std::vector<std::filesystem::path> emit_clean_report(std::span<const EvalResult> results,
                                                     const std::set<ReportFormat>& formats,
                                                     const std::filesystem::path& dir,
                                                     const std::string& stem = "clean");

}  // namespace calsuffix
