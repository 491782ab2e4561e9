#include "calsuffix/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "calsuffix/error.hpp"
#include "calsuffix/hash.hpp"

namespace calsuffix {

using nlohmann::json;

json EvalResult::to_json() const {
  json recs = json::array();
  for (const auto& r : records) recs.push_back({r.gold, r.predicted, r.cal_logp_gold});
  return {{"model", model},
          {"task", task},
          {"k_shot", k_shot},
          {"seed", seed},
          {"n_examples", n_examples},
          {"cap", cap},
          {"accuracy", accuracy},
          {"mean_cal_logp", mean_cal_logp},
          {"truncations", truncations},
          {"suffix_text", suffix_text},
          {"suffix_ids", suffix_ids},
          {"records", recs}};
}

EvalResult EvalResult::from_json(const json& j) {
  EvalResult r;
  try {
    r.model = j.at("model").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.k_shot = j.at("k_shot").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.n_examples = j.at("n_examples").get<std::size_t>();
    r.cap = j.at("cap").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    r.mean_cal_logp = j.at("mean_cal_logp").get<double>();
    r.truncations = j.at("truncations").get<std::size_t>();
    r.suffix_text = j.at("suffix_text").get<std::string>();
    r.suffix_ids = j.at("suffix_ids").get<TokenIds>();
    for (const auto& rec : j.at("records")) {
      r.records.push_back({rec.at(0).get<std::size_t>(), rec.at(1).get<std::size_t>(), rec.at(2).get<double>()});
    }
  } catch (const json::exception& e) {
    throw SchemaError(0, std::string("eval result: ") + e.what());
  }
  return r;
}

TokenIds suffix_ids_for(const SuffixArtifact& artifact, const ModelBackend& target) {
  const auto& vocab = target.vocab();
  if (artifact.vocab_hash == hex_digest(vocab.fingerprint())) {
    for (TokenId id : artifact.token_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
        throw VocabularyGap("suffix id " + std::to_string(id) + " is outside the target vocabulary");
      }
    }
    return artifact.token_ids;
  }
  try {
    return vocab.tokenize(artifact.text);
  } catch (const UnknownToken& e) {
    throw VocabularyGap("suffix text cannot be tokenized by " + target.name() + ": " + e.what());
  }
}

EvalResult evaluate_task(const ModelBackend& backend, const TaskSpec& task, const SuffixArtifact* suffix,
                         const EvalOptions& options) {
  if (task.validation.empty()) throw InsufficientData("task " + task.name + " has no validation examples");
  EvalResult r;
  r.model = backend.name();
  r.task = task.name;
  r.k_shot = options.k_shot;
  r.seed = options.seed;
  r.cap = options.cap;

  SuffixInput input;
  if (suffix) {
    r.suffix_ids = suffix_ids_for(*suffix, backend);
    r.suffix_text = suffix->text;
    input = r.suffix_ids;
  }
  const auto demos = assemble_kshot(task, options.k_shot, options.seed);
  const TaskScorer scorer(backend, task);

  const std::size_t n =
      options.cap == 0 ? task.validation.size() : std::min(options.cap, task.validation.size());
  std::size_t correct = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Example& ex = task.validation[i];
    const auto prompt = render_prompt(ex, task, demos, backend.vocab());
    if (scorer.truncation(prompt.ids, input) > 0) ++r.truncations;
    const auto scores = scorer.cal_logp(prompt.ids, input);
    EvalRecord rec{ex.label, predict_label(scores, options.rule), scores[ex.label].ell_cal};
    if (rec.predicted == rec.gold) ++correct;
    sum += rec.cal_logp_gold;
    r.records.push_back(rec);
  }
  r.n_examples = n;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.mean_cal_logp = sum / static_cast<double>(n);
  return r;
}

TransferCell delta_metrics(const EvalResult& clean, const EvalResult& attacked) {
  if (clean.model != attacked.model || clean.task != attacked.task || clean.k_shot != attacked.k_shot ||
      clean.seed != attacked.seed || clean.n_examples != attacked.n_examples) {
    throw MismatchedRuns("cannot pair " + clean.model + "/" + clean.task + " with " + attacked.model + "/" +
                         attacked.task);
  }
  for (std::size_t i = 0; i < clean.records.size() && i < attacked.records.size(); ++i) {
    if (clean.records[i].gold != attacked.records[i].gold) throw MismatchedRuns("runs scored different examples");
  }
  TransferCell c;
  c.target_model = clean.model;
  c.task = clean.task;
  c.k_shot = clean.k_shot;
  c.acc_clean = clean.accuracy;
  c.acc_attacked = attacked.accuracy;
  c.delta_acc = attacked.accuracy - clean.accuracy;
  c.callogp_clean = clean.mean_cal_logp;
  c.callogp_attacked = attacked.mean_cal_logp;
  c.delta_callogp = attacked.mean_cal_logp - clean.mean_cal_logp;
  c.n = clean.n_examples;
  c.seed = clean.seed;
  return c;
}

TransferCell delta_metrics(const EvalResult& clean, const EvalResult& attacked, const SuffixArtifact& suffix) {
  TransferCell c = delta_metrics(clean, attacked);
  c.method = suffix.method;
  c.K = suffix.K;
  c.seen_model = suffix.seen_model;
  return c;
}

TransferReport transfer_matrix(std::span<const SuffixArtifact> suffixes, std::span<const ModelBackend* const> backends,
                               std::span<const TaskSpec> tasks, std::span<const std::size_t> k_shots,
                               const EvalOptions& options) {
  if (suffixes.empty()) throw ConfigError("transfer needs at least one suffix artifact");
  if (backends.empty()) throw ConfigError("transfer needs at least one backend");
  TransferReport report;
  report.cap = options.cap;
  for (const ModelBackend* backend : backends) {
    for (const auto& task : tasks) {
      for (std::size_t k : k_shots) {
        EvalOptions opt = options;
        opt.k_shot = k;
        const EvalResult clean = evaluate_task(*backend, task, nullptr, opt);
        report.clean.push_back(clean);
        for (const auto& suffix : suffixes) {
          EvalResult attacked = evaluate_task(*backend, task, &suffix, opt);
          report.cells.push_back(delta_metrics(clean, attacked, suffix));
          report.attacked.push_back(std::move(attacked));
        }
      }
    }
  }
  return report;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "json") return ReportFormat::kJson;
  if (name == "md") return ReportFormat::kMd;
  throw ConfigError("unknown report format \"" + std::string(name) + "\"");
}

namespace {

std::string signed3(double v) {
  std::string s = fmt::format("{:+.3f}", v);
  if (s == "-0.000") s = "+0.000";
  return s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

json cell_json(const TransferCell& c) {
  return {{"method", c.method},
          {"K", c.K},
          {"seen_model", c.seen_model},
          {"target_model", c.target_model},
          {"task", c.task},
          {"k_shot", c.k_shot},
          {"acc_clean", c.acc_clean},
          {"acc_attacked", c.acc_attacked},
          {"delta_acc", c.delta_acc},
          {"callogp_clean", c.callogp_clean},
          {"callogp_attacked", c.callogp_attacked},
          {"delta_callogp", c.delta_callogp},
          {"n", c.n},
          {"seed", c.seed}};
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
void push_unique(std::vector<T>& v, const T& x) {
  if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

}  // namespace

std::string format_delta_cell(double delta_acc, double delta_callogp) {
  return signed3(delta_acc) + " / " + signed3(delta_callogp);
}

std::string format_clean_cell(double accuracy, double mean_cal_logp) {
  std::string cal = fmt::format("{:.2f}", mean_cal_logp);
  if (cal == "-0.00") cal = "0.00";
  return fmt::format("{:.2f} / {}", accuracy, cal);
}

std::string report_csv(const TransferReport& report) {
  std::string out(kReportCsvHeader);
  out += '\n';
  for (const auto& c : report.cells) {
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", csv_field(c.method), c.K,
                       csv_field(c.seen_model), csv_field(c.target_model), csv_field(c.task), c.k_shot, c.acc_clean,
                       c.acc_attacked, c.delta_acc, c.callogp_clean, c.callogp_attacked, c.delta_callogp, c.n,
                       c.seed);
  }
  return out;
}

std::vector<TransferCell> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != kReportCsvHeader) throw SchemaError(1, "unexpected report header");
  std::vector<TransferCell> cells;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 14) throw SchemaError(lineno, "expected 14 columns");
    try {
      TransferCell c;
      c.method = f[0];
      c.K = std::stoull(f[1]);
      c.seen_model = f[2];
      c.target_model = f[3];
      c.task = f[4];
      c.k_shot = std::stoull(f[5]);
      c.acc_clean = std::stod(f[6]);
      c.acc_attacked = std::stod(f[7]);
      c.delta_acc = std::stod(f[8]);
      c.callogp_clean = std::stod(f[9]);
      c.callogp_attacked = std::stod(f[10]);
      c.delta_callogp = std::stod(f[11]);
      c.n = std::stoull(f[12]);
      c.seed = std::stoull(f[13]);
      cells.push_back(std::move(c));
    } catch (const std::logic_error&) {
      throw SchemaError(lineno, "malformed number");
    }
  }
  return cells;
}

json report_json(const TransferReport& report) {
  json rows = json::array();
  for (const auto& c : report.cells) rows.push_back(cell_json(c));
  return {{"cap", report.cap}, {"cells", rows}};
}

std::string report_md(const TransferReport& report) {
  // One table per (method, seen model): rows target × task, columns k-shot × K.
  std::vector<std::pair<std::string, std::string>> groups;
  for (const auto& c : report.cells) push_unique(groups, {c.method, c.seen_model});
  std::string out;
  for (const auto& [method, seen] : groups) {
    std::vector<std::string> targets, tasks;
    std::vector<std::size_t> kshots, Ks;
    std::map<std::tuple<std::string, std::string, std::size_t, std::size_t>, const TransferCell*> at;
    for (const auto& c : report.cells) {
      if (c.method != method || c.seen_model != seen) continue;
      push_unique(targets, c.target_model);
      push_unique(tasks, c.task);
      push_unique(kshots, c.k_shot);
      push_unique(Ks, c.K);
      at[{c.target_model, c.task, c.k_shot, c.K}] = &c;
    }
    std::sort(kshots.begin(), kshots.end());
    std::sort(Ks.begin(), Ks.end());
    out += fmt::format("### {} (seen: {})\n\n", method, seen);
    out += "| Target Model | Task |";
    for (auto k : kshots) {
      for (auto K : Ks) out += fmt::format(" {}-shot K={} |", k, K);
    }
    out += "\n|---|---|";
    for (std::size_t i = 0; i < kshots.size() * Ks.size(); ++i) out += "---|";
    out += '\n';
    for (const auto& target : targets) {
      for (const auto& task : tasks) {
        out += fmt::format("| {} | {} |", target, task);
        for (auto k : kshots) {
          for (auto K : Ks) {
            auto it = at.find({target, task, k, K});
            out += it == at.end() ? std::string(" |")
                                  : " " + format_delta_cell(it->second->delta_acc, it->second->delta_callogp) + " |";
          }
        }
        out += '\n';
      }
    }
    out += fmt::format("\nn per cell: {}\n\n", report.cap == 0 ? std::string("full split")
                                                                 : fmt::format("up to {}", report.cap));
  }
  return out;
}

std::vector<std::filesystem::path> emit_report(const TransferReport& report, const std::set<ReportFormat>& formats,
                                               const std::filesystem::path& dir, const std::string& stem) {
  std::vector<std::filesystem::path> written;
  if (formats.empty()) return written;
  if (report.cells.empty()) throw ConfigError("empty transfer report");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (ReportFormat f : formats) {
    std::filesystem::path p;
    switch (f) {
      case ReportFormat::kCsv:
        write_file(p = dir / (stem + ".csv"), report_csv(report));
        break;
      case ReportFormat::kJson:
        write_file(p = dir / (stem + ".json"), report_json(report).dump(2) + "\n");
        break;
      case ReportFormat::kMd:
        write_file(p = dir / (stem + ".md"), report_md(report));
        break;
    }
    written.push_back(p);
  }
  return written;
}

std::string clean_report_md(std::span<const EvalResult> results) {
  std::vector<std::string> models, tasks;
  std::vector<std::size_t> kshots;
  std::map<std::tuple<std::size_t, std::string, std::string>, const EvalResult*> at;
  for (const auto& r : results) {
    push_unique(models, r.model);
    push_unique(tasks, r.task);
    push_unique(kshots, r.k_shot);
    at[{r.k_shot, r.task, r.model}] = &r;
  }
  std::sort(kshots.begin(), kshots.end());
  std::string out = "| k-shot | Task |";
  for (const auto& m : models) out += " " + m + " |";
  out += "\n|---|---|";
  for (std::size_t i = 0; i < models.size(); ++i) out += "---|";
  out += '\n';
  for (auto k : kshots) {
    for (const auto& task : tasks) {
      out += fmt::format("| {} | {} |", k, task);
      for (const auto& m : models) {
        auto it = at.find({k, task, m});
        out += it == at.end() ? std::string(" |")
                              : " " + format_clean_cell(it->second->accuracy, it->second->mean_cal_logp) + " |";
      }
      out += '\n';
    }
  }
  return out;
}

json clean_report_json(std::span<const EvalResult> results) {
  json rows = json::array();
  for (const auto& r : results) {
    json j = r.to_json();
    j.erase("records");
    rows.push_back(std::move(j));
  }
  return {{"results", rows}};
}

std::vector<std::filesystem::path> emit_clean_report(std::span<const EvalResult> results,
                                                     const std::set<ReportFormat>& formats,
                                                     const std::filesystem::path& dir, const std::string& stem) {
  std::vector<std::filesystem::path> written;
  if (formats.empty()) return written;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (ReportFormat f : formats) {
    std::filesystem::path p;
    switch (f) {
      case ReportFormat::kCsv: {
        std::string csv = "model,task,k_shot,accuracy,mean_cal_logp,n,seed\n";
        for (const auto& r : results) {
          csv += fmt::format("{},{},{},{},{},{},{}\n", csv_field(r.model), csv_field(r.task), r.k_shot, r.accuracy,
                             r.mean_cal_logp, r.n_examples, r.seed);
        }
        write_file(p = dir / (stem + ".csv"), csv);
        break;
      }
      case ReportFormat::kJson:
        write_file(p = dir / (stem + ".json"), clean_report_json(results).dump(2) + "\n");
        break;
      case ReportFormat::kMd:
        write_file(p = dir / (stem + ".md"), clean_report_md(results));
        break;
    }
    written.push_back(p);
  }
  return written;
}

}  // namespace calsuffix
