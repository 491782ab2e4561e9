#include "calsuffix/artifact.hpp"

#include <fstream>

#include "calsuffix/error.hpp"

namespace calsuffix {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json_rows(const json& j) {
  if (!j.is_array()) throw ConfigError("matrix must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? 0 : static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(row.size()) != cols) throw ConfigError("ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

json artifact_to_json(const SuffixArtifact& a) {
  json j;
  j["format"] = "calsuffix.suffix";
  j["version"] = kArtifactVersion;
  j["method"] = a.method;
  j["K"] = a.K;
  j["token_ids"] = a.token_ids;
  j["text"] = a.text;
  j["logits"] = a.logits ? matrix_to_json(*a.logits) : json(nullptr);
  j["soft_embeddings"] = a.soft_embeddings ? matrix_to_json(*a.soft_embeddings) : json(nullptr);
  j["seen_model"] = a.seen_model;
  j["vocab_hash"] = a.vocab_hash;
  j["mask_hash"] = a.mask_hash;
  j["config_hash"] = a.config_hash;
  j["seed"] = a.seed;
  j["schedule"] = a.schedule;
  j["metrics"] = a.metrics;
  return j;
}

SuffixArtifact artifact_from_json(const json& j) {
  if (j.value("format", "") != "calsuffix.suffix") throw ConfigError("not a suffix artifact");
  if (j.value("version", 0) != kArtifactVersion) throw ConfigError("unsupported suffix artifact version");
  SuffixArtifact a;
  a.method = j.at("method").get<std::string>();
  a.K = j.at("K").get<std::size_t>();
  a.token_ids = j.at("token_ids").get<TokenIds>();
  a.text = j.at("text").get<std::string>();
  if (!j.at("logits").is_null()) a.logits = matrix_from_json_rows(j.at("logits"));
  if (!j.at("soft_embeddings").is_null()) a.soft_embeddings = matrix_from_json_rows(j.at("soft_embeddings"));
  a.seen_model = j.at("seen_model").get<std::string>();
  a.vocab_hash = j.at("vocab_hash").get<std::string>();
  a.mask_hash = j.at("mask_hash").get<std::string>();
  a.config_hash = j.at("config_hash").get<std::string>();
  a.seed = j.at("seed").get<std::uint64_t>();
  a.schedule = j.at("schedule");
  a.metrics = j.at("metrics");
  if (a.token_ids.size() != a.K) throw ConfigError("artifact token count differs from K");
  return a;
}

void save_artifact(const SuffixArtifact& a, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write artifact " + path.string());
  out << artifact_to_json(a).dump(2) << '\n';
  if (!out) throw IoError("failed writing artifact " + path.string());
}

SuffixArtifact load_artifact(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open artifact " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed artifact " + path.string() + ": " + e.what());
  }
  return artifact_from_json(j);
}

}  // namespace calsuffix
