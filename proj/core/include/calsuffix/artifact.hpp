#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "calsuffix/backend.hpp"

namespace calsuffix {

// On-disk result of any suffix learner (the proposed method and all
// baselines share it, so evaluation does not care who produced a suffix).
struct SuffixArtifact {
  std::string method;  // "soft_suffix", "uat", "autoprompt", "softprompt"
  std::size_t K = 0;
  TokenIds token_ids;
  std::string text;
  std::optional<Matrix> logits;           // final W (soft_suffix)
  std::optional<Matrix> soft_embeddings;  // pre-projection vectors (softprompt)
  std::string seen_model;
  std::string vocab_hash;
  std::string mask_hash;
  std::string config_hash;
  std::uint64_t seed = 0;
  nlohmann::json schedule = nlohmann::json::object();  // τ, τ_min, α at the end of training
  nlohmann::json metrics = nlohmann::json::object();
};

inline constexpr int kArtifactVersion = 1;

nlohmann::json artifact_to_json(const SuffixArtifact& a);
SuffixArtifact artifact_from_json(const nlohmann::json& j);
// Writes pretty-printed JSON; identical artifacts produce identical bytes.
void save_artifact(const SuffixArtifact& a, const std::filesystem::path& path);
SuffixArtifact load_artifact(const std::filesystem::path& path);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json_rows(const nlohmann::json& j);

}  // namespace calsuffix
