#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace calsuffix::cli {

// Flag overrides for the train section; unset fields keep the config value.
struct TrainOverrides {
  std::optional<std::size_t> K, steps, batch_size, warmup_steps, checkpoint_every;
  std::optional<double> lr, lambda_H, lambda_F, tau0, alpha, tau_min, clip_norm;
  std::optional<std::uint64_t> seed;
  std::optional<bool> uncalibrated;
  std::optional<fs::path> resume;
};

struct BaselineOverrides {
  std::optional<std::string> method;
  std::optional<std::size_t> K, budget, candidates;
  std::optional<std::uint64_t> seed;
  std::optional<bool> uncalibrated;
};

struct EvalOverrides {
  std::vector<fs::path> artifacts;
  std::vector<std::size_t> k_shots;
  std::optional<std::size_t> cap;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const fs::path& config, const TrainOverrides& overrides);
int cmd_baseline(const fs::path& config, const BaselineOverrides& overrides);
int cmd_eval(const fs::path& config, const EvalOverrides& overrides);
int cmd_transfer(const fs::path& config, const EvalOverrides& overrides);
int cmd_fit(const fs::path& config, std::optional<std::uint64_t> seed);
int cmd_fixtures(const fs::path& out_dir);

}  // namespace calsuffix::cli
