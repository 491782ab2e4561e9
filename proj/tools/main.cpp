#include <CLI11.hpp>
#include <fmt/format.h>

#include "calsuffix/error.hpp"
#include "commands.hpp"

using namespace calsuffix;
using namespace calsuffix::cli;

namespace {

template <typename T>
void opt(CLI::App* app, const std::string& flag, std::optional<T>& target, const std::string& help) {
  app->add_option_function<T>(flag, [&target](const T& v) { target = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal adversarial suffixes for frozen causal LMs"};
  app.require_subcommand(1);
  std::string config;

  TrainOverrides train;
  auto* train_cmd = app.add_subcommand("train", "learn a suffix with the relaxed calibrated objective");
  train_cmd->add_option("--config", config, "run configuration (JSON)")->required();
  opt(train_cmd, "--K", train.K, "suffix length");
  opt(train_cmd, "--steps", train.steps, "optimizer steps T");
  opt(train_cmd, "--batch-size", train.batch_size, "minibatch size B");
  opt(train_cmd, "--lr", train.lr, "peak learning rate");
  opt(train_cmd, "--warmup", train.warmup_steps, "linear warmup steps");
  opt(train_cmd, "--lambda-H", train.lambda_H, "entropy bonus weight");
  opt(train_cmd, "--lambda-F", train.lambda_F, "fluency penalty weight");
  opt(train_cmd, "--tau0", train.tau0, "initial temperature");
  opt(train_cmd, "--alpha", train.alpha, "temperature decay");
  opt(train_cmd, "--tau-min", train.tau_min, "temperature floor");
  opt(train_cmd, "--clip", train.clip_norm, "global gradient norm clip");
  opt(train_cmd, "--seed", train.seed, "run seed");
  opt(train_cmd, "--checkpoint-every", train.checkpoint_every, "steps between checkpoints (0 = off)");
  opt(train_cmd, "--uncalibrated", train.uncalibrated, "drop the null-prompt term (true/false)");
  opt(train_cmd, "--resume", train.resume, "resume from a training checkpoint");

  BaselineOverrides baseline;
  auto* baseline_cmd = app.add_subcommand("baseline", "run a discrete or soft-prompt baseline");
  baseline_cmd->add_option("--config", config, "run configuration (JSON)")->required();
  opt(baseline_cmd, "--method", baseline.method, "uat | autoprompt | softprompt");
  opt(baseline_cmd, "--K", baseline.K, "suffix length");
  opt(baseline_cmd, "--budget", baseline.budget, "iteration budget");
  opt(baseline_cmd, "--candidates", baseline.candidates, "candidates per position");
  opt(baseline_cmd, "--seed", baseline.seed, "run seed");
  opt(baseline_cmd, "--uncalibrated", baseline.uncalibrated, "score with raw CE instead of CalCE (true/false)");

  EvalOverrides eval;
  auto add_eval_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "run configuration (JSON)")->required();
    cmd->add_option("--artifact", eval.artifacts, "suffix artifact(s)");
    cmd->add_option("--k-shot", eval.k_shots, "k-shot settings");
    opt(cmd, "--cap", eval.cap, "validation examples per cell (0 = all)");
    opt(cmd, "--seed", eval.seed, "demo and run seed");
  };
  auto* eval_cmd = app.add_subcommand("eval", "clean or attacked evaluation on the seen backend");
  add_eval_flags(eval_cmd);
  auto* transfer_cmd = app.add_subcommand("transfer", "attacked evaluation on every configured backend");
  add_eval_flags(transfer_cmd);

  std::optional<std::uint64_t> fit_seed;
  auto* fit_cmd = app.add_subcommand("fit", "fit the toy victim backend named in the config");
  fit_cmd->add_option("--config", config, "run configuration (JSON)")->required();
  opt(fit_cmd, "--seed", fit_seed, "fit seed");

  std::string fixtures_out;
  auto* fixtures_cmd = app.add_subcommand("fixtures", "write the bundled toy datasets as JSONL");
  fixtures_cmd->add_option("--out", fixtures_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(config, train);
    if (*baseline_cmd) return cmd_baseline(config, baseline);
    if (*eval_cmd) return cmd_eval(config, eval);
    if (*transfer_cmd) return cmd_transfer(config, eval);
    if (*fit_cmd) return cmd_fit(config, fit_seed);
    if (*fixtures_cmd) return cmd_fixtures(fixtures_out);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "configuration error: {}\n", e.what());
    return 2;
  } catch (const SchemaError& e) {
    fmt::print(stderr, "schema error: {}\n", e.what());
    return 2;
  } catch (const AllForbidden& e) {
    fmt::print(stderr, "configuration error: {}\n", e.what());
    return 2;
  } catch (const Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 2;
}
