#include <random>

#include <benchmark/benchmark.h>

#include "calsuffix/toy.hpp"
#include "calsuffix/trainer.hpp"

using namespace calsuffix;

namespace {

MixedSequence soft_sequence(const ModelBackend& m, std::size_t prompt_len, std::size_t K) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<TokenId> tok(26, 60);
  std::normal_distribution<double> n;
  MixedSequence seq;
  seq.head.push_back(0);
  for (std::size_t i = 0; i < prompt_len; ++i) seq.head.push_back(tok(rng));
  seq.span = Matrix(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(m.hidden_size()));
  for (Eigen::Index i = 0; i < seq.span.size(); ++i) seq.span.data()[i] = n(rng);
  seq.tail = {11, 12, 13, 7, 22};
  return seq;
}

void BM_TransformerForward(benchmark::State& state) {
  const TransformerLM model(toy_vocabulary(), 16, 32, 256, 1);
  const auto seq = soft_sequence(model, static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward_logprobs(seq));
}
BENCHMARK(BM_TransformerForward)->Arg(16)->Arg(64)->Arg(192);

void BM_TransformerBackwardSpan(benchmark::State& state) {
  const TransformerLM model(toy_vocabulary(), 16, 32, 256, 1);
  const auto seq = soft_sequence(model, static_cast<std::size_t>(state.range(0)), 4);
  const std::vector<std::size_t> positions = {seq.length() - 1};
  const Matrix w = masked_ce_weights(seq, positions, model.vocab().size());
  for (auto _ : state) benchmark::DoNotOptimize(model.backward_span(seq, w));
}
BENCHMARK(BM_TransformerBackwardSpan)->Arg(16)->Arg(64)->Arg(192);

void BM_GumbelSoftmax(benchmark::State& state) {
  const auto K = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  const auto W = SuffixLogits::gaussian(K, 64, 1.0, rng);
  RelaxationState relax{1.0, 0.9, 0.999, std::mt19937_64(3)};
  for (auto _ : state) benchmark::DoNotOptimize(gumbel_softmax_sample(W.W, relax));
}
BENCHMARK(BM_GumbelSoftmax)->Arg(4)->Arg(20);

void BM_FullLossStep(benchmark::State& state) {
  const std::vector<TaskSpec> tasks = {sentiment_fixture(64, 8)};
  const TransformerLM model(toy_vocabulary(), 16, 32, 64, 1);
  const auto mask = mixture_mask(model.vocab(), tasks, MaskPolicy::standard());
  HarmObjective objective(model, tasks);
  std::mt19937_64 rng(4);
  const auto batch = sample_minibatch(tasks, static_cast<std::size_t>(state.range(0)), rng);
  const auto W = SuffixLogits::gaussian(4, 64, 0.02, rng);
  const Matrix noise = sample_gumbel(4, 64, rng);
  const TrainConfig config;
  for (auto _ : state) benchmark::DoNotOptimize(compute_full_loss(objective, batch, W, mask, noise, 1.0, config));
}
BENCHMARK(BM_FullLossStep)->Arg(8)->Arg(32);

}  // namespace

BENCHMARK_MAIN();
