#pragma once

#include <random>
#include <string>

#include "calsuffix/backend.hpp"
#include "calsuffix/vocab.hpp"

namespace calsuffix {

// Finite stand-in for −∞ on masked logits. After dividing by any τ ≥ 0.9 and
// exponentiating, the masked probability underflows to exactly 0.0.
inline constexpr double kMaskedLogit = -1e9;

// Trainable K×V logit table W.
struct SuffixLogits {
  Matrix W;

  std::size_t length() const { return static_cast<std::size_t>(W.rows()); }
  // Zero-mean Gaussian entries with the given standard deviation.
  static SuffixLogits gaussian(std::size_t K, std::size_t V, double stddev, std::mt19937_64& rng);
};

struct RelaxationState {
  double tau = 1.0;
  double tau_min = 0.9;
  double alpha = 0.999;
  std::mt19937_64 rng;  // Gumbel noise source
};

struct SoftSuffix {
  Matrix P;      // K×V, row-stochastic
  Matrix delta;  // K×H, P·E
};

struct HardSuffix {
  TokenIds ids;
  std::string text;
};

// W̃: masked columns replaced by kMaskedLogit. Throws AllForbidden.
Matrix mask_logits(const SuffixLogits& logits, const ForbidMask& mask);

// K×V matrix of i.i.d. Gumbel(0, 1) draws.
Matrix sample_gumbel(std::size_t K, std::size_t V, std::mt19937_64& rng);

// softmax_v((W̃ + g)/τ) per row.
Matrix gumbel_softmax(const Matrix& masked_logits, const Matrix& noise, double tau);
// Draws fresh noise from state.rng unless `noise` is false (evaluation).
Matrix gumbel_softmax_sample(const Matrix& masked_logits, RelaxationState& state, bool noise = true);
// Vector-Jacobian product of gumbel_softmax w.r.t. its logits.
Matrix gumbel_softmax_backward(const Matrix& P, const Matrix& dP, double tau);

Matrix soft_embed(const Matrix& P, const Matrix& E);

// Per-row argmax over unmasked columns of W; ties go to the lowest id.
HardSuffix hard_decode(const SuffixLogits& logits, const ForbidMask& mask, const Vocabulary& vocab);

// Mean row entropy (1/K) Σ_k −Σ_v P log P, with 0·log 0 = 0.
double entropy_bonus(const Matrix& P);
Matrix entropy_bonus_grad(const Matrix& P);

// −(1/K) Σ_k log p(t̂_k | [BOS] t̂_<k) under the frozen LM.
double fluency_penalty(const ModelBackend& backend, const TokenIds& ids);

// Straight-through gradient of the fluency penalty: the forward pass uses the
// hard one-hot suffix, the returned ∂F/∂P treats the one-hot rows as the
// relaxed distribution (targets and conditioning both through P).
Matrix fluency_penalty_st_grad(const ModelBackend& backend, const TokenIds& ids);

// τ ← max(τ_min, α·τ). Does not touch the generator.
RelaxationState anneal(RelaxationState state);
void anneal_in_place(RelaxationState& state);

}  // namespace calsuffix
