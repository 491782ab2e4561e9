#include "calsuffix/suffix.hpp"

#include <cmath>

#include "calsuffix/error.hpp"
#include "calsuffix/scoring.hpp"

namespace calsuffix {

SuffixLogits SuffixLogits::gaussian(std::size_t K, std::size_t V, double stddev, std::mt19937_64& rng) {
  if (K == 0) throw ConfigError("suffix length K must be at least 1");
  std::normal_distribution<double> normal(0.0, stddev);
  SuffixLogits out{Matrix(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(V))};
  for (Eigen::Index i = 0; i < out.W.size(); ++i) out.W.data()[i] = normal(rng);
  return out;
}

Matrix mask_logits(const SuffixLogits& logits, const ForbidMask& mask) {
  if (static_cast<std::size_t>(logits.W.cols()) != mask.size()) {
    throw std::invalid_argument("logit width does not match mask length");
  }
  if (mask.num_allowed() == 0) throw AllForbidden();
  Matrix out = logits.W;
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (mask.forbidden(static_cast<TokenId>(v))) out.col(static_cast<Eigen::Index>(v)).setConstant(kMaskedLogit);
  }
  return out;
}

Matrix sample_gumbel(std::size_t K, std::size_t V, std::mt19937_64& rng) {
  std::extreme_value_distribution<double> gumbel(0.0, 1.0);
  Matrix g(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(V));
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = gumbel(rng);
  }
  return g;
}

Matrix gumbel_softmax(const Matrix& masked_logits, const Matrix& noise, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  Matrix z = (masked_logits + noise) / tau;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    z.row(r) = (z.row(r).array() - m).exp();
    z.row(r) /= z.row(r).sum();
  }
  return z;
}

Matrix gumbel_softmax_sample(const Matrix& masked_logits, RelaxationState& state, bool noise) {
  const Matrix g = noise ? sample_gumbel(static_cast<std::size_t>(masked_logits.rows()),
                                         static_cast<std::size_t>(masked_logits.cols()), state.rng)
                         : Matrix::Zero(masked_logits.rows(), masked_logits.cols());
  return gumbel_softmax(masked_logits, g, state.tau);
}

Matrix gumbel_softmax_backward(const Matrix& P, const Matrix& dP, double tau) {
  const Eigen::VectorXd inner = (P.array() * dP.array()).rowwise().sum();
  return ((dP.colwise() - inner).array() * P.array()).matrix() / tau;
}

Matrix soft_embed(const Matrix& P, const Matrix& E) {
  if (P.cols() != E.rows()) throw std::invalid_argument("P and E do not conform");
  return P * E;
}

HardSuffix hard_decode(const SuffixLogits& logits, const ForbidMask& mask, const Vocabulary& vocab) {
  const Matrix masked = mask_logits(logits, mask);
  HardSuffix out;
  for (Eigen::Index k = 0; k < masked.rows(); ++k) {
    Eigen::Index best = -1;
    for (Eigen::Index v = 0; v < masked.cols(); ++v) {
      if (mask.forbidden(static_cast<TokenId>(v))) continue;
      if (best < 0 || masked(k, v) > masked(k, best)) best = v;
    }
    out.ids.push_back(static_cast<TokenId>(best));
  }
  out.text = vocab.detokenize(out.ids);
  return out;
}

double entropy_bonus(const Matrix& P) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < P.size(); ++i) {
    const double p = P.data()[i];
    if (p > 0.0) h -= p * std::log(p);
  }
  return h / static_cast<double>(P.rows());
}

Matrix entropy_bonus_grad(const Matrix& P) {
  Matrix g(P.rows(), P.cols());
  const double k = static_cast<double>(P.rows());
  for (Eigen::Index i = 0; i < P.size(); ++i) {
    const double p = P.data()[i];
    // Columns with p == 0 are masked; their logits receive no gradient anyway.
    g.data()[i] = p > 0.0 ? -(std::log(p) + 1.0) / k : 0.0;
  }
  return g;
}

namespace {

ScoringSequence fluency_sequence(const ModelBackend& backend, const TokenIds& ids) {
  if (ids.empty()) throw std::invalid_argument("fluency penalty needs K >= 1");
  ScoringSequence s;
  const auto bos = backend.vocab().specials().bos;
  if (bos) s.seq.head.push_back(*bos);
  s.seq.head.insert(s.seq.head.end(), ids.begin(), ids.end());
  // Without BOS the first token has no conditional; score the rest.
  for (std::size_t t = 1; t < s.seq.head.size(); ++t) s.positions.push_back(t);
  return s;
}

}  // namespace

double fluency_penalty(const ModelBackend& backend, const TokenIds& ids) {
  const auto s = fluency_sequence(backend, ids);
  if (s.positions.empty()) return 0.0;
  return masked_ce(backend, s.seq, s.positions) / static_cast<double>(ids.size());
}

Matrix fluency_penalty_st_grad(const ModelBackend& backend, const TokenIds& ids) {
  const auto& E = backend.embeddings();
  const auto V = static_cast<Eigen::Index>(backend.vocab().size());
  const auto K = static_cast<Eigen::Index>(ids.size());
  const auto bos = backend.vocab().specials().bos;
  const double inv_k = 1.0 / static_cast<double>(ids.size());

  // Suffix as a soft span of one-hot embeddings after the optional BOS.
  MixedSequence seq;
  if (bos) seq.head.push_back(*bos);
  seq.span.resize(K, E.cols());
  for (Eigen::Index k = 0; k < K; ++k) seq.span.row(k) = E.row(ids[static_cast<std::size_t>(k)]);

  // F(P) = −(1/K) Σ_k Σ_v P_kv log p(v | prefix_<k). With P one-hot this
  // equals the hard penalty; its gradient has a target part and a
  // conditioning part flowing through the span embeddings.
  const std::size_t offset = bos ? 1 : 0;
  Matrix weights = Matrix::Zero(static_cast<Eigen::Index>(seq.length()), V);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto t = static_cast<Eigen::Index>(offset) + k;
    if (t == 0) continue;
    weights(t - 1, ids[static_cast<std::size_t>(k)]) = -inv_k;
  }
  const auto g = backend.backward_span(seq, weights);
  Matrix dP = g.span * E.transpose();
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto t = static_cast<Eigen::Index>(offset) + k;
    if (t == 0) continue;
    dP.row(k) -= inv_k * g.logprobs.row(t - 1);
  }
  return dP;
}

RelaxationState anneal(RelaxationState state) {
  anneal_in_place(state);
  return state;
}

void anneal_in_place(RelaxationState& state) {
  if (!(state.alpha > 0.0 && state.alpha < 1.0)) throw std::invalid_argument("anneal rate must lie in (0, 1)");
  state.tau = std::max(state.tau_min, state.alpha * state.tau);
}

}  // namespace calsuffix
