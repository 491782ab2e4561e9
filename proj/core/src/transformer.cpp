#include <cmath>

#include <nlohmann/json.hpp>

#include "calsuffix/backend.hpp"
#include "calsuffix/error.hpp"
#include "calsuffix/hash.hpp"
#include "numeric.hpp"

namespace calsuffix {

TransformerParams TransformerParams::zeros_like() const {
  TransformerParams z;
  z.E = Matrix::Zero(E.rows(), E.cols());
  z.pos = Matrix::Zero(pos.rows(), pos.cols());
  z.Wq = Matrix::Zero(Wq.rows(), Wq.cols());
  z.Wk = Matrix::Zero(Wk.rows(), Wk.cols());
  z.Wv = Matrix::Zero(Wv.rows(), Wv.cols());
  z.Wo = Matrix::Zero(Wo.rows(), Wo.cols());
  z.W1 = Matrix::Zero(W1.rows(), W1.cols());
  z.b1 = RowVector::Zero(b1.size());
  z.W2 = Matrix::Zero(W2.rows(), W2.cols());
  z.b2 = RowVector::Zero(b2.size());
  z.Wout = Matrix::Zero(Wout.rows(), Wout.cols());
  z.bout = RowVector::Zero(bout.size());
  return z;
}

TransformerLM::TransformerLM(Vocabulary vocab, std::size_t hidden, std::size_t ffn, std::size_t context_limit,
                             std::uint64_t seed, double init_scale)
    : ToyCausalLM("toy_transformer", std::move(vocab), context_limit, seed) {
  const auto V = static_cast<Eigen::Index>(vocab_.size());
  const auto H = static_cast<Eigen::Index>(hidden);
  const auto F = static_cast<Eigen::Index>(ffn);
  const auto L = static_cast<Eigen::Index>(context_limit);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Matrix& m, Eigen::Index rows, Eigen::Index cols, double scale) {
    m.resize(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  };
  const double hs = 1.0 / std::sqrt(static_cast<double>(H));
  fill(params_.E, V, H, init_scale);
  fill(params_.pos, L, H, init_scale);
  fill(params_.Wq, H, H, hs);
  fill(params_.Wk, H, H, hs);
  fill(params_.Wv, H, H, hs);
  fill(params_.Wo, H, H, hs);
  fill(params_.W1, H, F, hs);
  fill(params_.W2, F, H, 1.0 / std::sqrt(static_cast<double>(F)));
  fill(params_.Wout, H, V, hs);
  params_.b1 = RowVector::Zero(F);
  params_.b2 = RowVector::Zero(H);
  params_.bout = RowVector::Zero(V);
}

TransformerLM::TransformerLM(Vocabulary vocab, TransformerParams params, std::uint64_t seed)
    : ToyCausalLM("toy_transformer", std::move(vocab), static_cast<std::size_t>(params.pos.rows()), seed),
      params_(std::move(params)) {
  const auto V = static_cast<Eigen::Index>(vocab_.size());
  const auto H = params_.E.cols();
  const auto F = params_.W1.cols();
  const bool ok = params_.E.rows() == V && params_.pos.cols() == H && params_.Wq.rows() == H &&
                  params_.Wq.cols() == H && params_.Wk.rows() == H && params_.Wk.cols() == H &&
                  params_.Wv.rows() == H && params_.Wv.cols() == H && params_.Wo.rows() == H &&
                  params_.Wo.cols() == H && params_.W1.rows() == H && params_.b1.size() == F &&
                  params_.W2.rows() == F && params_.W2.cols() == H && params_.b2.size() == H &&
                  params_.Wout.rows() == H && params_.Wout.cols() == V && params_.bout.size() == V;
  if (!ok) throw ConfigError("transformer parameter shapes are inconsistent");
}

struct TransformerLM::Tape {
  std::size_t span_begin = 0;
  std::size_t span_rows = 0;
  std::vector<TokenId> ids;  // -1 inside the span
  Matrix x0, Q, K, Vv, A, O, x1, G, x2, logprobs;
};

TransformerLM::Tape TransformerLM::forward_tape(const MixedSequence& seq) const {
  check_length(seq);
  const auto& p = params_;
  const auto L = static_cast<Eigen::Index>(seq.length());
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.E.cols()));

  Tape t;
  t.span_begin = seq.span_begin();
  t.span_rows = static_cast<std::size_t>(seq.span.rows());
  t.ids.reserve(seq.length());
  for (TokenId id : seq.head) t.ids.push_back(id);
  for (Eigen::Index i = 0; i < seq.span.rows(); ++i) t.ids.push_back(-1);
  for (TokenId id : seq.tail) t.ids.push_back(id);

  t.x0 = embed(seq) + p.pos.topRows(L);
  t.Q = t.x0 * p.Wq;
  t.K = t.x0 * p.Wk;
  t.Vv = t.x0 * p.Wv;

  t.A = Matrix::Zero(L, L);
  const Matrix S = (t.Q * t.K.transpose()) * scale;
  for (Eigen::Index i = 0; i < L; ++i) {
    const auto row = S.row(i).head(i + 1);
    const double m = row.maxCoeff();
    const auto e = (row.array() - m).exp();
    t.A.row(i).head(i + 1) = e / e.sum();
  }
  t.O = t.A * t.Vv;
  t.x1 = t.x0 + t.O * p.Wo;
  Matrix U = t.x1 * p.W1;
  U.rowwise() += p.b1;
  t.G = U.array().tanh();
  t.x2 = t.x1 + t.G * p.W2;
  t.x2.rowwise() += p.b2;
  Matrix logits = t.x2 * p.Wout;
  logits.rowwise() += p.bout;
  t.logprobs = detail::log_softmax_rows(logits);
  return t;
}

Matrix TransformerLM::backward(const Tape& t, const Matrix& weights, TransformerParams* grads) const {
  const auto& p = params_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.E.cols()));
  if (weights.rows() != t.logprobs.rows() || weights.cols() != t.logprobs.cols()) {
    throw std::invalid_argument("weight matrix must match logprob shape");
  }

  const Matrix dlogits = detail::log_softmax_backward(t.logprobs, weights);
  const Matrix dx2 = dlogits * p.Wout.transpose();

  // MLP residual.
  Matrix dx1 = dx2;
  const Matrix dG = dx2 * p.W2.transpose();
  const Matrix dU = (dG.array() * (1.0 - t.G.array().square())).matrix();
  dx1.noalias() += dU * p.W1.transpose();

  // Attention residual.
  Matrix dx0 = dx1;
  const Matrix dO = dx1 * p.Wo.transpose();
  const Matrix dA = dO * t.Vv.transpose();
  const Matrix dVv = t.A.transpose() * dO;
  const Eigen::VectorXd inner = (dA.array() * t.A.array()).rowwise().sum();
  const Matrix dS = ((dA.colwise() - inner).array() * t.A.array()).matrix() * scale;
  const Matrix dQ = dS * t.K;
  const Matrix dK = dS.transpose() * t.Q;
  dx0.noalias() += dQ * p.Wq.transpose();
  dx0.noalias() += dK * p.Wk.transpose();
  dx0.noalias() += dVv * p.Wv.transpose();

  if (grads != nullptr) {
    auto& g = *grads;
    g.Wout.noalias() += t.x2.transpose() * dlogits;
    g.bout += dlogits.colwise().sum();
    g.W2.noalias() += t.G.transpose() * dx2;
    g.b2 += dx2.colwise().sum();
    g.W1.noalias() += t.x1.transpose() * dU;
    g.b1 += dU.colwise().sum();
    g.Wo.noalias() += t.O.transpose() * dx1;
    g.Wq.noalias() += t.x0.transpose() * dQ;
    g.Wk.noalias() += t.x0.transpose() * dK;
    g.Wv.noalias() += t.x0.transpose() * dVv;
    g.pos.topRows(dx0.rows()) += dx0;
    for (std::size_t i = 0; i < t.ids.size(); ++i) {
      if (t.ids[i] >= 0) g.E.row(t.ids[i]) += dx0.row(static_cast<Eigen::Index>(i));
    }
  }
  return dx0;
}

Matrix TransformerLM::forward_logprobs(const MixedSequence& seq) const { return forward_tape(seq).logprobs; }

SpanGradient TransformerLM::backward_span(const MixedSequence& seq, const Matrix& weights) const {
  Tape t = forward_tape(seq);
  const Matrix dX = backward(t, weights, nullptr);
  SpanGradient out;
  out.span = dX.middleRows(static_cast<Eigen::Index>(t.span_begin), static_cast<Eigen::Index>(t.span_rows));
  out.logprobs = std::move(t.logprobs);
  return out;
}

Matrix TransformerLM::backward_params(const MixedSequence& seq, const Matrix& weights,
                                      TransformerParams& grads) const {
  Tape t = forward_tape(seq);
  backward(t, weights, &grads);
  return std::move(t.logprobs);
}

std::uint64_t TransformerLM::parameter_hash() const {
  Fnv1a h;
  params_.for_each([&](const char*, const auto& m) { h.update(Matrix(m)); });
  return h.digest();
}

}  // namespace calsuffix
