#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "calsuffix/tasks.hpp"
#include "calsuffix/vocab.hpp"

namespace calsuffix {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Token ids with at most one injected soft span: head ∥ span ∥ tail.
struct MixedSequence {
  TokenIds head;
  Matrix span;  // rows are embeddings; zero rows means "no soft span"
  TokenIds tail;

  std::size_t length() const { return head.size() + static_cast<std::size_t>(span.rows()) + tail.size(); }
  bool has_span() const { return span.rows() > 0; }
  std::size_t span_begin() const { return head.size(); }
  std::size_t span_end() const { return head.size() + static_cast<std::size_t>(span.rows()); }
  // Hard token at absolute position t; nullopt inside the soft span.
  std::optional<TokenId> token(std::size_t t) const;

  static MixedSequence hard(TokenIds ids) { return {std::move(ids), Matrix(), {}}; }
};

// Log-probabilities plus the gradient of a linear functional of them with
// respect to the soft span.
struct SpanGradient {
  Matrix logprobs;  // L×V
  Matrix span;      // T×H
};

// Frozen, differentiable causal LM. Implementations never mutate their
// parameters; forward and backward calls are const and thread-safe.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  virtual const std::string& name() const = 0;
  virtual const Vocabulary& vocab() const = 0;
  virtual const Matrix& embeddings() const = 0;  // E, V×H
  virtual std::size_t context_limit() const = 0;
  virtual WrapperStyle native_wrapper() const { return WrapperStyle::kRaw; }
  std::size_t hidden_size() const { return static_cast<std::size_t>(embeddings().cols()); }

  // Row t holds log p(· | z_≤t). Throws LengthExceeded.
  virtual Matrix forward_logprobs(const MixedSequence& seq) const = 0;

  // For the scalar Σ_{t,v} weights(t,v)·logprobs(t,v), returns logprobs and
  // the exact gradient with respect to seq.span.
  virtual SpanGradient backward_span(const MixedSequence& seq, const Matrix& weights) const = 0;

  // Fingerprint of θ; equal before and after any attack run.
  virtual std::uint64_t parameter_hash() const = 0;
};

// Gradient of the masked CE −Σ_{t∈positions} log p(z_t | z_<t) w.r.t. the soft
// span. Positions must index hard tokens.
Matrix grad_wrt_soft_span(const ModelBackend& backend, const MixedSequence& seq,
                          std::span<const std::size_t> positions);

// Weight matrix selecting −log p(z_t | z_<t) for every t in positions, so
// that backward_span() differentiates the masked CE.
Matrix masked_ce_weights(const MixedSequence& seq, std::span<const std::size_t> positions,
                         std::size_t vocab_size, double scale = 1.0);

// Shared behaviour for the bundled toy models.
class ToyCausalLM : public ModelBackend {
 public:
  enum class Kind { kBigram, kTransformer };

  const std::string& name() const override { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }
  const Vocabulary& vocab() const override { return vocab_; }
  std::size_t context_limit() const override { return context_limit_; }
  virtual Kind kind() const = 0;
  std::uint64_t seed() const { return seed_; }

  virtual nlohmann::json parameters_json() const = 0;

 protected:
  ToyCausalLM(std::string name, Vocabulary vocab, std::size_t context_limit, std::uint64_t seed)
      : name_(std::move(name)), vocab_(std::move(vocab)), context_limit_(context_limit), seed_(seed) {}

  // Row-wise embedding lookup with the soft span spliced in.
  Matrix embed(const MixedSequence& seq) const;
  void check_length(const MixedSequence& seq) const;

  std::string name_;
  Vocabulary vocab_;
  std::size_t context_limit_;
  std::uint64_t seed_;
};

// logits_t = x_t·U + b with x_t the input embedding at t. Row t depends on
// token t only, so every history before the label is ignored.
class BigramLM final : public ToyCausalLM {
 public:
  BigramLM(Vocabulary vocab, std::size_t hidden, std::uint64_t seed, double init_scale = 1.0,
           std::size_t context_limit = 256);
  // Constant-logit model: every row is −log V.
  static BigramLM uniform(Vocabulary vocab, std::size_t hidden);
  BigramLM(Vocabulary vocab, Matrix embeddings, Matrix out, RowVector bias, std::uint64_t seed,
           std::size_t context_limit = 256);

  Kind kind() const override { return Kind::kBigram; }
  const Matrix& embeddings() const override { return E_; }
  const Matrix& output() const { return U_; }
  const RowVector& bias() const { return b_; }
  Matrix forward_logprobs(const MixedSequence& seq) const override;
  SpanGradient backward_span(const MixedSequence& seq, const Matrix& weights) const override;
  std::uint64_t parameter_hash() const override;
  nlohmann::json parameters_json() const override;

 private:
  Matrix E_;     // V×H
  Matrix U_;     // H×V
  RowVector b_;  // 1×V
};

struct TransformerParams {
  Matrix E;    // V×H token embeddings
  Matrix pos;  // Lmax×H learned positions
  Matrix Wq, Wk, Wv, Wo;  // H×H
  Matrix W1;   // H×F
  RowVector b1;
  Matrix W2;   // F×H
  RowVector b2;
  Matrix Wout; // H×V
  RowVector bout;

  // Visits every tensor in a fixed order; used for optimizers, hashing, IO.
  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }
  TransformerParams zeros_like() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& s, F& f) {
    f("E", s.E); f("pos", s.pos); f("Wq", s.Wq); f("Wk", s.Wk); f("Wv", s.Wv); f("Wo", s.Wo);
    f("W1", s.W1); f("b1", s.b1); f("W2", s.W2); f("b2", s.b2); f("Wout", s.Wout); f("bout", s.bout);
  }
};

// One pre-norm-free block: causal single-head attention then a tanh MLP,
// both residual, followed by an untied output projection.
class TransformerLM final : public ToyCausalLM {
 public:
  TransformerLM(Vocabulary vocab, std::size_t hidden, std::size_t ffn, std::size_t context_limit,
                std::uint64_t seed, double init_scale = 0.3);
  TransformerLM(Vocabulary vocab, TransformerParams params, std::uint64_t seed);

  Kind kind() const override { return Kind::kTransformer; }
  const Matrix& embeddings() const override { return params_.E; }
  const TransformerParams& params() const { return params_; }
  Matrix forward_logprobs(const MixedSequence& seq) const override;
  SpanGradient backward_span(const MixedSequence& seq, const Matrix& weights) const override;
  std::uint64_t parameter_hash() const override;
  nlohmann::json parameters_json() const override;

  // Accumulates dθ of Σ weights⊙logprobs into `grads`; returns logprobs.
  // Only fit_toy_backend uses this, on a model it still owns.
  Matrix backward_params(const MixedSequence& seq, const Matrix& weights, TransformerParams& grads) const;
  TransformerParams& mutable_params() { return params_; }

 private:
  struct Tape;
  Tape forward_tape(const MixedSequence& seq) const;
  Matrix backward(const Tape& tape, const Matrix& weights, TransformerParams* grads) const;

  TransformerParams params_;
};

// Versioned JSON checkpoint of θ, vocabulary, kind and seed.
void save_toy_checkpoint(const ToyCausalLM& model, const std::filesystem::path& path);
std::unique_ptr<ToyCausalLM> load_toy_checkpoint(const std::filesystem::path& path);
nlohmann::json toy_checkpoint_json(const ToyCausalLM& model);
std::unique_ptr<ToyCausalLM> toy_from_checkpoint_json(const nlohmann::json& j);

// Adapter discovery by name. The bundled toy kinds are pre-registered
// ("toy_bigram", "toy_transformer", "toy_uniform"); external adapters can
// register factories for their own names.
using BackendFactory = std::function<std::unique_ptr<ModelBackend>(const nlohmann::json& options)>;
void register_backend(const std::string& adapter, BackendFactory factory);
std::unique_ptr<ModelBackend> make_backend(const std::string& adapter, const nlohmann::json& options);
std::vector<std::string> registered_backends();

}  // namespace calsuffix
