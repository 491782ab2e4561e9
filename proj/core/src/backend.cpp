#include "calsuffix/backend.hpp"

#include <fstream>
#include <map>
#include <mutex>

#include <nlohmann/json.hpp>

#include "calsuffix/error.hpp"
#include "calsuffix/hash.hpp"
#include "numeric.hpp"

namespace calsuffix {

using nlohmann::json;

std::optional<TokenId> MixedSequence::token(std::size_t t) const {
  if (t < head.size()) return head[t];
  if (t < span_end()) return std::nullopt;
  const auto i = t - span_end();
  if (i < tail.size()) return tail[i];
  throw std::out_of_range("sequence position out of range");
}

Matrix masked_ce_weights(const MixedSequence& seq, std::span<const std::size_t> positions,
                         std::size_t vocab_size, double scale) {
  Matrix w = Matrix::Zero(static_cast<Eigen::Index>(seq.length()), static_cast<Eigen::Index>(vocab_size));
  for (std::size_t t : positions) {
    if (t == 0 || t >= seq.length()) throw std::out_of_range("label position must lie in [1, L)");
    const auto id = seq.token(t);
    if (!id) throw std::invalid_argument("label position falls inside the soft span");
    w(static_cast<Eigen::Index>(t - 1), *id) -= scale;
  }
  return w;
}

Matrix grad_wrt_soft_span(const ModelBackend& backend, const MixedSequence& seq,
                          std::span<const std::size_t> positions) {
  return backend.backward_span(seq, masked_ce_weights(seq, positions, backend.vocab().size())).span;
}

void ToyCausalLM::check_length(const MixedSequence& seq) const {
  if (seq.length() == 0) throw std::invalid_argument("empty sequence");
  if (seq.length() > context_limit_) throw LengthExceeded(seq.length(), context_limit_);
}

Matrix ToyCausalLM::embed(const MixedSequence& seq) const {
  const Matrix& E = embeddings();
  if (seq.has_span() && seq.span.cols() != E.cols()) {
    throw std::invalid_argument("soft span width does not match hidden size");
  }
  Matrix X(static_cast<Eigen::Index>(seq.length()), E.cols());
  Eigen::Index r = 0;
  for (TokenId id : seq.head) X.row(r++) = E.row(id);
  for (Eigen::Index i = 0; i < seq.span.rows(); ++i) X.row(r++) = seq.span.row(i);
  for (TokenId id : seq.tail) X.row(r++) = E.row(id);
  return X;
}

// ---------------------------------------------------------------------------
// BigramLM

BigramLM::BigramLM(Vocabulary vocab, std::size_t hidden, std::uint64_t seed, double init_scale,
                   std::size_t context_limit)
    : ToyCausalLM("toy_bigram", std::move(vocab), context_limit, seed) {
  const auto V = static_cast<Eigen::Index>(vocab_.size());
  const auto H = static_cast<Eigen::Index>(hidden);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  E_.resize(V, H);
  U_.resize(H, V);
  for (Eigen::Index i = 0; i < E_.size(); ++i) E_.data()[i] = normal(rng);
  const double s = init_scale / std::sqrt(static_cast<double>(H));
  for (Eigen::Index i = 0; i < U_.size(); ++i) U_.data()[i] = s * normal(rng);
  b_ = RowVector::Zero(V);
}

BigramLM::BigramLM(Vocabulary vocab, Matrix embeddings, Matrix out, RowVector bias, std::uint64_t seed,
                   std::size_t context_limit)
    : ToyCausalLM("toy_bigram", std::move(vocab), context_limit, seed),
      E_(std::move(embeddings)),
      U_(std::move(out)),
      b_(std::move(bias)) {
  const auto V = static_cast<Eigen::Index>(vocab_.size());
  if (E_.rows() != V || U_.cols() != V || U_.rows() != E_.cols() || b_.size() != V) {
    throw ConfigError("bigram parameter shapes do not match the vocabulary");
  }
}

BigramLM BigramLM::uniform(Vocabulary vocab, std::size_t hidden) {
  BigramLM m(std::move(vocab), hidden, 0);
  m.U_.setZero();
  m.set_name("toy_uniform");
  return m;
}

Matrix BigramLM::forward_logprobs(const MixedSequence& seq) const {
  check_length(seq);
  Matrix logits = embed(seq) * U_;
  logits.rowwise() += b_;
  return detail::log_softmax_rows(logits);
}

SpanGradient BigramLM::backward_span(const MixedSequence& seq, const Matrix& weights) const {
  SpanGradient out;
  out.logprobs = forward_logprobs(seq);
  const Matrix dlogits = detail::log_softmax_backward(out.logprobs, weights);
  const Matrix dX = dlogits * U_.transpose();
  out.span = dX.middleRows(static_cast<Eigen::Index>(seq.span_begin()), seq.span.rows());
  return out;
}

std::uint64_t BigramLM::parameter_hash() const {
  Fnv1a h;
  h.update(E_);
  h.update(U_);
  h.update(Matrix(b_));
  return h.digest();
}

namespace {

json matrix_json(const Matrix& m) {
  json data = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ConfigError("matrix data size mismatch");
  Matrix m(rows, cols);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[i++].get<double>();
  }
  return m;
}

json vocab_json(const Vocabulary& v) {
  json j;
  j["tokens"] = v.tokens();
  const auto& sp = v.specials();
  if (sp.bos) j["bos"] = *sp.bos;
  if (sp.eos) j["eos"] = *sp.eos;
  if (sp.pad) j["pad"] = *sp.pad;
  json control = json::array();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    if (v.is_control(id) && id != sp.bos && id != sp.eos && id != sp.pad) control.push_back(id);
  }
  j["control"] = std::move(control);
  return j;
}

Vocabulary vocab_from_json(const json& j) {
  Vocabulary::Specials sp;
  if (j.contains("bos")) sp.bos = j["bos"].get<TokenId>();
  if (j.contains("eos")) sp.eos = j["eos"].get<TokenId>();
  if (j.contains("pad")) sp.pad = j["pad"].get<TokenId>();
  return Vocabulary(j.at("tokens").get<std::vector<std::string>>(), sp,
                    j.value("control", std::vector<TokenId>{}));
}

constexpr int kCheckpointVersion = 1;

}  // namespace

json BigramLM::parameters_json() const {
  return {{"E", matrix_json(E_)}, {"U", matrix_json(U_)}, {"b", matrix_json(Matrix(b_))}};
}

// ---------------------------------------------------------------------------
// Checkpoints

json toy_checkpoint_json(const ToyCausalLM& model) {
  json j;
  j["format"] = "calsuffix.toy_backend";
  j["version"] = kCheckpointVersion;
  j["kind"] = model.kind() == ToyCausalLM::Kind::kBigram ? "bigram" : "transformer";
  j["name"] = model.name();
  j["seed"] = model.seed();
  j["context_limit"] = model.context_limit();
  j["vocab"] = vocab_json(model.vocab());
  j["params"] = model.parameters_json();
  return j;
}

std::unique_ptr<ToyCausalLM> toy_from_checkpoint_json(const json& j) {
  if (j.value("format", "") != "calsuffix.toy_backend") throw ConfigError("not a toy backend checkpoint");
  if (j.value("version", 0) != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
  auto vocab = vocab_from_json(j.at("vocab"));
  const auto seed = j.at("seed").get<std::uint64_t>();
  const auto limit = j.at("context_limit").get<std::size_t>();
  const auto& p = j.at("params");
  std::unique_ptr<ToyCausalLM> model;
  if (j.at("kind") == "bigram") {
    model = std::make_unique<BigramLM>(std::move(vocab), matrix_from_json(p.at("E")), matrix_from_json(p.at("U")),
                                       RowVector(matrix_from_json(p.at("b"))), seed, limit);
  } else if (j.at("kind") == "transformer") {
    TransformerParams params;
    params.for_each([&](const char* name, auto& m) {
      using M = std::remove_reference_t<decltype(m)>;
      m = M(matrix_from_json(p.at(name)));
    });
    if (static_cast<std::size_t>(params.pos.rows()) != limit) throw ConfigError("position table size mismatch");
    model = std::make_unique<TransformerLM>(std::move(vocab), std::move(params), seed);
  } else {
    throw ConfigError("unknown toy backend kind");
  }
  model->set_name(j.at("name").get<std::string>());
  return model;
}

void save_toy_checkpoint(const ToyCausalLM& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << toy_checkpoint_json(model).dump() << '\n';
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

std::unique_ptr<ToyCausalLM> load_toy_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  return toy_from_checkpoint_json(j);
}

json TransformerLM::parameters_json() const {
  json j;
  params_.for_each([&](const char* name, const auto& m) { j[name] = matrix_json(Matrix(m)); });
  return j;
}

// ---------------------------------------------------------------------------
// Registry

namespace {

Vocabulary named_vocab(const json& options) {
  const auto name = options.value("vocab", std::string("toy"));
  if (name == "toy") return toy_vocabulary();
  if (name == "tiny") return tiny_vocabulary();
  throw ConfigError("unknown bundled vocabulary \"" + name + "\"");
}

struct Registry {
  std::mutex mu;
  std::map<std::string, BackendFactory> factories;

  Registry() {
    factories["toy_bigram"] = [](const json& o) -> std::unique_ptr<ModelBackend> {
      auto m = std::make_unique<BigramLM>(named_vocab(o), o.value("hidden", std::size_t{16}),
                                          o.value("seed", std::uint64_t{0}), o.value("init_scale", 1.0),
                                          o.value("context_limit", std::size_t{256}));
      return m;
    };
    factories["toy_uniform"] = [](const json& o) -> std::unique_ptr<ModelBackend> {
      return std::make_unique<BigramLM>(BigramLM::uniform(named_vocab(o), o.value("hidden", std::size_t{16})));
    };
    factories["toy_transformer"] = [](const json& o) -> std::unique_ptr<ModelBackend> {
      return std::make_unique<TransformerLM>(named_vocab(o), o.value("hidden", std::size_t{32}),
                                             o.value("ffn", std::size_t{64}),
                                             o.value("context_limit", std::size_t{128}),
                                             o.value("seed", std::uint64_t{0}), o.value("init_scale", 0.3));
    };
  }
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

void register_backend(const std::string& adapter, BackendFactory factory) {
  auto& r = registry();
  std::lock_guard lock(r.mu);
  r.factories[adapter] = std::move(factory);
}

std::unique_ptr<ModelBackend> make_backend(const std::string& adapter, const json& options) {
  auto& r = registry();
  BackendFactory f;
  {
    std::lock_guard lock(r.mu);
    auto it = r.factories.find(adapter);
    if (it == r.factories.end()) throw ConfigError("no backend adapter named \"" + adapter + "\"");
    f = it->second;
  }
  return f(options);
}

std::vector<std::string> registered_backends() {
  auto& r = registry();
  std::lock_guard lock(r.mu);
  std::vector<std::string> names;
  for (const auto& [k, _] : r.factories) names.push_back(k);
  return names;
}

}  // namespace calsuffix
