#include "calsuffix/toy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include <nlohmann/json.hpp>

#include "calsuffix/error.hpp"
#include "numeric.hpp"

namespace calsuffix {

namespace {

TaskSpec yes_no_spec(std::string name, std::vector<std::string> fields, std::string template_text,
                     std::string prefix) {
  TaskSpec spec;
  spec.name = std::move(name);
  spec.labels = {"no", "yes"};
  spec.surfaces = {{" no", " No"}, {" yes", " Yes"}};
  spec.fields = std::move(fields);
  spec.template_text = std::move(template_text);
  spec.answer_prefix = std::move(prefix);
  spec.wrapper = WrapperStyle::kRaw;
  return spec;
}

void split_into(TaskSpec& spec, std::vector<Example> pool, std::size_t n_train, std::size_t n_validation,
                std::uint64_t seed) {
  if (pool.size() < n_train + n_validation) {
    throw InsufficientData("fixture " + spec.name + " has only " + std::to_string(pool.size()) + " examples");
  }
  std::mt19937_64 rng(seed);
  // Explicit Fisher-Yates so the order does not depend on the standard library.
  for (std::size_t i = pool.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(pool[i], pool[pick(rng)]);
  }
  for (auto& ex : pool) ex.task_id = spec.name;
  spec.train.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
  spec.validation.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_train),
                         pool.begin() + static_cast<std::ptrdiff_t>(n_train + n_validation));
}

}  // namespace

TaskSpec sentiment_fixture(std::size_t n_train, std::size_t n_validation, std::uint64_t seed) {
  TaskSpec spec = yes_no_spec("toy_sentiment", {"sentence"}, "Review:{sentence}", "\nThe answer is:");
  spec.labels = {"negative", "positive"};
  const std::vector<std::string> subjects = {" the movie", " the film",  " the plot",  " the story", " the acting",
                                             " the music", " this movie", " this film", " it"};
  const std::vector<std::string> intensifiers = {"", " very", " really", " quite"};
  const std::vector<std::vector<std::string>> adjectives = {
      {" bad", " awful", " dull", " boring", " poor"}, {" good", " great", " fun", " superb", " lovely"}};
  std::vector<Example> pool;
  for (std::size_t label = 0; label < 2; ++label) {
    const auto& adj = adjectives[label];
    for (const auto& subj : subjects) {
      for (const auto& a : adj) {
        for (const auto& i : intensifiers) pool.push_back({{{"sentence", subj + " was" + i + a}}, label, {}});
        for (const auto& b : adj) {
          if (a != b) pool.push_back({{{"sentence", subj + " was" + a + " and" + b}}, label, {}});
        }
      }
    }
  }
  split_into(spec, std::move(pool), n_train, n_validation, seed);
  return spec;
}

TaskSpec topic_fixture(std::size_t n_train, std::size_t n_validation, std::uint64_t seed) {
  TaskSpec spec = yes_no_spec("toy_topic", {"passage", "question"}, "Passage:{passage}\nQuestion:{question}?",
                              "\nThe answer is:");
  struct Passage {
    std::string text;
    std::string topic;
  };
  std::vector<Passage> passages;
  for (const std::string food : {" pizza", " soup", " bread"}) {
    passages.push_back({" we had" + food, "food"});
    passages.push_back({" we had the" + food, "food"});
    passages.push_back({" we had a" + food, "food"});
  }
  for (const std::string vehicle : {" car", " train", " bike"}) {
    passages.push_back({" we rode the" + vehicle, vehicle});
    passages.push_back({" we rode a" + vehicle, vehicle});
    passages.push_back({" it was a" + vehicle, vehicle});
  }
  const std::vector<std::pair<std::string, std::string>> questions = {
      {" about food", "food"}, {" about the car", " car"}, {" about the train", " train"},
      {" about the bike", " bike"}, {" is it about food", "food"}, {" is it about the car", " car"},
      {" is it about the train", " train"}, {" is it about the bike", " bike"}};
  std::vector<Example> pool;
  for (const auto& p : passages) {
    for (const auto& [q, topic] : questions) {
      pool.push_back({{{"passage", p.text}, {"question", q}}, p.topic == topic ? 1u : 0u, {}});
    }
  }
  split_into(spec, std::move(pool), n_train, n_validation, seed);
  return spec;
}

TaskSpec tiny_fixture(std::size_t n_train, std::size_t n_validation, std::uint64_t seed) {
  TaskSpec spec = yes_no_spec("tiny", {"text"}, "{text}", ":");
  spec.surfaces = {{" no"}, {" yes"}};
  const std::string letters = "abcdefgh";
  std::vector<Example> pool;
  for (char a : letters) {
    for (char b : letters) {
      for (char c : letters) {
        int low = 0;
        for (char ch : {a, b, c}) low += ch <= 'd' ? 1 : -1;
        std::string text = {' ', a, ' ', b, ' ', c};
        pool.push_back({{{"text", text}}, low > 0 ? 1u : 0u, {}});
      }
    }
  }
  split_into(spec, std::move(pool), n_train, n_validation, seed);
  return spec;
}

void save_jsonl(std::span<const Example> examples, const TaskSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::json j;
    for (const auto& [k, v] : ex.fields) j[k] = v;
    j["label"] = spec.labels.at(ex.label);
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

double task_accuracy(const ModelBackend& backend, const TaskSpec& spec, std::span<const Example> examples,
                     const SuffixInput& suffix, PredictionRule rule) {
  if (examples.empty()) return 0.0;
  TaskScorer scorer(backend, spec);
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const auto prompt = render_prompt(ex, spec, {}, backend.vocab());
    const auto scores = scorer.cal_logp(prompt.ids, suffix);
    if (predict_label(scores, rule) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

namespace {

struct FlatTensor {
  double* data;
  Eigen::Index size;
};

std::vector<FlatTensor> flatten(TransformerParams& p) {
  std::vector<FlatTensor> out;
  p.for_each([&](const char*, auto& m) { out.push_back({m.data(), m.size()}); });
  return out;
}

// log Σ_s exp(−ce_s) and its softmax weights.
double lse_neg(std::span<const double> ce, std::vector<double>& w) {
  double m = -std::numeric_limits<double>::infinity();
  for (double c : ce) m = std::max(m, -c);
  double z = 0.0;
  for (double c : ce) z += std::exp(-c - m);
  w.resize(ce.size());
  for (std::size_t i = 0; i < ce.size(); ++i) w[i] = std::exp(-ce[i] - m) / z;
  return m + std::log(z);
}

}  // namespace

std::unique_ptr<TransformerLM> fit_toy_backend(std::span<const Example> fixture, const TaskSpec& spec,
                                               std::size_t steps, std::uint64_t seed, const Vocabulary& vocab,
                                               const FitOptions& options) {
  if (fixture.empty()) throw InsufficientData("fit_toy_backend: empty fixture");
  const std::size_t n_train = std::max<std::size_t>(1, fixture.size() / 2);
  const auto train = fixture.subspan(0, n_train);
  const auto validation = fixture.size() > n_train ? fixture.subspan(n_train) : train;

  auto model = std::make_unique<TransformerLM>(vocab, options.hidden, options.ffn, options.context_limit, seed,
                                               options.init_scale);
  model->set_name("toy_fitted");

  const auto V = vocab.size();
  const TokenIds prefix = vocab.tokenize(spec.answer_prefix);
  const LabelSurfaceMap surfaces = spec.surface_map(vocab);
  const std::size_t Y = surfaces.num_labels();
  std::vector<TokenIds> prompts;
  for (const auto& ex : train) prompts.push_back(render_prompt(ex, spec, {}, vocab).ids);

  std::vector<FlatTensor> params = flatten(model->mutable_params());
  std::vector<Eigen::ArrayXd> m1, m2;
  for (const auto& t : params) {
    m1.push_back(Eigen::ArrayXd::Zero(t.size));
    m2.push_back(Eigen::ArrayXd::Zero(t.size));
  }
  std::mt19937_64 rng(seed ^ 0xf17f17f17ULL);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  for (std::size_t step = 1; step <= steps; ++step) {
    TransformerParams grads = model->params().zeros_like();
    const std::size_t B = std::min(options.batch_size, train.size());

    // Null scores are shared across the batch.
    std::vector<std::vector<ScoringSequence>> null_seqs(Y);
    std::vector<std::vector<double>> null_w(Y);
    std::vector<double> ell_null(Y);
    for (std::size_t y = 0; y < Y; ++y) {
      std::vector<double> ce;
      for (const auto& s : surfaces.surface_ids[y]) {
        null_seqs[y].push_back(null_sequence(*model, prefix, s));
        ce.push_back(masked_ce(*model, null_seqs[y].back().seq, null_seqs[y].back().positions));
      }
      ell_null[y] = lse_neg(ce, null_w[y]);
    }
    std::vector<double> null_coef(Y, 0.0);

    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = pick(rng);
      std::vector<std::vector<ScoringSequence>> seqs(Y);
      std::vector<std::vector<double>> w(Y);
      std::vector<double> ell_cal(Y);
      for (std::size_t y = 0; y < Y; ++y) {
        std::vector<double> ce;
        for (const auto& s : surfaces.surface_ids[y]) {
          seqs[y].push_back(context_sequence(*model, prompts[i], {}, prefix, s));
          ce.push_back(masked_ce(*model, seqs[y].back().seq, seqs[y].back().positions));
        }
        ell_cal[y] = lse_neg(ce, w[y]) - ell_null[y];
      }
      std::vector<double> p(Y);
      const double top = *std::max_element(ell_cal.begin(), ell_cal.end());
      double z = 0.0;
      for (std::size_t y = 0; y < Y; ++y) z += (p[y] = std::exp(ell_cal[y] - top));
      for (auto& v : p) v /= z;
      for (std::size_t y = 0; y < Y; ++y) {
        // ∂loss/∂ell_cal(y) for loss = −log softmax(ell_cal)[gold], averaged over the batch.
        const double c = (p[y] - (y == train[i].label ? 1.0 : 0.0)) / static_cast<double>(B);
        null_coef[y] -= c;
        for (std::size_t s = 0; s < seqs[y].size(); ++s) {
          // masked_ce_weights(scale) puts −scale on log p(z_t); we need +c·w.
          const Matrix weights = masked_ce_weights(seqs[y][s].seq, seqs[y][s].positions, V, -c * w[y][s]);
          model->backward_params(seqs[y][s].seq, weights, grads);
        }
      }
    }
    for (std::size_t y = 0; y < Y; ++y) {
      for (std::size_t s = 0; s < null_seqs[y].size(); ++s) {
        const Matrix weights =
            masked_ce_weights(null_seqs[y][s].seq, null_seqs[y][s].positions, V, -null_coef[y] * null_w[y][s]);
        model->backward_params(null_seqs[y][s].seq, weights, grads);
      }
    }

    // backward_params differentiates Σ weights⊙logprobs, which here is the loss itself.
    const std::vector<FlatTensor> g = flatten(grads);
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Eigen::Map<Eigen::ArrayXd> theta(params[k].data, params[k].size);
      Eigen::Map<const Eigen::ArrayXd> grad(g[k].data, g[k].size);
      m1[k] = b1 * m1[k] + (1.0 - b1) * grad;
      m2[k] = b2 * m2[k] + (1.0 - b2) * grad.square();
      theta -= options.lr * (m1[k] / bc1) / ((m2[k] / bc2).sqrt() + eps);
    }
  }

  const double acc = task_accuracy(*model, spec, validation);
  if (acc < options.accuracy_floor) throw FitFailed(acc, options.accuracy_floor);
  return model;
}

}  // namespace calsuffix
