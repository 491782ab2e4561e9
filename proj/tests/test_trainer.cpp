#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <limits>

#include "calsuffix/error.hpp"
#include "calsuffix/toy.hpp"
#include "calsuffix/trainer.hpp"
#include "oracles.hpp"

using namespace calsuffix;

namespace {

// Delegates to another backend; while `poison` is set every span gradient
// and every forward pass through a soft span comes back as NaN.
class PoisonBackend final : public ModelBackend {
 public:
  explicit PoisonBackend(const ModelBackend& inner) : inner_(inner) {}
  std::atomic<bool> poison{false};

  const std::string& name() const override { return inner_.name(); }
  const Vocabulary& vocab() const override { return inner_.vocab(); }
  const Matrix& embeddings() const override { return inner_.embeddings(); }
  std::size_t context_limit() const override { return inner_.context_limit(); }
  Matrix forward_logprobs(const MixedSequence& seq) const override {
    Matrix out = inner_.forward_logprobs(seq);
    if (poison && seq.has_span()) out.setConstant(std::numeric_limits<double>::quiet_NaN());
    return out;
  }
  SpanGradient backward_span(const MixedSequence& seq, const Matrix& weights) const override {
    SpanGradient g = inner_.backward_span(seq, weights);
    if (poison) {
      g.logprobs.setConstant(std::numeric_limits<double>::quiet_NaN());
      g.span.setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    return g;
  }
  std::uint64_t parameter_hash() const override { return inner_.parameter_hash(); }

 private:
  const ModelBackend& inner_;
};

struct Setup {
  std::vector<TaskSpec> tasks{sentiment_fixture(32, 8)};
  TransformerLM model{toy_vocabulary(), 8, 16, 64, 3, 0.5};
  ForbidMask mask = mixture_mask(toy_vocabulary(), tasks, MaskPolicy::standard());
};

TrainConfig small_config() {
  TrainConfig c;
  c.K = 2;
  c.steps = 20;
  c.batch_size = 4;
  c.warmup_steps = 5;
  c.seed = 11;
  return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("calsuffix_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

double loss_fd_error(const ModelBackend& backend, const std::vector<TaskSpec>& tasks, const ForbidMask& mask,
                     double lambda_H) {
  HarmObjective objective(backend, tasks);
  std::mt19937_64 rng(4);
  const auto batch = sample_minibatch(tasks, 3, rng);
  TrainConfig config = small_config();
  config.lambda_H = lambda_H;
  const auto V = backend.vocab().size();
  auto W = SuffixLogits::gaussian(2, V, 1.0, rng);
  const Matrix noise = sample_gumbel(2, V, rng);
  const double tau = 0.95;
  const auto fl = compute_full_loss(objective, batch, W, mask, noise, tau, config);
  const Matrix numeric = oracle::central_diff(
      [&](const Matrix& x) {
        return compute_full_loss(objective, batch, SuffixLogits{x}, mask, noise, tau, config).loss;
      },
      W.W);
  return oracle::max_relative_error(fl.grad, numeric);
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    c.steps = 1000;
    CHECK(lr_at_step(1, c) == doctest::Approx(5e-2 / 50.0).epsilon(1e-15));
    CHECK(lr_at_step(25, c) == doctest::Approx(2.5e-2).epsilon(1e-15));
    CHECK(lr_at_step(50, c) == 5e-2);
    CHECK(lr_at_step(525, c) == doctest::Approx(2.5e-2).epsilon(1e-12));
    CHECK(std::abs(lr_at_step(1000, c)) <= 1e-18);
    for (std::size_t t = 51; t < 1000; ++t) CHECK(lr_at_step(t + 1, c) < lr_at_step(t, c));
  }

  TEST_CASE("clip and guard") {
    GuardStats stats;
    Matrix small(1, 2);
    small << 0.3, 0.4;
    CHECK_FALSE(clip_and_guard(small, 1.0, stats));
    CHECK(small.norm() == doctest::Approx(0.5));
    Matrix big(1, 2);
    big << 3.0, 4.0;
    CHECK_FALSE(clip_and_guard(big, 1.0, stats));
    CHECK(big.norm() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(big(0, 0) == doctest::Approx(0.6));
    Matrix bad(2, 2);
    bad << 1.0, std::numeric_limits<double>::quiet_NaN(), 2.0, 3.0;
    CHECK(clip_and_guard(bad, 1.0, stats));
    CHECK(bad.isZero(0.0));
    CHECK(stats.tripped == 1);
  }

  TEST_CASE("config defaults and validation") {
    const TrainConfig c;
    CHECK(c.lr == 5e-2);
    CHECK(c.warmup_steps == 50);
    CHECK(c.batch_size == 32);
    CHECK(c.clip_norm == 1.0);
    CHECK(c.tau0 == 1.0);
    CHECK(c.tau_min == 0.9);
    CHECK(c.lambda_F == 0.0);
    CHECK_NOTHROW(c.validate());
    TrainConfig bad = c;
    bad.K = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.tau_min = 2.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    const auto round = TrainConfig::from_json(c.to_json());
    CHECK(round.to_json() == c.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rate", 0.1}}), ConfigError);
    CHECK(TrainConfig::from_json({{"K", 7}}).K == 7);
  }

  TEST_CASE("full loss gradient matches central differences") {
    Setup s;
    CHECK(loss_fd_error(s.model, s.tasks, s.mask, 0.01) <= 1e-5);
    CHECK(loss_fd_error(s.model, s.tasks, s.mask, 0.0) <= 1e-5);
    const BigramLM bigram(toy_vocabulary(), 8, 2);
    CHECK(loss_fd_error(bigram, s.tasks, s.mask, 0.01) <= 1e-5);
  }

  TEST_CASE("harm gradient vanishes on a context-independent model") {
    Setup s;
    const BigramLM bigram(toy_vocabulary(), 8, 2);
    HarmObjective objective(bigram, s.tasks);
    std::mt19937_64 rng(2);
    const auto batch = sample_minibatch(s.tasks, 8, rng);
    TrainConfig config = small_config();
    config.lambda_H = 0.0;
    const auto W = SuffixLogits::gaussian(2, 64, 1.0, rng);
    const auto fl = compute_full_loss(objective, batch, W, s.mask, sample_gumbel(2, 64, rng), 1.0, config);
    CHECK(fl.grad.cwiseAbs().maxCoeff() <= 1e-12);
  }

  TEST_CASE("training leaves the model untouched and is deterministic") {
    Setup s;
    const auto before = s.model.parameter_hash();
    const auto a = train_suffix(small_config(), s.tasks, s.model, s.mask);
    CHECK(s.model.parameter_hash() == before);
    const auto b = train_suffix(small_config(), s.tasks, s.model, s.mask);
    CHECK(artifact_to_json(a.artifact).dump() == artifact_to_json(b.artifact).dump());
    CHECK(a.log.size() == 20);
    CHECK(a.guard_count == 0);
    for (const auto& rec : a.log) {
      CHECK(std::isfinite(rec.loss));
      CHECK(rec.forbidden_mass == 0.0);
      CHECK(rec.grad_norm <= 1.0 + 1e-12);
      CHECK(rec.tau >= 0.9);
    }
    for (TokenId id : a.artifact.token_ids) CHECK_FALSE(s.mask.forbidden(id));

    TrainConfig other = small_config();
    other.seed = 12;
    const auto c = train_suffix(other, s.tasks, s.model, s.mask);
    CHECK(c.logits.W != a.logits.W);
  }

  TEST_CASE("resume reproduces the uninterrupted run") {
    Setup s;
    const auto dir = scratch_dir("resume");
    const auto full = train_suffix(small_config(), s.tasks, s.model, s.mask);

    TrainOptions first;
    first.checkpoint_dir = dir;
    first.stop_after = 8;
    const auto part = train_suffix(small_config(), s.tasks, s.model, s.mask, first);
    CHECK(part.log.size() == 8);
    const auto ckpt_path = dir / "checkpoint_8.json";
    REQUIRE(std::filesystem::exists(ckpt_path));
    std::ifstream in(ckpt_path);
    const auto ckpt = nlohmann::json::parse(in);

    TrainOptions second;
    second.resume_from = ckpt;
    const auto rest = train_suffix(small_config(), s.tasks, s.model, s.mask, second);
    CHECK(rest.log.size() == 12);
    CHECK(rest.logits.W == full.logits.W);
    CHECK(rest.artifact.token_ids == full.artifact.token_ids);
    CHECK(rest.artifact.metrics == full.artifact.metrics);
  }

  TEST_CASE("periodic checkpoints") {
    Setup s;
    const auto dir = scratch_dir("periodic");
    TrainConfig c = small_config();
    c.checkpoint_every = 5;
    TrainOptions o;
    o.checkpoint_dir = dir;
    train_suffix(c, s.tasks, s.model, s.mask, o);
    for (int step : {5, 10, 15, 20}) CHECK(std::filesystem::exists(dir / ("checkpoint_" + std::to_string(step) + ".json")));
    CHECK_FALSE(std::filesystem::exists(dir / "checkpoint_3.json"));
  }

  TEST_CASE("transient non-finite steps are skipped") {
    Setup s;
    PoisonBackend poisoned(s.model);
    TrainOptions o;
    std::vector<Matrix> seen_W;
    o.on_step = [&](const TrainLogRecord& rec) { poisoned.poison = rec.step >= 5 && rec.step < 8; };
    const auto r = train_suffix(small_config(), s.tasks, poisoned, s.mask, o);
    CHECK(r.guard_count == 3);
    for (const auto& rec : r.log) {
      const bool expect = rec.step >= 6 && rec.step <= 8;
      CHECK(rec.guarded == expect);
      const auto j = rec.to_json();
      CHECK(j.contains("loss") == !expect);
      if (!expect) CHECK(std::isfinite(j["loss"].get<double>()));
    }
    CHECK(r.logits.W.allFinite());
  }

  TEST_CASE("persistent non-finite loss aborts with the last good checkpoint") {
    Setup s;
    PoisonBackend poisoned(s.model);
    const auto dir = scratch_dir("abort");
    TrainOptions o;
    o.checkpoint_dir = dir;
    o.on_step = [&](const TrainLogRecord& rec) {
      if (rec.step == 4) poisoned.poison = true;
    };
    CHECK_THROWS_AS(train_suffix(small_config(), s.tasks, poisoned, s.mask, o), NonFiniteLoss);
    CHECK(std::filesystem::exists(dir / "checkpoint_4.json"));
  }

  TEST_CASE("checkpoint shape mismatch is rejected") {
    Setup s;
    const auto r = train_suffix(small_config(), s.tasks, s.model, s.mask);
    TrainConfig c = small_config();
    c.K = 3;
    TrainOptions o;
    o.resume_from = r.last_checkpoint;
    CHECK_THROWS_AS(train_suffix(c, s.tasks, s.model, s.mask, o), ConfigError);
  }

  TEST_CASE("batch CalCE rises over training") {
    const std::vector<TaskSpec> tasks = {tiny_fixture()};
    const TransformerLM model(tiny_vocabulary(), 8, 16, 32, 7, 1.0);
    const auto mask = mixture_mask(model.vocab(), tasks, MaskPolicy::standard());
    TrainConfig c;
    c.K = 2;
    c.steps = 300;
    c.batch_size = 16;
    const auto r = train_suffix(c, tasks, model, mask);
    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < 50; ++i) {
      early += r.log[i].mean_calce / 50.0;
      late += r.log[r.log.size() - 1 - i].mean_calce / 50.0;
    }
    CHECK(late > early);
  }

  TEST_CASE("AdamW first step moves each coordinate by about lr") {
    AdamW opt(1, 3, 0.9, 0.999, 1e-8, 0.0);
    Matrix p = Matrix::Zero(1, 3);
    Matrix g(1, 3);
    g << 2.0, -0.5, 0.0;
    opt.step(p, g, 0.1);
    CHECK(p(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(p(0, 1) == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(p(0, 2) == 0.0);
  }
}
