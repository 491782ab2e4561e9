#include <doctest.h>

#include <algorithm>

#include "calsuffix/scoring.hpp"
#include "calsuffix/toy.hpp"
#include "oracles.hpp"

using namespace calsuffix;

namespace {

TaskSpec two_surface_task() { return sentiment_fixture(8, 8, 1); }

// [BOS] prompt suffix prefix surface, built by hand.
TokenIds concat(std::initializer_list<TokenIds> parts) {
  TokenIds out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// −Σ log p over the trailing n tokens, from raw forward rows.
double tail_ce(const ModelBackend& m, const TokenIds& ids, std::size_t n) {
  const Matrix lp = m.forward_logprobs(MixedSequence::hard(ids));
  double ce = 0.0;
  for (std::size_t t = ids.size() - n; t < ids.size(); ++t) ce -= lp(static_cast<Eigen::Index>(t - 1), ids[t]);
  return ce;
}

}  // namespace

TEST_SUITE("scoring") {
  TEST_CASE("masked CE under the uniform model") {
    const auto model = BigramLM::uniform(toy_vocabulary(), 4);
    const auto seq = MixedSequence::hard({0, 7, 22, 23});
    const std::vector<std::size_t> one = {3}, two = {2, 3};
    CHECK(masked_ce(model, seq, one) == doctest::Approx(std::log(64.0)).epsilon(1e-14));
    CHECK(masked_ce(model, seq, two) == doctest::Approx(2.0 * std::log(64.0)).epsilon(1e-14));
  }

  TEST_CASE("masked CE on a 3-token bigram sequence by hand") {
    const BigramLM model(toy_vocabulary(), 6, 12);
    const TokenIds ids = {0, 28, 41};
    const auto& E = model.embeddings();
    const double expected = -oracle::log_prob(E.row(0) * model.output() + model.bias(), 28) -
                            oracle::log_prob(E.row(28) * model.output() + model.bias(), 41);
    const std::vector<std::size_t> positions = {1, 2};
    CHECK(masked_ce(model, MixedSequence::hard(ids), positions) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(masked_ce(model, MixedSequence::hard(ids), positions) >= 0.0);
  }

  TEST_CASE("null CE ignores the example and the suffix") {
    const TransformerLM model(toy_vocabulary(), 8, 16, 64, 2);
    const TaskSpec spec = two_surface_task();
    const TaskScorer scorer(model, spec);
    const auto prefix = model.vocab().tokenize(spec.answer_prefix);
    const auto surface = model.vocab().tokenize(" yes");
    CHECK(scorer.ce_null(1, 0) == tail_ce(model, concat({{0}, prefix, surface}), 1));
    CHECK(ce_null(model, spec, 1, 0) == scorer.ce_null(1, 0));
  }

  TEST_CASE("context CE with no suffix equals masked CE of w(x) p s") {
    const TransformerLM model(toy_vocabulary(), 8, 16, 64, 2);
    const TaskSpec spec = two_surface_task();
    const auto wrapped = render_prompt(spec.validation[0], spec, {}, model.vocab());
    const auto prefix = model.vocab().tokenize(spec.answer_prefix);
    for (std::size_t y = 0; y < 2; ++y) {
      for (std::size_t s = 0; s < 2; ++s) {
        const auto surface = model.vocab().tokenize(spec.surfaces[y][s]);
        const double expected = tail_ce(model, concat({{0}, wrapped.ids, prefix, surface}), surface.size());
        CHECK(ce_ctx(model, wrapped, {}, spec, y, s) == doctest::Approx(expected).epsilon(1e-12));
      }
    }
    // Hard suffix tokens sit between the prompt and the prefix.
    const TokenIds suffix = {41, 42};
    const auto surface = model.vocab().tokenize(" no");
    const double expected = tail_ce(model, concat({{0}, wrapped.ids, suffix, prefix, surface}), 1);
    CHECK(ce_ctx(model, wrapped, suffix, spec, 0, 0) == doctest::Approx(expected).epsilon(1e-12));
  }

  TEST_CASE("context-independent model: ctx CE equals null CE") {
    const BigramLM model(toy_vocabulary(), 8, 3);
    const TaskSpec spec = two_surface_task();
    const TaskScorer scorer(model, spec);
    for (const auto& ex : spec.validation) {
      const auto prompt = render_prompt(ex, spec, {}, model.vocab());
      for (std::size_t y = 0; y < 2; ++y) {
        for (std::size_t s = 0; s < 2; ++s) {
          CHECK(std::abs(scorer.ce_ctx(prompt.ids, TokenIds{30, 31}, y, s) - scorer.ce_null(y, s)) <= 1e-12);
        }
      }
    }
  }

  TEST_CASE("softmin aggregate") {
    const std::vector<double> single = {3.25};
    CHECK(softmin_aggregate(single) == 3.25);
    const std::vector<double> zeros = {0.0, 0.0};
    CHECK(std::abs(softmin_aggregate(zeros) + std::log(2.0)) <= 1e-12);
    const std::vector<double> gap = {0.0, 50.0};
    const double expected = -std::log1p(std::exp(-50.0));  // ≈ −1.93e−22
    CHECK(softmin_aggregate(gap) == doctest::Approx(expected).epsilon(1e-9));
    CHECK(softmin_aggregate(gap) < 0.0);
    CHECK(softmin_aggregate(gap) > -2e-22);
    std::vector<double> v = {1.5, -0.25, 4.0, 0.75};
    const double a = softmin_aggregate(v);
    CHECK(a <= *std::min_element(v.begin(), v.end()));
    CHECK(a == doctest::Approx(oracle::softmin(v)).epsilon(1e-13));
    std::reverse(v.begin(), v.end());
    CHECK(softmin_aggregate(v) == doctest::Approx(a).epsilon(1e-15));
    const std::vector<double> big = {1000.0, 1001.0};
    CHECK(std::isfinite(softmin_aggregate(big)));
    const auto w = softmin_weights(v);
    double total = 0.0;
    for (double x : w) total += x;
    CHECK(total == doctest::Approx(1.0));
  }

  TEST_CASE("CalCE identities") {
    const BigramLM model(toy_vocabulary(), 8, 3);
    const TaskSpec spec = two_surface_task();
    const TaskScorer scorer(model, spec);
    const auto prompt = render_prompt(spec.validation[1], spec, {}, model.vocab());
    CHECK(std::abs(scorer.calce(prompt.ids, {}, 0) + std::log(2.0)) <= 1e-12);
    CHECK(std::abs(scorer.calce(prompt.ids, TokenIds{40, 41, 42}, 1) + std::log(2.0)) <= 1e-12);

    TaskSpec single = spec;
    single.surfaces = {{" no"}, {" yes"}};
    const TaskScorer one(model, single);
    CHECK(std::abs(one.calce(prompt.ids, {}, 1)) <= 1e-12);
  }

  TEST_CASE("CalCE matches a term-by-term re-implementation") {
    const TransformerLM model(toy_vocabulary(), 8, 16, 64, 21, 0.8);
    const TaskSpec spec = two_surface_task();
    const auto& vocab = model.vocab();
    const auto prefix = vocab.tokenize(spec.answer_prefix);
    const TokenIds suffix = {44, 29};
    for (std::size_t i = 0; i < 3; ++i) {
      const auto wrapped = render_prompt(spec.validation[i], spec, {}, vocab);
      for (std::size_t y = 0; y < 2; ++y) {
        std::vector<double> diffs;
        for (const auto& s : spec.surfaces[y]) {
          const auto surf = vocab.tokenize(s);
          diffs.push_back(tail_ce(model, concat({{0}, wrapped.ids, suffix, prefix, surf}), surf.size()) -
                          tail_ce(model, concat({{0}, prefix, surf}), surf.size()));
        }
        CHECK(calce(model, wrapped, suffix, spec, y) == doctest::Approx(oracle::softmin(diffs)).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("CalLogP fields") {
    const TransformerLM model(toy_vocabulary(), 8, 16, 64, 21, 0.8);
    const TaskSpec spec = two_surface_task();
    const auto wrapped = render_prompt(spec.validation[2], spec, {}, model.vocab());
    const auto scores = cal_logp(model, wrapped, {}, spec);
    REQUIRE(scores.size() == 2);
    for (const auto& s : scores) {
      CHECK(s.ell_cal == s.ell_ctx - s.ell_null);
      const double lse = std::log(std::exp(-s.ce_ctx[0]) + std::exp(-s.ce_ctx[1]));
      CHECK(s.ell_ctx == doctest::Approx(lse).epsilon(1e-12));
    }
    TaskSpec single = spec;
    single.surfaces = {{" no"}, {" yes"}};
    for (const auto& s : cal_logp(model, wrapped, {}, single)) CHECK(s.ell_ctx == -s.ce_ctx[0]);

    const BigramLM flat(toy_vocabulary(), 8, 3);
    for (const auto& s : cal_logp(flat, wrapped, TokenIds{33}, spec)) CHECK(std::abs(s.ell_cal) <= 1e-12);
  }

  TEST_CASE("prediction rule and ties") {
    std::vector<ScoredLabel> s(2);
    s[1].label = 1;
    s[0].ell_cal = -0.1;
    s[1].ell_cal = -0.9;
    CHECK(predict_label(s) == 0);
    s[1].ell_cal = -0.1;
    CHECK(predict_label(s) == 0);
    s[1].ell_cal = 0.3;
    CHECK(predict_label(s) == 1);
    s[0].ell_ctx = 2.0;
    s[1].ell_ctx = 1.0;
    CHECK(predict_label(s, PredictionRule::kRaw) == 0);
  }

  TEST_CASE("prediction is invariant to shared shifts") {
    const TransformerLM model(toy_vocabulary(), 8, 16, 64, 21, 0.8);
    const TaskSpec spec = two_surface_task();
    for (std::size_t i = 0; i < 4; ++i) {
      const auto wrapped = render_prompt(spec.validation[i], spec, {}, model.vocab());
      auto scores = cal_logp(model, wrapped, {}, spec);
      const auto before = predict_label(scores);
      const auto before_raw = predict_label(scores, PredictionRule::kRaw);
      for (auto& s : scores) {
        s.ell_ctx += 3.7;
        s.ell_null += 3.7;
        s.ell_cal = s.ell_ctx - s.ell_null;
      }
      CHECK(predict_label(scores) == before);
      CHECK(predict_label(scores, PredictionRule::kRaw) == before_raw);
    }
  }

  TEST_CASE("mean CalLogP of a context-independent backend is zero") {
    const BigramLM model(toy_vocabulary(), 8, 7);
    const TaskSpec spec = two_surface_task();
    double sum = 0.0;
    for (const auto& ex : spec.validation) {
      const auto wrapped = render_prompt(ex, spec, {}, model.vocab());
      sum += cal_logp(model, wrapped, {}, spec)[ex.label].ell_cal;
    }
    CHECK(std::abs(sum / static_cast<double>(spec.validation.size())) <= 1e-9);
  }

  TEST_CASE("uncalibrated CalCE drops the null term") {
    const TransformerLM model(toy_vocabulary(), 8, 16, 64, 21, 0.8);
    const TaskSpec spec = two_surface_task();
    const TaskScorer cal(model, spec, Calibration::kCalibrated);
    const TaskScorer raw(model, spec, Calibration::kUncalibrated);
    const auto prompt = render_prompt(spec.validation[0], spec, {}, model.vocab());
    std::vector<double> ce = {raw.ce_ctx(prompt.ids, {}, 1, 0), raw.ce_ctx(prompt.ids, {}, 1, 1)};
    CHECK(raw.calce(prompt.ids, {}, 1) == doctest::Approx(oracle::softmin(ce)).epsilon(1e-12));
    CHECK(raw.calce(prompt.ids, {}, 1) != cal.calce(prompt.ids, {}, 1));
  }

  TEST_CASE("long prompts are truncated from the left after BOS") {
    const TransformerLM model(toy_vocabulary(), 8, 16, 12, 2);
    const TaskSpec spec = two_surface_task();
    const TaskScorer scorer(model, spec);
    const auto prompt = model.vocab().tokenize("Review: the movie was very good and fun");
    // 1 + 9 prompt + 5 prefix + 1 surface = 16 > 12.
    CHECK(scorer.truncation(prompt, {}) == 4);
    const auto seq = context_sequence(model, prompt, {}, scorer.prefix_ids(), scorer.surfaces().surface_ids[1][0]);
    CHECK(seq.truncated == 4);
    CHECK(seq.seq.length() == 12);
    CHECK(seq.seq.head.front() == 0);
    CHECK(std::isfinite(scorer.calce(prompt, {}, 1)));
  }
}
