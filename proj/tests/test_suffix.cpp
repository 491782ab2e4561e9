#include <doctest.h>

#include "calsuffix/error.hpp"
#include "calsuffix/suffix.hpp"
#include "calsuffix/toy.hpp"
#include "calsuffix/trainer.hpp"
#include "oracles.hpp"

using namespace calsuffix;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

ForbidMask toy_mask() {
  const auto vocab = toy_vocabulary();
  const std::vector<LabelSurfaceMap> maps = {sentiment_fixture(4, 4).surface_map(vocab)};
  return build_forbid_mask(vocab, maps, MaskPolicy::standard());
}

}  // namespace

TEST_SUITE("suffix") {
  TEST_CASE("mask_logits") {
    const SuffixLogits W{random_matrix(2, 4, 1)};
    CHECK(mask_logits(W, ForbidMask(std::vector<bool>(4, false))) == W.W);

    const SuffixLogits zeros{Matrix::Zero(1, 3)};
    const Matrix masked = mask_logits(zeros, ForbidMask({false, true, false}));
    const Matrix P = gumbel_softmax(masked, Matrix::Zero(1, 3), 1.0);
    CHECK(P(0, 0) == 0.5);
    CHECK(P(0, 1) == 0.0);
    CHECK(P(0, 2) == 0.5);
    CHECK_THROWS_AS(mask_logits(zeros, ForbidMask({true, true, true})), AllForbidden);
  }

  TEST_CASE("label columns of sampled P are exactly zero") {
    const auto vocab = toy_vocabulary();
    const auto mask = toy_mask();
    std::mt19937_64 rng(5);
    RelaxationState state{0.9, 0.9, 0.999, std::mt19937_64(6)};
    for (int rep = 0; rep < 20; ++rep) {
      const auto W = SuffixLogits::gaussian(4, vocab.size(), 3.0, rng);
      const Matrix P = gumbel_softmax_sample(mask_logits(W, mask), state);
      for (const auto* s : {" yes", " no", " Yes", " No"}) {
        CHECK(P.col(*vocab.find(s)).cwiseAbs().maxCoeff() == 0.0);
      }
      for (Eigen::Index k = 0; k < P.rows(); ++k) CHECK(std::abs(P.row(k).sum() - 1.0) <= 1e-9);
    }
  }

  TEST_CASE("noise-free gumbel softmax is a plain softmax") {
    Matrix W(1, 3);
    W << 2.0, 0.0, 0.0;
    RelaxationState state{1.0, 0.9, 0.999, std::mt19937_64(1)};
    const Matrix P = gumbel_softmax_sample(W, state, false);
    const auto expected = oracle::softmax({2.0, 0.0, 0.0});
    for (int v = 0; v < 3; ++v) CHECK(P(0, v) == doctest::Approx(expected[static_cast<std::size_t>(v)]).epsilon(1e-14));
    CHECK(P(0, 0) == doctest::Approx(0.7870).epsilon(1e-4));
    CHECK(P(0, 1) == doctest::Approx(0.1065).epsilon(1e-3));
  }

  TEST_CASE("temperature limits") {
    std::mt19937_64 rng(9);
    const Matrix W = random_matrix(3, 6, 2);
    const Matrix g = sample_gumbel(3, 6, rng);
    const Matrix cold = gumbel_softmax(W, g, 1e-3);
    for (Eigen::Index k = 0; k < 3; ++k) {
      Eigen::Index arg;
      (W.row(k) + g.row(k)).maxCoeff(&arg);
      CHECK(cold(k, arg) == doctest::Approx(1.0).epsilon(1e-9));
    }
    const Matrix hot = gumbel_softmax(W, Matrix::Zero(3, 6), 1e3);
    CHECK((hot.array() - 1.0 / 6.0).abs().maxCoeff() <= 1e-3);
  }

  TEST_CASE("gumbel noise has the standard Gumbel mean") {
    std::mt19937_64 rng(3);
    const Matrix g = sample_gumbel(200, 500, rng);
    CHECK(g.mean() == doctest::Approx(0.5772156649).epsilon(0.01));
  }

  TEST_CASE("gumbel softmax backward matches central differences") {
    const Matrix W = random_matrix(2, 5, 4);
    const Matrix g = random_matrix(2, 5, 5);
    const Matrix upstream = random_matrix(2, 5, 6);
    const double tau = 0.9;
    const Matrix P = gumbel_softmax(W, g, tau);
    const Matrix analytic = gumbel_softmax_backward(P, upstream, tau);
    const Matrix numeric = oracle::central_diff(
        [&](const Matrix& x) { return (gumbel_softmax(x, g, tau).array() * upstream.array()).sum(); }, W);
    CHECK(oracle::max_relative_error(analytic, numeric) <= 1e-7);
  }

  TEST_CASE("soft_embed") {
    const Matrix E = random_matrix(5, 3, 8);
    Matrix P = Matrix::Zero(2, 5);
    P(0, 3) = 1.0;
    P(1, 1) = 0.5;
    P(1, 4) = 0.5;
    const Matrix d = soft_embed(P, E);
    CHECK(d.row(0) == E.row(3));
    CHECK((d.row(1) - 0.5 * (E.row(1) + E.row(4))).cwiseAbs().maxCoeff() <= 1e-15);

    Matrix R = random_matrix(3, 5, 9).array().exp();
    for (Eigen::Index k = 0; k < 3; ++k) R.row(k) /= R.row(k).sum();
    const Matrix got = soft_embed(R, E);
    for (Eigen::Index k = 0; k < 3; ++k) {
      for (Eigen::Index h = 0; h < 3; ++h) {
        double s = 0.0;
        for (Eigen::Index v = 0; v < 5; ++v) s += R(k, v) * E(v, h);
        CHECK(got(k, h) == doctest::Approx(s).epsilon(1e-14));
      }
    }
  }

  TEST_CASE("hard decode") {
    const Vocabulary vocab({"a", "b", "c", "d", "e", "f"}, {});
    Matrix W = Matrix::Zero(3, 6);
    W(0, 3) = 2.0;
    W(1, 2) = 1.0;
    W(1, 5) = 1.0;
    W(2, 1) = 9.0;  // masked
    W(2, 4) = 0.5;
    const ForbidMask mask({false, true, false, false, false, false});
    const auto h = hard_decode({W}, mask, vocab);
    CHECK(h.ids == TokenIds{3, 2, 4});
    CHECK(h.text == "dce");
  }

  TEST_CASE("cold noise-free sampling agrees with hard decode") {
    const auto vocab = toy_vocabulary();
    const auto mask = toy_mask();
    std::mt19937_64 rng(12);
    const auto W = SuffixLogits::gaussian(4, vocab.size(), 1.0, rng);
    RelaxationState state{1e-4, 1e-5, 0.5, std::mt19937_64(1)};
    const Matrix P = gumbel_softmax_sample(mask_logits(W, mask), state, false);
    const auto h = hard_decode(W, mask, vocab);
    for (Eigen::Index k = 0; k < 4; ++k) {
      Eigen::Index arg;
      P.row(k).maxCoeff(&arg);
      CHECK(arg == h.ids[static_cast<std::size_t>(k)]);
    }
  }

  TEST_CASE("entropy bonus") {
    Matrix one_hot = Matrix::Zero(3, 6);
    one_hot(0, 1) = one_hot(1, 0) = one_hot(2, 5) = 1.0;
    CHECK(entropy_bonus(one_hot) == 0.0);
    Matrix uniform = Matrix::Zero(5, 7);
    uniform.leftCols(4).setConstant(0.25);
    CHECK(std::abs(entropy_bonus(uniform) - std::log(4.0)) <= 1e-12);

    Matrix R = random_matrix(4, 9, 10).array().exp();
    for (Eigen::Index k = 0; k < 4; ++k) R.row(k) /= R.row(k).sum();
    R(2, 3) = 0.0;
    R.row(2) /= R.row(2).sum();
    double naive = 0.0;
    for (Eigen::Index k = 0; k < 4; ++k) {
      for (Eigen::Index v = 0; v < 9; ++v) {
        if (R(k, v) > 0.0) naive -= R(k, v) * std::log(R(k, v));
      }
    }
    naive /= 4.0;
    CHECK(std::abs(entropy_bonus(R) - naive) <= 1e-12);
    CHECK(entropy_bonus(R) >= 0.0);
    CHECK(entropy_bonus(R) <= std::log(9.0));
  }

  TEST_CASE("fluency penalty") {
    const auto vocab = toy_vocabulary();
    const auto uniform = BigramLM::uniform(vocab, 4);
    CHECK(fluency_penalty(uniform, {30, 31, 41}) == doctest::Approx(std::log(64.0)).epsilon(1e-14));

    const BigramLM model(vocab, 6, 14);
    const auto& E = model.embeddings();
    auto logp = [&](TokenId prev, TokenId next) {
      return oracle::log_prob(E.row(prev) * model.output() + model.bias(), next);
    };
    CHECK(fluency_penalty(model, {30}) == doctest::Approx(-logp(0, 30)).epsilon(1e-12));
    const double expected = -(logp(0, 30) + logp(30, 31) + logp(31, 41)) / 3.0;
    CHECK(fluency_penalty(model, {30, 31, 41}) == doctest::Approx(expected).epsilon(1e-12));
  }

  TEST_CASE("anneal") {
    RelaxationState s{1.0, 0.9, 0.9, std::mt19937_64(4)};
    const auto probe = s.rng;
    s = anneal(s);
    CHECK(s.tau == 0.9);
    s = anneal(s);
    CHECK(s.tau == 0.9);
    CHECK(s.rng == probe);
    RelaxationState t{1.0, 0.9, 0.99, std::mt19937_64(4)};
    CHECK(anneal(t).tau == doctest::Approx(0.99).epsilon(1e-15));
    RelaxationState bad{1.0, 0.9, 1.0, std::mt19937_64(4)};
    CHECK_THROWS(anneal(bad));
    const RelaxationState defaults;
    CHECK(defaults.tau == 1.0);
    CHECK(defaults.tau_min == 0.9);
  }

  TEST_CASE("gaussian initialization") {
    std::mt19937_64 rng(1);
    const auto W = SuffixLogits::gaussian(40, 500, 0.02, rng);
    CHECK(W.length() == 40);
    const double mean = W.W.mean();
    const double sd = std::sqrt((W.W.array() - mean).square().mean());
    CHECK(std::abs(mean) < 0.002);
    CHECK(sd == doctest::Approx(0.02).epsilon(0.05));
  }
}
