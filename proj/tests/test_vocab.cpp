#include <doctest.h>

#include "calsuffix/error.hpp"
#include "calsuffix/toy.hpp"
#include "calsuffix/trainer.hpp"
#include "calsuffix/vocab.hpp"

using namespace calsuffix;

namespace {

Vocabulary four_tokens() { return Vocabulary({"a", "yes", "no", "b"}, {}); }

}  // namespace

TEST_SUITE("vocab") {
  TEST_CASE("surface tokens are forbidden and nothing else under an empty policy") {
    const auto vocab = four_tokens();
    const auto surfaces = LabelSurfaceMap::build(vocab, {"pos", "neg"}, {{"yes"}, {"no"}});
    const auto mask = build_forbid_mask(vocab, std::span(&surfaces, 1), MaskPolicy{});
    CHECK(mask.bits() == std::vector<bool>{false, true, true, false});
    CHECK(mask.num_allowed() == 2);
    CHECK(mask.allowed_ids() == TokenIds{0, 3});
  }

  TEST_CASE("empty surface maps and empty policy give an all-zero mask") {
    const auto vocab = four_tokens();
    const auto mask = build_forbid_mask(vocab, {}, MaskPolicy{});
    CHECK(mask.num_allowed() == 4);
  }

  TEST_CASE("a mask covering every token throws AllForbidden") {
    const Vocabulary vocab({"yes", "no"}, {});
    const auto surfaces = LabelSurfaceMap::build(vocab, {"pos", "neg"}, {{"yes"}, {"no"}});
    CHECK_THROWS_AS(build_forbid_mask(vocab, std::span(&surfaces, 1), MaskPolicy{}), AllForbidden);
  }

  TEST_CASE("standard policy on the toy vocabulary") {
    const auto vocab = toy_vocabulary();
    const TaskSpec spec = sentiment_fixture(4, 4);
    const auto surfaces = spec.surface_map(vocab);
    const auto mask = build_forbid_mask(vocab, std::span(&surfaces, 1), MaskPolicy::standard());
    // Specials 0-2, chat delimiters 3-4, "\n" and " ", the four label
    // surfaces, and the two non-ASCII tokens.
    const TokenIds expected = {0, 1, 2, 3, 4, 5, 6, 22, 23, 24, 25, 62, 63};
    for (TokenId id = 0; id < static_cast<TokenId>(vocab.size()); ++id) {
      const bool want = std::find(expected.begin(), expected.end(), id) != expected.end();
      CHECK_MESSAGE(mask.forbidden(id) == want, "token ", id, " '", vocab.token(id), "'");
    }
  }

  TEST_CASE("extra forbidden strings are masked") {
    const auto vocab = toy_vocabulary();
    MaskPolicy policy;
    policy.extra_forbidden = {" movie was"};
    const auto mask = build_forbid_mask(vocab, {}, policy);
    CHECK(mask.forbidden(*vocab.find(" movie")));
    CHECK(mask.forbidden(*vocab.find(" was")));
    CHECK(mask.num_allowed() == vocab.size() - 2);
  }

  TEST_CASE("mixture mask forbids every surface token of every task") {
    const auto vocab = toy_vocabulary();
    const std::vector<TaskSpec> tasks = {sentiment_fixture(4, 4), topic_fixture(4, 4)};
    const auto mask = mixture_mask(vocab, tasks, MaskPolicy{});
    for (const auto& task : tasks) {
      for (const auto& surfaces : task.surfaces) {
        for (const auto& s : surfaces) {
          for (TokenId id : vocab.tokenize(s)) CHECK(mask.forbidden(id));
        }
      }
    }
  }

  TEST_CASE("label token positions") {
    CHECK(label_token_positions(TokenIds(5, 7), TokenIds(2, 7)) == std::vector<std::size_t>{5, 6});
    CHECK(label_token_positions(TokenIds(1, 7), TokenIds(1, 7)) == std::vector<std::size_t>{1});
    const auto vocab = toy_vocabulary();
    const auto prefix = vocab.tokenize("The answer is:");
    REQUIRE(prefix.size() == 4);
    CHECK(label_token_positions(prefix, tokenize_surface(vocab, " yes")) == std::vector<std::size_t>{4});
    for (std::size_t p = 1; p < 6; ++p) {
      for (std::size_t s = 1; s < 4; ++s) {
        const auto pos = label_token_positions(TokenIds(p, 0), TokenIds(s, 0));
        CHECK(pos.size() == s);
        CHECK(pos.back() == p + s - 1);
      }
    }
  }

  TEST_CASE("tokenize_surface") {
    const auto vocab = four_tokens();
    CHECK(tokenize_surface(vocab, "yes") == TokenIds{1});
    const Vocabulary cased({"yes", "Yes", ".", " "}, {});
    CHECK(tokenize_surface(cased, "yes") != tokenize_surface(cased, "Yes."));
    CHECK(tokenize_surface(cased, "Yes.") == TokenIds{1, 2});
    CHECK_THROWS_AS(tokenize_surface(vocab, "\xC3\xBC"), UnknownToken);
  }

  TEST_CASE("greedy tokenization and round trip") {
    const auto vocab = toy_vocabulary();
    for (const std::string s : {" yes", " No", "\nThe answer is:", "Review: the movie was very good",
                                "<|im_start|>user\n", "\xC3\xA9\xE2\x86\x92"}) {
      CHECK(vocab.detokenize(vocab.tokenize(s)) == s);
    }
    CHECK(vocab.tokenize(" the movie") == TokenIds{*vocab.find(" the"), *vocab.find(" movie")});
    try {
      vocab.tokenize(" the xylophone");
      FAIL("expected UnknownToken");
    } catch (const UnknownToken& e) {
      CHECK(e.offset() == 5);  // " " matches, then "x" does not
    }
  }

  TEST_CASE("ids are dense and specials resolve") {
    const auto vocab = toy_vocabulary();
    CHECK(vocab.size() == 64);
    for (TokenId id = 0; id < 64; ++id) CHECK(*vocab.find(vocab.token(id)) == id);
    CHECK(vocab.specials().bos == 0);
    CHECK(vocab.is_control(3));
    CHECK_FALSE(vocab.is_control(22));
    CHECK(tiny_vocabulary().size() == 12);
    CHECK(vocab.fingerprint() != tiny_vocabulary().fingerprint());
  }
}
