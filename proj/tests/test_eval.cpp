#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "calsuffix/error.hpp"
#include "calsuffix/eval.hpp"
#include "calsuffix/hash.hpp"
#include "calsuffix/toy.hpp"

using namespace calsuffix;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

SuffixArtifact toy_artifact(const std::string& method, const std::string& text, std::uint64_t seed = 0) {
  const auto vocab = toy_vocabulary();
  SuffixArtifact a;
  a.method = method;
  a.token_ids = vocab.tokenize(text);
  a.K = a.token_ids.size();
  a.text = text;
  a.seen_model = "toy_random";
  a.vocab_hash = hex_digest(vocab.fingerprint());
  a.seed = seed;
  return a;
}

EvalResult fake_result(double acc, double callogp, std::size_t k_shot = 0) {
  EvalResult r;
  r.model = "m";
  r.task = "t";
  r.k_shot = k_shot;
  r.n_examples = 2;
  r.accuracy = acc;
  r.mean_cal_logp = callogp;
  r.records = {{0, 0, 0.0}, {1, 1, 0.0}};
  return r;
}

TransferCell cell(std::string target, std::size_t k_shot, double da, double dc) {
  TransferCell c;
  c.method = "soft_suffix";
  c.K = 4;
  c.seen_model = "toy_fitted";
  c.target_model = std::move(target);
  c.task = "toy_sentiment";
  c.k_shot = k_shot;
  c.delta_acc = da;
  c.delta_callogp = dc;
  c.n = 128;
  return c;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("cell formatting") {
    CHECK(format_delta_cell(0.738 - 0.910, 9.008 - 8.58) == "-0.172 / +0.428");
    CHECK(format_delta_cell(0.0, -0.0) == "+0.000 / +0.000");
    CHECK(format_delta_cell(-0.0001, 0.0004) == "+0.000 / +0.000");
    CHECK(format_delta_cell(1.0, -12.3456) == "+1.000 / -12.346");
    CHECK(format_clean_cell(0.91, 8.58) == "0.91 / 8.58");
    CHECK(format_clean_cell(0.5, -0.001) == "0.50 / 0.00");
  }

  TEST_CASE("delta of a run with itself is zero") {
    const auto r = fake_result(0.91, 8.58);
    const auto c = delta_metrics(r, r);
    CHECK(c.delta_acc == 0.0);
    CHECK(c.delta_callogp == 0.0);
    CHECK(format_delta_cell(c.delta_acc, c.delta_callogp) == "+0.000 / +0.000");

    const auto d = delta_metrics(fake_result(0.910, 8.58), fake_result(0.738, 9.008));
    CHECK(format_delta_cell(d.delta_acc, d.delta_callogp) == "-0.172 / +0.428");
  }

  TEST_CASE("mismatched runs are rejected") {
    CHECK_THROWS_AS(delta_metrics(fake_result(0.5, 0.0, 0), fake_result(0.5, 0.0, 4)), MismatchedRuns);
    auto other = fake_result(0.5, 0.0);
    other.model = "n";
    CHECK_THROWS_AS(delta_metrics(fake_result(0.5, 0.0), other), MismatchedRuns);
    other = fake_result(0.5, 0.0);
    other.records[0].gold = 1;
    CHECK_THROWS_AS(delta_metrics(fake_result(0.5, 0.0), other), MismatchedRuns);
  }

  TEST_CASE("context-independent model predicts the first label everywhere") {
    const auto task = sentiment_fixture(16, 64);
    const BigramLM bigram(toy_vocabulary(), 8, 2);
    EvalOptions o;
    o.cap = 0;
    const auto clean = evaluate_task(bigram, task, nullptr, o);
    std::size_t first = 0;
    for (const auto& ex : task.validation) first += ex.label == 0;
    CHECK(clean.accuracy == doctest::Approx(static_cast<double>(first) / 64.0));
    CHECK(std::abs(clean.mean_cal_logp) <= 1e-12);
    for (const auto& rec : clean.records) CHECK(rec.predicted == 0);

    const auto artifact = toy_artifact("uat", " fun fun");
    const auto attacked = evaluate_task(bigram, task, &artifact, o);
    const auto c = delta_metrics(clean, attacked, artifact);
    CHECK(c.delta_acc == 0.0);
    CHECK(std::abs(c.delta_callogp) <= 1e-12);
    CHECK(c.method == "uat");
  }

  TEST_CASE("cap and k-shot bookkeeping") {
    const auto task = sentiment_fixture(16, 40);
    const TransformerLM model(toy_vocabulary(), 8, 16, 256, 1);
    EvalOptions o;
    o.cap = 10;
    o.k_shot = 2;
    o.seed = 3;
    const auto r = evaluate_task(model, task, nullptr, o);
    CHECK(r.n_examples == 10);
    CHECK(r.records.size() == 10);
    CHECK(r.k_shot == 2);
    const auto again = EvalResult::from_json(r.to_json());
    CHECK(again.to_json() == r.to_json());
    o.cap = 0;
    CHECK(evaluate_task(model, task, nullptr, o).n_examples == 40);
  }

  TEST_CASE("suffix ids across vocabularies") {
    const auto tiny = TransformerLM(tiny_vocabulary(), 4, 8, 32, 1);
    const auto toy = BigramLM(toy_vocabulary(), 4, 1);
    auto a = toy_artifact("uat", " fun fun");
    CHECK(suffix_ids_for(a, toy) == a.token_ids);
    CHECK_THROWS_AS(suffix_ids_for(a, tiny), VocabularyGap);
    auto b = toy_artifact("uat", " a");
    b.vocab_hash = "0000";
    CHECK(suffix_ids_for(b, tiny) == TokenIds{4});
  }

  TEST_CASE("transfer grid size") {
    const std::vector<TaskSpec> tasks = {sentiment_fixture(8, 6), topic_fixture(8, 6)};
    const BigramLM bigram(toy_vocabulary(), 4, 1);
    const TransformerLM transformer(toy_vocabulary(), 4, 8, 256, 2);
    const auto uniform = BigramLM::uniform(toy_vocabulary(), 4);
    const std::vector<const ModelBackend*> backends = {&bigram, &transformer, &uniform};
    const std::vector<SuffixArtifact> one = {toy_artifact("uat", " fun fun")};
    const std::vector<std::size_t> kshots = {0, 2};
    EvalOptions o;
    o.cap = 4;

    const std::vector<TaskSpec> single = {tasks[0]};
    const std::vector<std::size_t> zero = {0};
    const std::vector<const ModelBackend*> two = {&bigram, &transformer};
    CHECK(transfer_matrix(one, two, single, zero, o).cells.size() == 2);

    const std::vector<SuffixArtifact> many = {toy_artifact("uat", " fun fun"), toy_artifact("autoprompt", " bad"),
                                              toy_artifact("soft_suffix", " dull dull dull")};
    const auto report = transfer_matrix(many, backends, tasks, kshots, o);
    CHECK(report.cells.size() == 3 * 3 * 2 * 2);
    for (const auto& c : report.cells) {
      CHECK(c.n == 4);
      CHECK(c.delta_acc == doctest::Approx(c.acc_attacked - c.acc_clean));
    }
  }

  TEST_CASE("csv round trip") {
    TransferReport report;
    report.cap = 256;
    report.cells = {cell("toy_fitted", 0, -0.5078125, -9.18612345678901), cell("a,b", 4, 0.1, 1e-17)};
    report.cells[1].acc_clean = 0.3;
    const auto csv = report_csv(report);
    CHECK(csv.substr(0, csv.find('\n') + 1) == read_file(std::filesystem::path(CALSUFFIX_GOLDEN_DIR) / "report_header.csv"));
    const auto cells = parse_report_csv(csv);
    REQUIRE(cells.size() == 2);
    CHECK(cells[0].delta_callogp == report.cells[0].delta_callogp);
    CHECK(cells[1].target_model == "a,b");
    CHECK(cells[1].acc_clean == 0.3);
    CHECK(cells[1].delta_callogp == 1e-17);
    CHECK_THROWS_AS(parse_report_csv("bad header\n"), SchemaError);
  }

  TEST_CASE("markdown table layout") {
    TransferReport report;
    report.cap = 256;
    report.cells = {cell("toy_fitted", 0, -0.508, -9.186), cell("toy_fitted", 4, 0.738 - 0.910, 9.008 - 8.58),
                    cell("toy_bigram", 0, 0.0, -0.0), cell("toy_bigram", 4, -0.0, 0.0)};
    CHECK(report_md(report) == read_file(std::filesystem::path(CALSUFFIX_GOLDEN_DIR) / "transfer_table.md"));
  }

  TEST_CASE("emit_report honours the format set") {
    TransferReport report;
    report.cap = 8;
    report.cells = {cell("toy_fitted", 0, 0.0, 0.0)};
    const auto dir = std::filesystem::temp_directory_path() / "calsuffix_test_emit";
    std::filesystem::remove_all(dir);
    CHECK(emit_report(report, {}, dir).empty());
    CHECK_FALSE(std::filesystem::exists(dir));
    const auto paths = emit_report(report, {ReportFormat::kCsv, ReportFormat::kMd}, dir);
    CHECK(paths.size() == 2);
    CHECK(std::filesystem::exists(dir / "transfer.csv"));
    CHECK(std::filesystem::exists(dir / "transfer.md"));
    CHECK_FALSE(std::filesystem::exists(dir / "transfer.json"));
    CHECK(parse_report_format("md") == ReportFormat::kMd);
    CHECK_THROWS_AS(parse_report_format("xml"), ConfigError);
  }
}
