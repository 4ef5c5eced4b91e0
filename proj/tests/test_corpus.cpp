#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "prefgate/corpus.hpp"

using namespace prefgate;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("corpus_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const char* name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace

TEST_CASE("jsonl round-trip preserves pairs, scores and unknown keys") {
  TempDir tmp;
  const std::string path = tmp.file("pairs.jsonl");
  write_text(path,
             R"({"prompt":"p","chosen":"c","rejected":"r"})"
             "\n\n"  // blank lines are skipped
             R"({"prompt":"q","chosen":"cc","rejected":"rr",)"
             R"("score_chosen":7.5,"score_rejected":2,"origin":"unit"})"
             "\n");
  Dataset ds = load_jsonl(path);
  REQUIRE(ds.pairs.size() == 2);
  CHECK(!ds.pairs[0].has_scores());
  CHECK(ds.pairs[1].has_scores());
  CHECK(*ds.pairs[1].score_chosen == 7.5);
  CHECK(ds.pairs[1].extra.at("origin") == "unit");

  const std::string copy = tmp.file("copy.jsonl");
  write_jsonl(ds, copy);
  CHECK(load_jsonl(copy) == ds);
}

TEST_CASE("jsonl loader reports the offending line") {
  TempDir tmp;
  const std::string path = tmp.file("bad.jsonl");
  SECTION("malformed json") {
    write_text(path, "{\"prompt\":\"p\",\"chosen\":\"c\",\"rejected\":\"r\"}\n{oops\n");
    CHECK_THROWS_WITH(load_jsonl(path),
                      Catch::Matchers::ContainsSubstring("line 2"));
  }
  SECTION("missing field") {
    write_text(path, R"({"prompt":"p","chosen":"c"})" "\n");
    CHECK_THROWS_WITH(load_jsonl(path),
                      Catch::Matchers::ContainsSubstring("rejected"));
  }
  SECTION("score out of range") {
    write_text(path,
               R"({"prompt":"p","chosen":"c","rejected":"r",)"
               R"("score_chosen":11,"score_rejected":0})" "\n");
    CHECK_THROWS_AS(load_jsonl(path), data_error);
  }
  SECTION("empty response") {
    write_text(path, R"({"prompt":"p","chosen":"","rejected":"r"})" "\n");
    CHECK_THROWS_AS(load_jsonl(path), data_error);
  }
}

TEST_CASE("rule continuation tiles the prompt with a fixed shift") {
  // step = 1 + ('c' - 'a') % 3 = 3; each output letter is the tiled prompt
  // letter advanced by 3.
  const std::string prompt = "cabzyxwv";
  CHECK(rule_step(prompt) == 3);
  CHECK(rule_char(prompt, 0) == 'f');   // c + 3
  CHECK(rule_char(prompt, 1) == 'd');   // a + 3
  CHECK(rule_char(prompt, 3) == 'c');   // z + 3 wraps
  CHECK(rule_char(prompt, 8) == rule_char(prompt, 0));  // period 8
}

TEST_CASE("synthetic generation invariants") {
  SynthConfig cfg;
  cfg.n_pairs = 300;
  cfg.n_sft_sequences = 50;
  cfg.seed = 99;
  SynthData data = gen_synthetic(cfg);
  REQUIRE(data.dataset.pairs.size() == 300);
  REQUIRE(data.sft_corpus.size() == 50);

  for (const auto& line : data.sft_corpus) {
    const auto tab = line.find('\t');
    REQUIRE(tab == kPromptLen);  // prompt, then tab, then response
    const std::string prompt = line.substr(0, tab);
    const std::string response = line.substr(tab + 1);
    REQUIRE(response.size() >= cfg.response_len_min);
    REQUIRE(response.size() <= cfg.response_len_max);
    for (std::size_t i = 0; i < response.size(); ++i)
      REQUIRE(response[i] == rule_char(prompt, i));  // SFT data is q = 1
  }

  for (const auto& p : data.dataset.pairs) {
    REQUIRE(p.prompt.size() == kPromptLen);
    REQUIRE(p.has_scores());
    CHECK(*p.score_chosen >= *p.score_rejected);
    // scores are 10x the realized fraction of rule-following positions
    CHECK(*p.score_chosen ==
          Catch::Approx(10.0 * detail::rule_fraction(p.prompt, p.chosen)));
    CHECK(*p.score_rejected ==
          Catch::Approx(10.0 * detail::rule_fraction(p.prompt, p.rejected)));
  }

  // determinism: same seed reproduces, different seed diverges
  CHECK(gen_synthetic(cfg).dataset == data.dataset);
  SynthConfig other = cfg;
  other.seed = 100;
  CHECK(gen_synthetic(other).dataset != data.dataset);
}

TEST_CASE("label noise only touches pairs below the clarity cutoff") {
  SynthConfig cfg;
  cfg.n_pairs = 400;
  cfg.n_sft_sequences = 1;
  cfg.seed = 7;
  Dataset ds = gen_synthetic(cfg).dataset;

  Dataset noisy = inject_label_noise(ds, 2.0, 1.0, 11);
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& before = ds.pairs[i];
    const auto& after = noisy.pairs[i];
    const double cl = std::abs(*before.score_chosen - *before.score_rejected);
    if (cl < 2.0) {
      // flip_prob 1: every ambiguous pair is swapped
      CHECK(after.chosen == before.rejected);
      CHECK(after.rejected == before.chosen);
      ++flipped;
    } else {
      CHECK(after == before);
    }
  }
  CHECK(flipped > 0);

  // flip_prob 0 is the identity regardless of cutoff
  CHECK(inject_label_noise(ds, 10.0, 0.0, 11) == ds);
  CHECK_THROWS_AS(inject_label_noise(ds, 2.0, 1.5, 11), usage_error);
}
