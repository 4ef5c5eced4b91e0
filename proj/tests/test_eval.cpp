#include <catch2/catch_amalgamated.hpp>

#include "prefgate/eval.hpp"

using namespace prefgate;

namespace {

ArchConfig micro_arch() {
  ArchConfig a;
  a.d_model = 4;
  a.n_heads = 2;
  a.ffn_hidden = 8;
  a.n_layers = 1;
  a.max_len = 32;
  return a;
}

Dataset small_dataset() {
  Dataset ds;
  for (int i = 0; i < 6; ++i) {
    PreferencePair p;
    p.prompt = "abcd";
    p.chosen = std::string(8, static_cast<char>('e' + i));
    p.rejected = std::string(8, static_cast<char>('m' + i));
    ds.pairs.push_back(p);
  }
  return ds;
}

}  // namespace

TEST_CASE("margin is zero when policy equals reference") {
  ModelParams ref = init_params(micro_arch(), 1);
  PreferencePair p{"abcd", "efgh", "ijkl"};
  CHECK(implicit_reward_margin(ref, ref, p, 0.01) == 0.0);

  // policy == reference scores exactly 0.5: every pair ties
  const EvalReport r = evaluate(ref, ref, small_dataset(), 0.01);
  CHECK(r.tie_count == r.n_pairs);
  CHECK(r.accuracy == 0.5);
  CHECK(r.mean_margin == 0.0);
}

TEST_CASE("margin scales linearly in beta and uses unnormalized sums") {
  ModelParams ref = init_params(micro_arch(), 2);
  ModelParams policy = init_params(micro_arch(), 3);
  PreferencePair p{"abcd", "efghe", "ijklmno"};

  const double m1 = implicit_reward_margin(policy, ref, p, 0.01);
  const double m5 = implicit_reward_margin(policy, ref, p, 0.05);
  CHECK(m5 == Catch::Approx(5.0 * m1));

  // independent recomputation from raw scores
  const double expect =
      0.01 *
      ((score_response(policy, p.prompt, p.chosen).logp_sum -
        score_response(ref, p.prompt, p.chosen).logp_sum) -
       (score_response(policy, p.prompt, p.rejected).logp_sum -
        score_response(ref, p.prompt, p.rejected).logp_sum));
  CHECK(m1 == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("accuracy counts wins plus half-ties") {
  ModelParams ref = init_params(micro_arch(), 4);
  ModelParams policy = init_params(micro_arch(), 5);
  const Dataset ds = small_dataset();
  const EvalReport r = evaluate(policy, ref, ds, 0.01);
  std::size_t wins = 0, ties = 0;
  double sum = 0.0;
  for (const auto& p : ds.pairs) {
    const double m = implicit_reward_margin(policy, ref, p, 0.01);
    sum += m;
    if (m > 0.0) ++wins;
    if (m == 0.0) ++ties;
  }
  CHECK(r.n_pairs == ds.pairs.size());
  CHECK(r.tie_count == ties);
  CHECK(r.accuracy == (wins + 0.5 * ties) / static_cast<double>(ds.pairs.size()));
  CHECK(r.mean_margin == Catch::Approx(sum / 6.0));

  // swapping every pair's labels flips accuracy around 0.5 when there are
  // no ties
  Dataset flipped = ds;
  for (auto& p : flipped.pairs) std::swap(p.chosen, p.rejected);
  const EvalReport rf = evaluate(policy, ref, flipped, 0.01);
  if (r.tie_count == 0) CHECK(rf.accuracy == Catch::Approx(1.0 - r.accuracy));
}

TEST_CASE("eval input validation and report formats") {
  ModelParams ref = init_params(micro_arch(), 6);
  ArchConfig other = micro_arch();
  other.d_model = 8;
  ModelParams big = init_params(other, 6);
  PreferencePair p{"ab", "cd", "ef"};
  CHECK_THROWS_AS(implicit_reward_margin(big, ref, p, 0.01), usage_error);
  CHECK_THROWS_AS(evaluate(ref, ref, Dataset{}, 0.01), usage_error);

  EvalReport r;
  r.n_pairs = 200;
  r.accuracy = 0.915;
  r.mean_margin = -0.0625;
  r.tie_count = 3;
  CHECK(report_tsv(r) == "200\t0.915\t-0.0625\t3\n");
  CHECK(report_kv(r) ==
        "n_pairs: 200\naccuracy: 0.915\nmean_margin: -0.0625\ntie_count: 3\n");
}
