#pragma once

#include <cstdio>
#include <string>

#include "prefgate/corpus.hpp"
#include "prefgate/error.hpp"
#include "prefgate/lm.hpp"

namespace prefgate {

// The argument of sigma in the DPO loss, over unnormalized log-prob sums:
//   beta * [(logpi_theta - logpi_ref)(y_w|x) - (logpi_theta - logpi_ref)(y_l|x)]
inline double implicit_reward_margin(const ModelParams& policy,
                                     const ModelParams& reference,
                                     const PreferencePair& pair, double beta) {
  if (!(policy.arch == reference.arch))
    throw usage_error("implicit_reward_margin: arch mismatch");
  const double w = score_response(policy, pair.prompt, pair.chosen).logp_sum -
                   score_response(reference, pair.prompt, pair.chosen).logp_sum;
  const double l =
      score_response(policy, pair.prompt, pair.rejected).logp_sum -
      score_response(reference, pair.prompt, pair.rejected).logp_sum;
  return beta * (w - l);
}

struct EvalReport {
  std::size_t n_pairs = 0;
  double accuracy = 0.0;  // (wins + 0.5 * ties) / n_pairs
  double mean_margin = 0.0;
  std::size_t tie_count = 0;
};

// Preference accuracy by implicit-reward margin sign on held-out pairs.
// A zero margin counts as half a win, so policy == reference scores 0.5.
inline EvalReport evaluate(const ModelParams& policy,
                           const ModelParams& reference,
                           const Dataset& heldout, double beta) {
  if (heldout.pairs.empty()) throw usage_error("evaluate: empty dataset");
  EvalReport report;
  report.n_pairs = heldout.pairs.size();
  std::size_t wins = 0;
  double margin_sum = 0.0;
  for (const auto& pair : heldout.pairs) {
    const double m = implicit_reward_margin(policy, reference, pair, beta);
    margin_sum += m;
    if (m > 0.0)
      ++wins;
    else if (m == 0.0)
      ++report.tie_count;
  }
  report.accuracy = (static_cast<double>(wins) +
                     0.5 * static_cast<double>(report.tie_count)) /
                    static_cast<double>(report.n_pairs);
  report.mean_margin = margin_sum / static_cast<double>(report.n_pairs);
  return report;
}

// n_pairs <TAB> accuracy <TAB> mean_margin <TAB> tie_count
inline std::string report_tsv(const EvalReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu\t%.10g\t%.10g\t%zu\n", r.n_pairs,
                r.accuracy, r.mean_margin, r.tie_count);
  return buf;
}

inline std::string report_kv(const EvalReport& r) {
  char buf[192];
  std::snprintf(buf, sizeof buf,
                "n_pairs: %zu\naccuracy: %.10g\nmean_margin: %.10g\n"
                "tie_count: %zu\n",
                r.n_pairs, r.accuracy, r.mean_margin, r.tie_count);
  return buf;
}

}  // namespace prefgate
