#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prefgate/error.hpp"
#include "prefgate/rng.hpp"

namespace prefgate {

// One preference pair: prompt, preferred response, rejected response, and
// optional ground-truth quality scores on a 0..10 scale.
struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  std::optional<double> score_chosen;
  std::optional<double> score_rejected;
  // Unknown JSONL keys, carried through load/save untouched.
  nlohmann::json extra = nlohmann::json::object();

  bool has_scores() const {
    return score_chosen.has_value() && score_rejected.has_value();
  }

  bool operator==(const PreferencePair&) const = default;
};

struct Dataset {
  std::vector<PreferencePair> pairs;

  bool operator==(const Dataset&) const = default;
};

struct SynthConfig {
  std::size_t n_pairs = 2000;
  std::size_t n_sft_sequences = 5000;
  std::size_t response_len_min = 24;  // in tokens (= bytes here)
  std::size_t response_len_max = 48;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_pairs == 0) throw usage_error("SynthConfig: n_pairs must be > 0");
    if (n_sft_sequences == 0)
      throw usage_error("SynthConfig: n_sft_sequences must be > 0");
    if (response_len_min < 4)
      throw usage_error("SynthConfig: response_len_min must be >= 4");
    if (response_len_max < response_len_min)
      throw usage_error(
          "SynthConfig: response_len_max must be >= response_len_min");
  }
};

namespace detail {

inline void check_pair_fields(const PreferencePair& p, std::size_t line_no) {
  auto ctx = [&](const char* what) {
    return "line " + std::to_string(line_no) + ": " + what;
  };
  if (p.prompt.empty()) throw data_error(ctx("empty prompt"));
  if (p.chosen.empty()) throw data_error(ctx("empty chosen response"));
  if (p.rejected.empty()) throw data_error(ctx("empty rejected response"));
  if (p.has_scores()) {
    for (double s : {*p.score_chosen, *p.score_rejected})
      if (!(s >= 0.0 && s <= 10.0))
        throw data_error(ctx("score outside [0, 10]"));
  }
}

}  // namespace detail

inline PreferencePair pair_from_json(const nlohmann::json& j,
                                     std::size_t line_no) {
  auto ctx = [&](const std::string& what) {
    return "line " + std::to_string(line_no) + ": " + what;
  };
  if (!j.is_object()) throw data_error(ctx("not a JSON object"));
  PreferencePair p;
  for (const char* key : {"prompt", "chosen", "rejected"}) {
    if (!j.contains(key))
      throw data_error(ctx("missing required field \"" + std::string(key) +
                           "\""));
    if (!j.at(key).is_string())
      throw data_error(ctx("field \"" + std::string(key) +
                           "\" must be a string"));
  }
  p.prompt = j.at("prompt").get<std::string>();
  p.chosen = j.at("chosen").get<std::string>();
  p.rejected = j.at("rejected").get<std::string>();
  for (auto& [key, value] : j.items()) {
    if (key == "prompt" || key == "chosen" || key == "rejected") continue;
    if (key == "score_chosen" || key == "score_rejected") {
      if (!value.is_number())
        throw data_error(ctx("field \"" + key + "\" must be a number"));
      (key == "score_chosen" ? p.score_chosen : p.score_rejected) =
          value.get<double>();
    } else {
      p.extra[key] = value;
    }
  }
  detail::check_pair_fields(p, line_no);
  return p;
}

inline nlohmann::json pair_to_json(const PreferencePair& p) {
  nlohmann::json j = p.extra;
  j["prompt"] = p.prompt;
  j["chosen"] = p.chosen;
  j["rejected"] = p.rejected;
  if (p.score_chosen) j["score_chosen"] = *p.score_chosen;
  if (p.score_rejected) j["score_rejected"] = *p.score_rejected;
  return j;
}

// One JSON object per non-empty line. Required keys prompt/chosen/rejected,
// optional score_chosen/score_rejected, anything else preserved verbatim.
inline Dataset load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path + " for reading");
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw data_error("line " + std::to_string(line_no) + ": " + e.what());
    }
    ds.pairs.push_back(pair_from_json(j, line_no));
  }
  if (in.bad()) throw data_error("I/O error while reading " + path);
  return ds;
}

inline void write_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open " + path + " for writing");
  for (const auto& p : ds.pairs) out << pair_to_json(p).dump() << "\n";
  out.flush();
  if (!out) throw data_error("I/O error while writing " + path);
}

// ---------------------------------------------------------------------------
// Synthetic data
//
// Each prompt is a random 8-letter seed over 'a'..'z'. The rule-following
// continuation tiles the prompt, advancing each letter cyclically by a step
// derived from the prompt's first letter. A response of quality q in [0,1]
// emits the rule token with probability q and a uniform letter otherwise.
// The ground-truth score is 10 * (realized fraction of rule-matching
// positions), not 10*q: with responses this short the binomial gap between
// intended and realized quality is large enough to make intended-q labels
// inconsistent with the text itself. Chosen is always the higher-scoring
// response; ambiguity enters only through inject_label_noise.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kPromptLen = 8;

inline int rule_step(std::string_view prompt) {
  return 1 + (prompt[0] - 'a') % 3;
}

inline char rule_char(std::string_view prompt, std::size_t i) {
  const int step = rule_step(prompt);
  return static_cast<char>(
      'a' + ((prompt[i % prompt.size()] - 'a') + step) % 26);
}

namespace detail {

inline std::string random_prompt(Rng& rng) {
  std::string p(kPromptLen, 'a');
  for (auto& c : p) c = static_cast<char>('a' + rng.below(26));
  return p;
}

inline std::string make_response(std::string_view prompt, double q,
                                 std::size_t len, Rng& rng) {
  std::string r(len, 'a');
  for (std::size_t i = 0; i < len; ++i) {
    if (rng.uniform() < q)
      r[i] = rule_char(prompt, i);
    else
      r[i] = static_cast<char>('a' + rng.below(26));
  }
  return r;
}

// Response length is a deterministic function of the prompt, so both
// responses of a pair share it and the SFT model can learn exactly where a
// continuation ends. With lengths drawn independently instead, the scored
// EOS token carries irreducible stopping-time noise that swamps the quality
// signal for close pairs.
inline std::size_t response_len(const SynthConfig& cfg,
                                std::string_view prompt) {
  return cfg.response_len_min +
         fnv1a64(prompt) %
             (cfg.response_len_max - cfg.response_len_min + 1);
}

// Fraction of positions where the response emits the rule token.
inline double rule_fraction(std::string_view prompt, std::string_view r) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (r[i] == rule_char(prompt, i)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(r.size());
}

}  // namespace detail

struct SynthData {
  // SFT lines are "prompt<TAB>response" with a perfect (q = 1) response.
  std::vector<std::string> sft_corpus;
  Dataset dataset;
};

inline SynthData gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  SynthData out;
  out.sft_corpus.reserve(cfg.n_sft_sequences);
  for (std::size_t i = 0; i < cfg.n_sft_sequences; ++i) {
    const std::string prompt = detail::random_prompt(rng);
    out.sft_corpus.push_back(
        prompt + "\t" +
        detail::make_response(prompt, 1.0, detail::response_len(cfg, prompt),
                              rng));
  }
  out.dataset.pairs.reserve(cfg.n_pairs);
  for (std::size_t i = 0; i < cfg.n_pairs; ++i) {
    const std::string prompt = detail::random_prompt(rng);
    const double q1 = rng.uniform();
    const double q2 = rng.uniform();
    const std::size_t len = detail::response_len(cfg, prompt);
    std::string r1 = detail::make_response(prompt, q1, len, rng);
    std::string r2 = detail::make_response(prompt, q2, len, rng);
    const double s1 = 10.0 * detail::rule_fraction(prompt, r1);
    const double s2 = 10.0 * detail::rule_fraction(prompt, r2);
    PreferencePair p;
    p.prompt = prompt;
    if (s1 >= s2) {
      p.chosen = std::move(r1);
      p.rejected = std::move(r2);
      p.score_chosen = s1;
      p.score_rejected = s2;
    } else {
      p.chosen = std::move(r2);
      p.rejected = std::move(r1);
      p.score_chosen = s2;
      p.score_rejected = s1;
    }
    out.dataset.pairs.push_back(std::move(p));
  }
  return out;
}

// Swaps chosen/rejected (and their scores) with probability flip_prob for
// every pair whose clarity |s1 - s2| is below clarity_cutoff. This is the
// noisy-ambiguous regime the reference-gap sampler is meant to mitigate.
inline Dataset inject_label_noise(const Dataset& ds, double clarity_cutoff,
                                  double flip_prob, std::uint64_t seed) {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0))
    throw usage_error("inject_label_noise: flip_prob must be in [0, 1]");
  Rng rng(seed);
  Dataset out = ds;
  for (std::size_t i = 0; i < out.pairs.size(); ++i) {
    auto& p = out.pairs[i];
    if (!p.has_scores())
      throw data_error("inject_label_noise: pair " + std::to_string(i) +
                       " is missing scores");
    if (std::abs(*p.score_chosen - *p.score_rejected) < clarity_cutoff) {
      if (rng.uniform() < flip_prob) {
        std::swap(p.chosen, p.rejected);
        std::swap(p.score_chosen, p.score_rejected);
      }
    }
  }
  return out;
}

}  // namespace prefgate
