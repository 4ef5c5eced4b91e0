#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefgate/corpus.hpp"
#include "prefgate/error.hpp"
#include "prefgate/lm.hpp"

namespace prefgate {

// Preference clarity |s1 - s2| over the ground-truth quality scores.
inline double clarity(const PreferencePair& pair) {
  if (!pair.has_scores())
    throw data_error("clarity: pair is missing ground-truth scores");
  return std::abs(*pair.score_chosen - *pair.score_rejected);
}

// A pair annotated with both length-normalized reference log-probabilities
// and their absolute gap, the sampling statistic.
struct ScoredPair {
  PreferencePair pair;
  NormalizedScore chosen_score;
  NormalizedScore rejected_score;
  double gap = 0.0;  // |chosen logp_norm - rejected logp_norm|
};

inline std::vector<ScoredPair> annotate(const Dataset& ds,
                                        const ModelParams& reference) {
  std::vector<ScoredPair> out;
  out.reserve(ds.pairs.size());
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& pair = ds.pairs[i];
    ScoredPair sp;
    sp.pair = pair;
    try {
      sp.chosen_score = score_response(reference, pair.prompt, pair.chosen);
      sp.rejected_score =
          score_response(reference, pair.prompt, pair.rejected);
    } catch (const data_error& e) {
      throw data_error("pair " + std::to_string(i) + ": " + e.what());
    }
    sp.gap = std::abs(sp.chosen_score.logp_norm - sp.rejected_score.logp_norm);
    out.push_back(std::move(sp));
  }
  return out;
}

// Retains exactly the pairs with gap >= delta (inclusive: boundary ties
// stay in), original order preserved.
inline std::vector<ScoredPair> filter(const std::vector<ScoredPair>& scored,
                                      double delta) {
  if (!(delta >= 0.0)) throw usage_error("filter: delta must be >= 0");
  std::vector<ScoredPair> out;
  for (const auto& sp : scored)
    if (sp.gap >= delta) out.push_back(sp);
  return out;
}

// One row of the clarity-vs-threshold curve. Means are absent (not zero)
// when nothing is retained.
struct ClarityCurveRow {
  double delta = 0.0;
  std::size_t retained_count = 0;
  double retained_fraction = 0.0;
  std::optional<double> mean_clarity;
  std::optional<double> mean_gap;
};

// Cumulative statistics over {gap >= delta} for each threshold in an
// ascending grid.
inline std::vector<ClarityCurveRow> clarity_curve(
    const std::vector<ScoredPair>& scored, const std::vector<double>& deltas) {
  for (std::size_t i = 0; i + 1 < deltas.size(); ++i)
    if (deltas[i] > deltas[i + 1])
      throw usage_error("clarity_curve: deltas must be ascending");
  for (const auto& sp : scored)
    if (!sp.pair.has_scores())
      throw data_error("clarity_curve: pair is missing ground-truth scores");

  std::vector<ClarityCurveRow> rows;
  const double total = static_cast<double>(scored.size());
  for (double delta : deltas) {
    ClarityCurveRow row;
    row.delta = delta;
    double clarity_sum = 0.0, gap_sum = 0.0;
    for (const auto& sp : filter(scored, delta)) {
      ++row.retained_count;
      clarity_sum += clarity(sp.pair);
      gap_sum += sp.gap;
    }
    row.retained_fraction =
        total > 0.0 ? static_cast<double>(row.retained_count) / total : 0.0;
    if (row.retained_count > 0) {
      row.mean_clarity = clarity_sum / static_cast<double>(row.retained_count);
      row.mean_gap = gap_sum / static_cast<double>(row.retained_count);
    }
    rows.push_back(row);
  }
  return rows;
}

// Smallest delta retaining at most `fraction` of the pairs (the gap
// quantile), used to extend the default grid toward a retention target.
inline double delta_for_retention(const std::vector<ScoredPair>& scored,
                                  double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw usage_error("delta_for_retention: fraction must be in (0, 1]");
  if (scored.empty()) throw usage_error("delta_for_retention: empty input");
  std::vector<double> gaps;
  gaps.reserve(scored.size());
  for (const auto& sp : scored) gaps.push_back(sp.gap);
  std::sort(gaps.begin(), gaps.end());
  const std::size_t keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(fraction * static_cast<double>(gaps.size())));
  return gaps[gaps.size() - keep];
}

// ---------------------------------------------------------------------------
// Scored JSONL: the corpus schema plus logp_chosen_norm, logp_rejected_norm
// and gap. The gap is recomputed from the stored norms on load so the
// ScoredPair invariant holds regardless of file edits.
// ---------------------------------------------------------------------------

inline void write_scored_jsonl(const std::vector<ScoredPair>& scored,
                               const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open " + path + " for writing");
  for (const auto& sp : scored) {
    nlohmann::json j = pair_to_json(sp.pair);
    j["logp_chosen_norm"] = sp.chosen_score.logp_norm;
    j["logp_rejected_norm"] = sp.rejected_score.logp_norm;
    j["gap"] = sp.gap;
    out << j.dump() << "\n";
  }
  out.flush();
  if (!out) throw data_error("I/O error while writing " + path);
}

inline std::vector<ScoredPair> load_scored_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path + " for reading");
  std::vector<ScoredPair> out;
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
    for (const char* key : {"logp_chosen_norm", "logp_rejected_norm"}) {
      if (!j.contains(key) || !j.at(key).is_number())
        throw data_error("line " + std::to_string(line_no) +
                         ": missing numeric field \"" + key + "\"");
    }
    ScoredPair sp;
    sp.chosen_score.logp_norm = j.at("logp_chosen_norm").get<double>();
    sp.rejected_score.logp_norm = j.at("logp_rejected_norm").get<double>();
    j.erase("logp_chosen_norm");
    j.erase("logp_rejected_norm");
    if (j.contains("gap")) j.erase("gap");
    sp.pair = pair_from_json(j, line_no);
    sp.gap = std::abs(sp.chosen_score.logp_norm - sp.rejected_score.logp_norm);
    out.push_back(std::move(sp));
  }
  if (in.bad()) throw data_error("I/O error while reading " + path);
  return out;
}

inline std::vector<ScoredPair> scored_from_dataset(const Dataset& ds) {
  // for re-filtering files that already carry scores; gap fields required
  std::vector<ScoredPair> out;
  out.reserve(ds.pairs.size());
  for (const auto& p : ds.pairs) {
    ScoredPair sp;
    sp.pair = p;
    out.push_back(std::move(sp));
  }
  return out;
}

inline Dataset dataset_from_scored(const std::vector<ScoredPair>& scored) {
  Dataset ds;
  ds.pairs.reserve(scored.size());
  for (const auto& sp : scored) ds.pairs.push_back(sp.pair);
  return ds;
}

// ---------------------------------------------------------------------------
// Curve CSV / SVG
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

// delta,retained_count,retained_fraction,mean_clarity,mean_gap with 6
// significant digits; absent means render as empty cells.
inline std::string curve_csv(const std::vector<ClarityCurveRow>& rows) {
  std::string out = "delta,retained_count,retained_fraction,mean_clarity,mean_gap\n";
  for (const auto& r : rows) {
    out += detail::fmt6(r.delta);
    out += "," + std::to_string(r.retained_count);
    out += "," + detail::fmt6(r.retained_fraction);
    out += ",";
    if (r.mean_clarity) out += detail::fmt6(*r.mean_clarity);
    out += ",";
    if (r.mean_gap) out += detail::fmt6(*r.mean_gap);
    out += "\n";
  }
  return out;
}

inline void write_curve_csv(const std::vector<ClarityCurveRow>& rows,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open " + path + " for writing");
  out << curve_csv(rows);
  out.flush();
  if (!out) throw data_error("I/O error while writing " + path);
}

// Mean clarity vs delta as a solid line on the left axis, retained count on
// a log-scale right axis as a dashed line.
inline std::string curve_svg(const std::vector<ClarityCurveRow>& rows) {
  const double W = 640, H = 400, ml = 60, mr = 70, mt = 30, mb = 50;
  const double pw = W - ml - mr, ph = H - mt - mb;
  double dmax = 1e-9, cmax = 1e-9;
  double nmax = 1.0;
  for (const auto& r : rows) {
    dmax = std::max(dmax, r.delta);
    if (r.mean_clarity) cmax = std::max(cmax, *r.mean_clarity);
    nmax = std::max(nmax, static_cast<double>(r.retained_count));
  }
  const double logmax = std::log10(nmax + 1.0);
  auto x_of = [&](double d) { return ml + (dmax > 0 ? d / dmax : 0.0) * pw; };
  auto y_clarity = [&](double c) { return mt + ph - (c / (1.1 * cmax)) * ph; };
  auto y_count = [&](std::size_t n) {
    return mt + ph -
           (std::log10(static_cast<double>(n) + 1.0) / logmax) * ph;
  };

  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" "
      "height=\"400\" viewBox=\"0 0 640 400\">\n"
      "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  auto polyline = [&](const std::string& style, bool counts) {
    std::string pts;
    for (const auto& r : rows) {
      if (!counts && !r.mean_clarity) continue;
      const double x = x_of(r.delta);
      const double y =
          counts ? y_count(r.retained_count) : y_clarity(*r.mean_clarity);
      pts += detail::fmt6(x) + "," + detail::fmt6(y) + " ";
    }
    return "<polyline fill=\"none\" " + style + " points=\"" + pts + "\"/>\n";
  };
  svg += "<line x1=\"" + detail::fmt6(ml) + "\" y1=\"" + detail::fmt6(mt + ph) +
         "\" x2=\"" + detail::fmt6(ml + pw) + "\" y2=\"" +
         detail::fmt6(mt + ph) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + detail::fmt6(ml) + "\" y1=\"" + detail::fmt6(mt) +
         "\" x2=\"" + detail::fmt6(ml) + "\" y2=\"" + detail::fmt6(mt + ph) +
         "\" stroke=\"black\"/>\n";
  svg += polyline("stroke=\"#1f77b4\" stroke-width=\"2\"", false);
  svg += polyline(
      "stroke=\"#ff7f0e\" stroke-width=\"2\" stroke-dasharray=\"6,4\"", true);
  for (const auto& r : rows) {
    svg += "<text x=\"" + detail::fmt6(x_of(r.delta)) + "\" y=\"" +
           detail::fmt6(mt + ph + 18) +
           "\" font-size=\"11\" text-anchor=\"middle\">" +
           detail::fmt6(r.delta) + "</text>\n";
  }
  svg +=
      "<text x=\"320\" y=\"392\" font-size=\"12\" text-anchor=\"middle\">"
      "sampling threshold &#948;</text>\n"
      "<text x=\"16\" y=\"200\" font-size=\"12\" text-anchor=\"middle\" "
      "transform=\"rotate(-90 16 200)\" fill=\"#1f77b4\">mean clarity</text>\n"
      "<text x=\"628\" y=\"200\" font-size=\"12\" text-anchor=\"middle\" "
      "transform=\"rotate(90 628 200)\" fill=\"#ff7f0e\">retained pairs "
      "(log)</text>\n</svg>\n";
  return svg;
}

inline void write_curve_svg(const std::vector<ClarityCurveRow>& rows,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open " + path + " for writing");
  out << curve_svg(rows);
  out.flush();
  if (!out) throw data_error("I/O error while writing " + path);
}

}  // namespace prefgate
