#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "prefgate/error.hpp"

namespace prefgate {

// Byte-level vocabulary: ids 0..255 are raw bytes, then four specials.
using TokenId = std::uint16_t;

inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kSep = 258;
inline constexpr TokenId kPad = 259;
inline constexpr std::size_t kVocabSize = 260;
inline constexpr std::size_t kDefaultMaxLen = 256;

inline std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

inline std::string decode(const std::vector<TokenId>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id >= 256)
      throw data_error("decode: special token id " + std::to_string(id) +
                       " has no byte representation");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

// Token layout used for conditional scoring and training:
//   [BOS] prompt bytes [SEP] response bytes [EOS]
// The scored span covers the response bytes plus EOS, so
// response_len = |response| + 1. The EOS token is scored on purpose: the
// length-normalized probability then covers the model's decision to stop.
struct ScoringLayout {
  std::vector<TokenId> ids;
  std::size_t span_begin = 0;  // index of first response byte
  std::size_t span_end = 0;    // one past EOS
  std::size_t response_len = 0;
};

inline ScoringLayout build_sequence(std::string_view prompt,
                                    std::string_view response,
                                    std::size_t max_len = kDefaultMaxLen) {
  if (response.empty()) throw data_error("build_sequence: empty response");
  const std::size_t need = prompt.size() + response.size() + 3;
  if (need > max_len)
    throw data_error("build_sequence: layout needs " + std::to_string(need) +
                     " tokens but only " + std::to_string(max_len) +
                     " are available");
  ScoringLayout layout;
  layout.ids.reserve(need);
  layout.ids.push_back(kBos);
  for (unsigned char c : prompt) layout.ids.push_back(static_cast<TokenId>(c));
  layout.ids.push_back(kSep);
  layout.span_begin = layout.ids.size();
  for (unsigned char c : response)
    layout.ids.push_back(static_cast<TokenId>(c));
  layout.ids.push_back(kEos);
  layout.span_end = layout.ids.size();
  layout.response_len = response.size() + 1;
  return layout;
}

}  // namespace prefgate
