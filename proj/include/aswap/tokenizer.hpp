#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace aswap {

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS/EOS/PAD.
inline constexpr int kVocabSize = 259;
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;

// [BOS] + bytes + [EOS]. Truncation is the caller's business.
inline std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(int(c));
  ids.push_back(kEos);
  return ids;
}

// [BOS] + bytes, no EOS; the encoding used to seed generation.
inline std::vector<int> tokenize_prefix(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(int(c));
  return ids;
}

// Inverse of tokenize up to the special tokens, which are dropped.
inline std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < 256) out.push_back(char(id));
  }
  return out;
}

}  // namespace aswap
