#pragma once

#include <array>
#include <sstream>
#include <string>
#include <vector>

#include "mvsds/core/common.hpp"
#include "mvsds/core/rng.hpp"

namespace mvsds::vocab {

// Fixed caption vocabulary. Token ids are positions in this list and must
// never be reordered; serialized datasets carry a hash of the list so stale
// checkpoints or datasets are rejected early.
inline const std::vector<std::string>& tokens() {
  static const std::vector<std::string> list = {
      // shapes
      "sphere", "box", "cylinder", "cone", "torus",
      // colors
      "red", "green", "blue", "yellow", "orange", "purple", "cyan", "magenta",
      // counts
      "one", "two", "three",
      // style suffix appended to every multi-view caption
      "3d_asset",
      // designated negative-prompt token
      "low_quality",
      // padding
      "<pad>"};
  return list;
}

constexpr int kNumShapes = 5;
constexpr int kNumColors = 8;
constexpr int kShapeBase = 0;
constexpr int kColorBase = kNumShapes;
constexpr int kCountBase = kColorBase + kNumColors;
constexpr int kStyle3dId = kCountBase + 3;
constexpr int kNegLowQualityId = kStyle3dId + 1;
constexpr int kPadId = kNegLowQualityId + 1;
constexpr int kMaxCaptionLen = 8;

inline int size() { return static_cast<int>(tokens().size()); }

inline const std::string& token_name(int id) {
  MVSDS_REQUIRE(id >= 0 && id < size(), "token id ", id, " out of range");
  return tokens()[static_cast<size_t>(id)];
}

inline int token_id(const std::string& name) {
  const auto& list = tokens();
  for (size_t i = 0; i < list.size(); ++i)
    if (list[i] == name) return static_cast<int>(i);
  std::string known;
  for (const auto& t : list) known += " " + t;
  throw invalid_argument("unknown token '" + name + "'; vocabulary:" + known);
}

inline std::vector<int> parse_prompt(const std::string& text) {
  std::vector<int> ids;
  std::istringstream iss(text);
  std::string word;
  while (iss >> word) ids.push_back(token_id(word));
  MVSDS_REQUIRE(static_cast<int>(ids.size()) <= kMaxCaptionLen,
                "prompt longer than ", kMaxCaptionLen, " tokens");
  return ids;
}

inline std::string format_tokens(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == kPadId) continue;
    if (!out.empty()) out += " ";
    out += token_name(id);
  }
  return out;
}

// Pads (or checks) a caption to a fixed model sequence length.
inline std::vector<int> pad_tokens(std::vector<int> ids, int length = kMaxCaptionLen) {
  MVSDS_REQUIRE(static_cast<int>(ids.size()) <= length, "caption too long");
  while (static_cast<int>(ids.size()) < length) ids.push_back(kPadId);
  return ids;
}

inline std::vector<int> unconditional_tokens(int length = kMaxCaptionLen) {
  return std::vector<int>(static_cast<size_t>(length), kPadId);
}

inline std::vector<int> negative_tokens(int length = kMaxCaptionLen) {
  return pad_tokens({kNegLowQualityId}, length);
}

inline std::string vocabulary_hash() {
  std::string joined;
  for (const auto& t : tokens()) joined += t + "|";
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(mvsds::detail::fnv1a64(joined)));
  return buf;
}

// Linear sRGB-ish palette for the eight color tokens.
inline std::array<float, 3> color_rgb(int color_index) {
  static const std::array<std::array<float, 3>, kNumColors> palette = {{
      {0.90f, 0.15f, 0.15f},  // red
      {0.15f, 0.80f, 0.20f},  // green
      {0.20f, 0.30f, 0.90f},  // blue
      {0.95f, 0.85f, 0.15f},  // yellow
      {0.95f, 0.55f, 0.10f},  // orange
      {0.60f, 0.20f, 0.80f},  // purple
      {0.10f, 0.80f, 0.85f},  // cyan
      {0.90f, 0.20f, 0.70f},  // magenta
  }};
  MVSDS_REQUIRE(color_index >= 0 && color_index < kNumColors, "bad color index");
  return palette[static_cast<size_t>(color_index)];
}

}  // namespace mvsds::vocab
