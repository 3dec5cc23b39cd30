#pragma once

#include <array>
#include <string_view>

namespace dtr {

/// Reserved vocabulary ids; every Vocabulary places these at 0..7.
enum SpecialId : int {
  kPad = 0,
  kBos = 1,
  kEos = 2,
  kUnk = 3,
  kMask = 4,
  kStar = 5,
  kSep = 6,
  kCtx = 7,
};

inline constexpr int kNumSpecial = 8;

inline constexpr std::array<std::string_view, kNumSpecial> kSpecialTokens = {
    "<pad>", "<s>", "</s>", "<unk>", "[MASK]", "[*]", "[SEP]", "[CTX]"};

inline constexpr bool is_special(int id) { return id >= 0 && id < kNumSpecial; }

}  // namespace dtr
