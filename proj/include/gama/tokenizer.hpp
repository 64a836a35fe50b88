#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gama::tok {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by specials.
inline constexpr int kBos = 256;   // sequence start / [CLS] for the Q-Former text side
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kDec = 259;   // [DEC] start token for grounded generation
inline constexpr int kResp = 260;  // instruction/response delimiter
inline constexpr int kVocabSize = 261;

std::vector<int> encode(std::string_view text);
// Drops special ids.
std::string decode(std::span<const int> ids);

}  // namespace gama::tok
