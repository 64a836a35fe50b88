#pragma once

#include <cstdint>
#include <string_view>

namespace gama {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

// 64-bit FNV-1a, optionally continuing from a previous hash.
constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : s) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

constexpr std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h = kFnvOffset) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= kFnvPrime;
  }
  return h;
}

// Seed for one item of a seeded run; independent of processing order.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) { return fnv1a(key, fnv1a_u64(seed)); }

}  // namespace gama
