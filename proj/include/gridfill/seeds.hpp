#pragma once

#include <cstdint>
#include <string_view>

namespace gridfill {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Child seed for a named subsystem: mix64(root ^ fnv1a(name)).
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view name) { return mix64(root ^ fnv1a(name)); }

/// Child seed for an indexed stream: mix64(root + mix64(index)).
constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) { return mix64(root + mix64(index)); }

}  // namespace gridfill
