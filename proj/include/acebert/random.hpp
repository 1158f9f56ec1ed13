#pragma once

#include <cstdint>
#include <string_view>

namespace acebert {

// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Fans one master seed out into independent per-purpose streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose) {
  return mix64(master ^ mix64(fnv1a64(purpose)));
}

}  // namespace acebert
