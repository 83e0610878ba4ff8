#pragma once

#include <cstdint>
#include <random>

namespace cloc {

using Rng = std::mt19937_64;

/// Independent sub-seed for a named stream; splitmix64 finalizer.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace streams {
inline constexpr std::uint64_t model_init = 1;
inline constexpr std::uint64_t margin_init = 2;
inline constexpr std::uint64_t batches = 3;
inline constexpr std::uint64_t data = 4;
inline constexpr std::uint64_t bias = 5;
inline constexpr std::uint64_t split = 6;
}  // namespace streams

}  // namespace cloc
