#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace ren {

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream...) tuples.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> streams = {}) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto s : streams) {
    words.push_back(static_cast<std::uint32_t>(s));
    words.push_back(static_cast<std::uint32_t>(s >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline double gaussian(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace ren
