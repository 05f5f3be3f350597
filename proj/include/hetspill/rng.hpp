#pragma once

// Seeded random streams. Every stochastic routine takes an explicit 64-bit
// seed; parallel work derives one substream per (seed, index) so output never
// depends on how work is scheduled.

#include <cstdint>
#include <random>

namespace hetspill::rng {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed of substream `index` (and optional `domain` tag) under `seed`.
inline constexpr std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index,
                                              std::uint64_t domain = 0) noexcept {
  return splitmix64(splitmix64(seed ^ splitmix64(domain)) + splitmix64(index + 0x632BE59BD9B4E019ULL));
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed, std::uint64_t index, std::uint64_t domain = 0) {
  return Engine(substream_seed(seed, index, domain));
}

/// Uniform on [0,1).
inline double uniform01(Engine& eng) {
  return std::generate_canonical<double, 53>(eng);
}

inline int bernoulli(Engine& eng, double p) { return uniform01(eng) < p ? 1 : 0; }

inline double standard_normal(Engine& eng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(eng);
}

// Domain tags keep substreams of different routines apart under one seed.
enum Domain : std::uint64_t {
  kScenario1 = 1,
  kScenario2 = 2,
  kBootstrap = 3,
  kNullDraws = 4,
  kOracle = 5,
};

}  // namespace hetspill::rng
