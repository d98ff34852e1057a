// SPDX-License-Identifier: Apache-2.0
/**
 * @file   rng.hpp
 * @brief  Named, independently seeded random streams.
 *
 * Every consumer of randomness (initialisation, masks, weight noise, data
 * order) draws from its own stream, keyed by (run seed, stream name). The key
 * is hashed with SplitMix64 and seeds a 64-bit Mersenne Twister, so adding
 * draws to one stream never shifts another.
 */
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace zoneout {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
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

constexpr std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) {
  return splitmix64(splitmix64(seed) ^ fnv1a(name));
}

class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}
  Rng(std::uint64_t seed, std::string_view stream)
    : engine_(stream_seed(seed, stream)) {}

  /// Child stream; deterministic in (this stream's seed, name), consumes no draws.
  Rng fork(std::string_view name) const { return Rng(seed_of(name)); }

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  std::mt19937_64 &engine() { return engine_; }

private:
  std::uint64_t seed_of(std::string_view name) const {
    // The engine's state is not a seed; hash its first output on a copy.
    std::mt19937_64 copy = engine_;
    return splitmix64(copy() ^ fnv1a(name));
  }

  std::mt19937_64 engine_;
};

} // namespace zoneout
