#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fedbs {

/// Seeded random stream with explicitly specified sampling algorithms, so
/// that results are reproducible across standard-library implementations.
/// Stream derivation (derive) lets independent consumers (clients, rounds,
/// grid cells) draw from non-overlapping streams of one experiment seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() {
    // 53 random bits -> exactly representable double in [0,1).
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached spare; one sample per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n) by rejection, unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  /// Mix (seed, a, b) into a fresh stream seed. SplitMix64 finalizer.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t a,
                              std::uint64_t b) {
    std::uint64_t z = seed;
    z = mix(z + 0x9e3779b97f4a7c15ULL + a);
    z = mix(z + 0x9e3779b97f4a7c15ULL + b);
    return z;
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace fedbs
