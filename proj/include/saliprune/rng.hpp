#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace saliprune {

/// Deterministic pseudorandom source. Conversions from raw engine bits are
/// done here rather than through <random> distributions so that sample
/// sequences do not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }
  /// Number of raw 64-bit draws consumed so far.
  std::uint64_t position() const { return position_; }

  std::uint64_t next_u64() {
    ++position_;
    return engine_();
  }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the result unbiased.
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Standard Gumbel draw, -log(-log U).
  double gumbel() { return -std::log(-std::log(uniform())); }

  bool bernoulli(double p) { return uniform() < p; }

  /// Independent stream derived from this generator's seed and `stream_id`;
  /// does not advance this generator.
  Rng substream(std::uint64_t stream_id) const {
    return Rng(mix(seed_ ^ mix(stream_id + 0x9E3779B97F4A7C15ULL)));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t position_ = 0;
};

}  // namespace saliprune
