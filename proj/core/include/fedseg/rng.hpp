#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fedseg {

/// splitmix64; used to spread user seeds and derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(a) ^ b);
}

/// Deterministic RNG with hand-rolled distributions. std::mt19937_64 output is
/// fixed by the standard, and we avoid std::*_distribution whose sequences are
/// implementation-defined, so any seed replays the same stream on any stdlib.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(mix_seed(seed)), engine_(seed_) {}

  /// Independent stream derived from this rng's seed and a tag; drawing from
  /// the fork does not advance the parent.
  Rng fork(std::uint64_t tag) const {
    Rng r(0);
    r.seed_ = mix_seed(seed_, tag);
    r.engine_.seed(r.seed_);
    return r;
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n); n must be >= 1.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  int uniform_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool coin() { return (engine_() >> 63) != 0; }

  /// Box-Muller normal; spares are cached pairwise.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fedseg
