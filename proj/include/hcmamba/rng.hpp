#pragma once

#include <cmath>
#include <cstdint>

namespace hcm {

// Hand-rolled splitmix64 generator. Standard-library distributions are
// implementation defined, and the data pipeline promises byte-identical
// output for a given seed, so every random draw in the project goes
// through this fully specified generator.
struct SplitMix64 {
  uint64_t state;

  explicit SplitMix64(uint64_t seed = 0) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n) { return next() % n; }

  // Box-Muller; draws two uniforms per call and discards the second
  // branch so the draw count stays deterministic and easy to reason about.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
};

// Mixes extra words into a seed; used to derive independent streams
// (per image index, per epoch, ...) from one run seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  SplitMix64 g(seed ^ (0x632be59bd9b4e019ULL + salt * 0x9e3779b97f4a7c15ULL));
  g.next();
  return g.next();
}

}  // namespace hcm
