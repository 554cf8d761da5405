#pragma once
// Deterministic sampling helpers on top of std::mt19937. The std <random>
// distributions are implementation-defined, so uniform/normal draws are done
// with explicit arithmetic to keep seeded runs reproducible everywhere.

#include <cmath>
#include <cstdint>
#include <random>

namespace catnet {

// Uniform in [0, 1) with 32 bits of resolution.
inline double rng_uniform(std::mt19937& rng) {
  return static_cast<double>(rng()) * (1.0 / 4294967296.0);
}

inline double rng_uniform(std::mt19937& rng, double lo, double hi) {
  return lo + (hi - lo) * rng_uniform(rng);
}

// Standard normal via Box-Muller; consumes exactly two raw draws.
inline double rng_normal(std::mt19937& rng) {
  const double u1 = (static_cast<double>(rng()) + 1.0) * (1.0 / 4294967296.0);
  const double u2 = rng_uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline double rng_normal(std::mt19937& rng, double mean, double stddev) {
  return mean + stddev * rng_normal(rng);
}

// Uniform index in [0, n). Modulo bias is negligible for the small ranges
// used here and keeps the draw count fixed.
inline std::size_t rng_index(std::mt19937& rng, std::size_t n) {
  return static_cast<std::size_t>(rng()) % n;
}

}  // namespace catnet
