#pragma once

#include <cstdint>
#include <random>

namespace sermoe {

// All stochastic components draw from one of these, seeded from the config.
// An Rng instance is owned by a single thread.
using Rng = std::mt19937_64;

inline double uniform_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Strictly inside (0, 1); logistic-noise transforms need both endpoints open.
inline double uniform_open(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  double u = dist(rng);
  while (u <= 0.0 || u >= 1.0) {
    u = dist(rng);
  }
  return u;
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

}  // namespace sermoe
