#pragma once

#include <cstdint>

#include "imhsa/tensor.hpp"

namespace imhsa {

/// SplitMix64 generator. Portable by construction: every port that follows the
/// same recurrence reproduces the same datasets and initializations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// (next >> 11) * 2^-53, in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by multiply-shift on the top 53 bits.
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// Box-Muller standard normal; consumes exactly two draws.
double gaussian(Rng& rng);

/// Tensor of i.i.d. N(mean, stddev^2) values drawn in row-major order.
Tensor gaussian_tensor(Rng& rng, Shape shape, double stddev, DType dtype = DType::f32, double mean = 0.0);

}  // namespace imhsa
