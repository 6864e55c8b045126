#pragma once

#include <cstdint>
#include <random>

#include "stdit/tensor.hpp"

namespace stdit {

/// Seeded generator; the only randomness source in the library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  /// Normal(0, std) redrawn until within two standard deviations.
  double truncated_normal(double std);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Seed for the `index`-th independent stream derived from `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

Tensor randn(const Shape& shape, Rng& rng, DType dtype = DType::f32);
Tensor rand_uniform(const Shape& shape, double lo, double hi, Rng& rng, DType dtype = DType::f32);

}  // namespace stdit
