#include "stdit/random.hpp"

#include <cmath>
#include <vector>

namespace stdit {

double Rng::truncated_normal(double std) {
  for (;;) {
    const double v = normal();
    if (std::abs(v) <= 2.0) return v * std;
  }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor randn(const Shape& shape, Rng& rng, DType dtype) {
  std::vector<double> v(numel(shape));
  for (auto& e : v) e = rng.normal();
  return Tensor::from_doubles(shape, v, dtype);
}

Tensor rand_uniform(const Shape& shape, double lo, double hi, Rng& rng, DType dtype) {
  std::vector<double> v(numel(shape));
  for (auto& e : v) e = lo + (hi - lo) * rng.uniform();
  return Tensor::from_doubles(shape, v, dtype);
}

}  // namespace stdit
