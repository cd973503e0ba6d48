#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "segtran/tensor.hpp"

namespace segtran {

using Rng = std::mt19937_64;

template <Real T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  Tensor<T> out(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

template <Real T>
Tensor<T> normal_tensor(Shape shape, double mean, double stddev, Rng& rng) {
  Tensor<T> out(std::move(shape));
  std::normal_distribution<double> dist(mean, stddev);
  for (T& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

// uniform(−1/√fan_in, 1/√fan_in), used for affine maps and convolution biases.
template <Real T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform_tensor<T>(std::move(shape), -bound, bound, rng);
}

// uniform(−√(6/fan_in), √(6/fan_in)): keeps activation variance roughly
// constant through rectifier-like stages.
template <Real T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return uniform_tensor<T>(std::move(shape), -bound, bound, rng);
}

// splitmix64 finalizer; derives independent stream seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace segtran
