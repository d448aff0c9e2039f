#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "cmfd/tensor.hpp"

namespace cmfd {

// Portable deterministic random source. Distributions are derived by hand
// from the raw 64-bit engine because std:: distributions are not specified
// bit-for-bit across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller; discards the second variate to keep the stream position simple.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Independent child stream; children with distinct tags do not overlap in practice.
  Rng split(std::uint64_t tag) {
    std::uint64_t z = next() + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
  }

  template <class T>
  Tensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  template <class T>
  Tensor<T> normal_tensor(Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(stddev * normal());
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

// Convolution weight init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> conv_init(Rng& rng, Shape shape, int fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor<T>(std::move(shape), -bound, bound);
}

}  // namespace cmfd
