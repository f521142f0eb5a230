#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "polypseg/error.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

/// SplitMix64 generator. The state advances by the golden-ratio increment and
/// each output is the standard SplitMix64 finalizer of the new state, so a
/// seed determines the whole sequence on every platform. Normal draws use the
/// Box-Muller transform on two uniform draws (no cached second value).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  double normal() noexcept {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept {
    return mean + stddev * normal();
  }

  /// Independent stream keyed by `stream`; does not advance this generator.
  Rng split(std::uint64_t stream) const noexcept {
    return Rng(mix(seed_ ^ mix(stream + 0xD1B54A32D192ED03ULL)));
  }

  /// Stream keyed by a tuple of indices, e.g. (epoch, sample).
  Rng split(std::uint64_t a, std::uint64_t b) const noexcept {
    return split(a).split(b);
  }

  static std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

/// Zero-mean normal entries with standard deviation sqrt(2 / fan_in).
template <class T = float>
Tensor<T> he_normal_init(const Shape& shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw InvalidArgument("he_normal_init: fan_in must be > 0");
  if (shape.empty()) throw InvalidArgument("he_normal_init: empty shape");
  Tensor<T> out(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : out.vec()) v = static_cast<T>(rng.normal(0.0, stddev));
  return out;
}

}  // namespace polypseg
