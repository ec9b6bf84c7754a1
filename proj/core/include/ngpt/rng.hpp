#pragma once

#include <cstdint>

#include "ngpt/tensor.hpp"

namespace ngpt {

/// SplitMix64 generator: 64-bit state, one output per call.
///
///   state += 0x9E3779B97F4A7C15
///   z = state
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   return z ^ (z >> 31)
///
/// The integer stream depends only on the seed, so it is identical on
/// every platform. Derived doubles use `(next() >> 11) * 2^-53`.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

  std::uint64_t next() noexcept;

  /// Uniform double in [0, 1).
  double uniform() noexcept;

  /// Uniform integer in [0, bound). Rejection sampling, no modulo bias.
  std::uint64_t uniform_index(std::uint64_t bound) noexcept;

  /// One standard normal pair via Box-Muller:
  ///   u1 = 1 - uniform()  (in (0, 1]),  u2 = uniform()
  ///   r = sqrt(-2 ln u1),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)
  void normal_pair(double& z0, double& z1) noexcept;

  std::uint64_t state() const noexcept { return state_; }
  void set_state(std::uint64_t s) noexcept { state_ = s; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t state_;
};

/// I.i.d. Gaussian tensor. Samples are drawn in Box-Muller pairs and written
/// in order (z0, z1, z0, z1, ...); an odd trailing element discards its z1.
Tensor randn(Rng& rng, const Shape& shape, double mean, double stddev);

}  // namespace ngpt
