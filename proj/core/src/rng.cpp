#include "ngpt/rng.hpp"

#include <cmath>
#include <numbers>

namespace ngpt {

std::uint64_t Rng::next() noexcept {
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::uniform_index(std::uint64_t bound) noexcept {
  if (bound <= 1) return 0;
  // 2^64 mod bound: values below it would over-represent small residues.
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = next();
    if (r >= threshold) return r % bound;
  }
}

void Rng::normal_pair(double& z0, double& z1) noexcept {
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double phi = 2.0 * std::numbers::pi * u2;
  z0 = r * std::cos(phi);
  z1 = r * std::sin(phi);
}

Tensor randn(Rng& rng, const Shape& shape, double mean, double stddev) {
  Tensor out(shape);
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); i += 2) {
    double z0 = 0.0, z1 = 0.0;
    rng.normal_pair(z0, z1);
    d[i] = mean + stddev * z0;
    if (i + 1 < d.size()) d[i + 1] = mean + stddev * z1;
  }
  return out;
}

}  // namespace ngpt
