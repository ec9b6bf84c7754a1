#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ngpt/tensor.hpp"

namespace ngpt {

enum class ResidualMode { kLerp, kSlerp, kRiemannian };
enum class AlphaConstraint { kAbsolute, kFree };

ResidualMode parse_residual_mode(std::string_view s);
std::string_view to_string(ResidualMode m) noexcept;
AlphaConstraint parse_alpha_constraint(std::string_view s);
std::string_view to_string(AlphaConstraint c) noexcept;

/// Learnable step sizes of the nGPT residual update. The stored `raw`
/// value is rescaled by init/scale before use, so raw == scale means
/// effective == init.
struct EigenLR {
  Tensor raw;  // [1 x d_model], or [1 x 1] for a scalar rate
  double init = 0.05;
  double scale = 1.0;
  AlphaConstraint constraint = AlphaConstraint::kAbsolute;

  static EigenLR make(std::size_t dim, double init, double scale,
                      AlphaConstraint constraint = AlphaConstraint::kAbsolute);

  bool is_scalar() const noexcept { return raw.size() == 1; }
  std::vector<double> effective() const;
};

/// x / ||x||. Throws DegenerateVectorError when ||x|| < 1e-30.
std::vector<double> unit_normalize(std::span<const double> x);

/// Geodesic interpolation between unit vectors. Falls back to normalized
/// LERP below an angle of 1e-7; antipodal inputs throw NumericError.
std::vector<double> slerp(std::span<const double> a, std::span<const double> b, double alpha);

std::vector<double> lerp(std::span<const double> a, std::span<const double> b, double alpha);

/// h (h . b) - b: the negative of b projected onto the tangent space at h.
std::vector<double> tangent_project(std::span<const double> h, std::span<const double> b);

/// One nGPT residual update of the unit vector h towards the block output.
std::vector<double> residual_step(std::span<const double> h, std::span<const double> h_block,
                                  const EigenLR& alpha, ResidualMode mode);

enum class Axis { kRows, kCols };

/// Normalizes every row (kRows) or column (kCols) in place.
void normalize_embedding_dim_inplace(Tensor& m, Axis axis);
Tensor normalize_embedding_dim(const Tensor& m, Axis axis);

/// Largest |norm - 1| over the rows or columns of m.
double max_norm_deviation(const Tensor& m, Axis axis);

}  // namespace ngpt
