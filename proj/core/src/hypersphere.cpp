#include "ngpt/hypersphere.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ngpt/errors.hpp"
#include "ngpt/linalg.hpp"

namespace ngpt {
namespace {

constexpr double kDegenerateNorm = 1e-30;
constexpr double kSlerpMinAngle = 1e-7;
constexpr double kAntipodalSlack = 1e-12;

void require_equal_length(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": length " + std::to_string(a) + " vs " +
                         std::to_string(b));
  }
}

}  // namespace

ResidualMode parse_residual_mode(std::string_view s) {
  if (s == "lerp") return ResidualMode::kLerp;
  if (s == "slerp") return ResidualMode::kSlerp;
  if (s == "riemannian") return ResidualMode::kRiemannian;
  throw ConfigError("unknown residual_mode '" + std::string(s) +
                    "' (expected lerp, slerp or riemannian)");
}

std::string_view to_string(ResidualMode m) noexcept {
  switch (m) {
    case ResidualMode::kLerp: return "lerp";
    case ResidualMode::kSlerp: return "slerp";
    case ResidualMode::kRiemannian: return "riemannian";
  }
  return "lerp";
}

AlphaConstraint parse_alpha_constraint(std::string_view s) {
  if (s == "absolute") return AlphaConstraint::kAbsolute;
  if (s == "free") return AlphaConstraint::kFree;
  throw ConfigError("unknown alpha_constraint '" + std::string(s) +
                    "' (expected absolute or free)");
}

std::string_view to_string(AlphaConstraint c) noexcept {
  return c == AlphaConstraint::kFree ? "free" : "absolute";
}

EigenLR EigenLR::make(std::size_t dim, double init, double scale, AlphaConstraint constraint) {
  EigenLR e;
  e.raw = Tensor::matrix(1, dim, scale);
  e.init = init;
  e.scale = scale;
  e.constraint = constraint;
  return e;
}

std::vector<double> EigenLR::effective() const {
  std::vector<double> out(raw.data().begin(), raw.data().end());
  const double k = init / scale;
  for (double& v : out) v = (constraint == AlphaConstraint::kAbsolute ? std::abs(v) : v) * k;
  return out;
}

std::vector<double> unit_normalize(std::span<const double> x) {
  const double norm = l2_norm(x);
  if (!(norm >= kDegenerateNorm)) {
    throw DegenerateVectorError("unit_normalize: norm " + std::to_string(norm) +
                                " below 1e-30");
  }
  std::vector<double> out(x.begin(), x.end());
  for (double& v : out) v /= norm;
  return out;
}

std::vector<double> lerp(std::span<const double> a, std::span<const double> b, double alpha) {
  require_equal_length(a.size(), b.size(), "lerp");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - alpha) * a[i] + alpha * b[i];
  return out;
}

std::vector<double> slerp(std::span<const double> a, std::span<const double> b, double alpha) {
  require_equal_length(a.size(), b.size(), "slerp");
  const double c = std::clamp(dot(a, b), -1.0, 1.0);
  if (c <= -1.0 + kAntipodalSlack) {
    throw NumericError("slerp: antipodal inputs, geodesic undefined");
  }
  const double theta = std::acos(c);
  if (theta < kSlerpMinAngle) return unit_normalize(lerp(a, b, alpha));
  const double s = std::sin(theta);
  const double w1 = std::sin((1.0 - alpha) * theta) / s;
  const double w2 = std::sin(alpha * theta) / s;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = w1 * a[i] + w2 * b[i];
  return out;
}

std::vector<double> tangent_project(std::span<const double> h, std::span<const double> b) {
  require_equal_length(h.size(), b.size(), "tangent_project");
  const double c = dot(h, b);
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] * c - b[i];
  return out;
}

std::vector<double> residual_step(std::span<const double> h, std::span<const double> h_block,
                                  const EigenLR& alpha, ResidualMode mode) {
  require_equal_length(h.size(), h_block.size(), "residual_step");
  const std::vector<double> a = alpha.effective();
  if (a.size() != 1 && a.size() != h.size()) {
    throw DimensionError("residual_step: eigen learning rate of length " +
                         std::to_string(a.size()) + " for vectors of length " +
                         std::to_string(h.size()));
  }
  auto coord = [&](std::size_t i) { return a.size() == 1 ? a[0] : a[i]; };
  const std::vector<double> b = unit_normalize(h_block);
  std::vector<double> out(h.size());
  switch (mode) {
    case ResidualMode::kLerp:
      for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] + coord(i) * (b[i] - h[i]);
      return unit_normalize(out);
    case ResidualMode::kSlerp:
      if (!alpha.is_scalar()) {
        throw ConfigError("residual_step: slerp needs a scalar eigen learning rate");
      }
      return slerp(h, b, a[0]);
    case ResidualMode::kRiemannian: {
      const std::vector<double> g = tangent_project(h, b);
      for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] - coord(i) * g[i];
      return unit_normalize(out);
    }
  }
  return out;
}

void normalize_embedding_dim_inplace(Tensor& m, Axis axis) {
  const std::size_t rows = m.rows(), cols = m.cols();
  if (axis == Axis::kRows) {
    for (std::size_t r = 0; r < rows; ++r) {
      auto row = m.row(r);
      const double norm = l2_norm(row);
      if (!(norm >= kDegenerateNorm)) {
        throw DegenerateVectorError("normalize_embedding_dim: row " + std::to_string(r) +
                                    " has zero norm");
      }
      for (double& v : row) v /= norm;
    }
    return;
  }
  std::vector<double> sq(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < cols; ++c) sq[c] += row[c] * row[c];
  }
  for (std::size_t c = 0; c < cols; ++c) {
    sq[c] = std::sqrt(sq[c]);
    if (!(sq[c] >= kDegenerateNorm)) {
      throw DegenerateVectorError("normalize_embedding_dim: column " + std::to_string(c) +
                                  " has zero norm");
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < cols; ++c) row[c] /= sq[c];
  }
}

Tensor normalize_embedding_dim(const Tensor& m, Axis axis) {
  Tensor out = m;
  normalize_embedding_dim_inplace(out, axis);
  return out;
}

double max_norm_deviation(const Tensor& m, Axis axis) {
  double worst = 0.0;
  if (axis == Axis::kRows) {
    for (std::size_t r = 0; r < m.rows(); ++r) worst = std::max(worst, std::abs(l2_norm(m.row(r)) - 1.0));
    return worst;
  }
  std::vector<double> sq(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) sq[c] += row[c] * row[c];
  }
  for (double s : sq) worst = std::max(worst, std::abs(std::sqrt(s) - 1.0));
  return worst;
}

}  // namespace ngpt
