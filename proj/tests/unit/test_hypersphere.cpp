#include <cmath>
#include <numbers>

#include "ngpt/errors.hpp"
#include "ngpt/hypersphere.hpp"
#include "ngpt/linalg.hpp"
#include "test_support.hpp"

namespace ngpt {
namespace {

using test::random_tensor;
using Vec = std::vector<double>;

Vec random_unit(std::size_t d, std::uint64_t seed) {
  Tensor t = random_tensor({d}, seed);
  return unit_normalize(t.data());
}

double norm(const Vec& v) { return l2_norm(v); }

double dist(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Unit vector at angle theta from a in the plane spanned by a and r.
Vec at_angle(const Vec& a, const Vec& r, double theta) {
  const double c = dot(a, r);
  Vec perp(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) perp[i] = r[i] - c * a[i];
  perp = unit_normalize(perp);
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = std::cos(theta) * a[i] + std::sin(theta) * perp[i];
  return out;
}

TEST(UnitNormalize, Examples) {
  Vec v = unit_normalize(Vec{3, 4});
  EXPECT_NEAR(v[0], 0.6, 1e-15);
  EXPECT_NEAR(v[1], 0.8, 1e-15);
  Vec u = random_unit(9, 1);
  Vec again = unit_normalize(u);
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(again[i], u[i], 1e-15);
}

TEST(UnitNormalize, RandomHasUnitNorm) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor t = random_tensor({31}, s, 100.0);
    EXPECT_NEAR(norm(unit_normalize(t.data())), 1.0, 1e-14);
  }
}

TEST(UnitNormalize, DegenerateThrows) {
  EXPECT_THROW(unit_normalize(Vec{0, 0, 0}), DegenerateVectorError);
  EXPECT_THROW(unit_normalize(Vec{1e-31, 0}), DegenerateVectorError);
  EXPECT_NO_THROW(unit_normalize(Vec{1e-29, 0}));
}

TEST(Slerp, Endpoints) {
  Vec a = random_unit(6, 2), b = random_unit(6, 3);
  Vec s0 = slerp(a, b, 0.0), s1 = slerp(a, b, 1.0);
  EXPECT_LT(dist(s0, a), 1e-15);
  EXPECT_LT(dist(s1, b), 1e-14);
}

TEST(Slerp, OrthogonalMidpoint) {
  Vec a{1, 0, 0}, b{0, 1, 0};
  Vec m = slerp(a, b, 0.5);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(m[0], r, 1e-15);
  EXPECT_NEAR(m[1], r, 1e-15);
  EXPECT_NEAR(m[2], 0.0, 1e-15);
}

TEST(Slerp, OneThirdOfRightAngle) {
  Vec m = slerp(Vec{1, 0, 0, 0}, Vec{0, 1, 0, 0}, 1.0 / 3.0);
  EXPECT_NEAR(m[0], std::sqrt(3.0) / 2.0, 1e-15);
  EXPECT_NEAR(m[1], 0.5, 1e-15);
}

TEST(Slerp, UnitNormAndConstantAngularSpeed) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    Vec a = random_unit(8, 100 + s), b = random_unit(8, 1000 + s);
    const double theta = std::acos(std::clamp(dot(a, b), -1.0, 1.0));
    for (double al : {0.0, 0.1, 0.37, 0.5, 0.81, 1.0}) {
      Vec y = slerp(a, b, al);
      ASSERT_NEAR(norm(y), 1.0, 1e-10);
      ASSERT_NEAR(dot(y, a), std::cos(al * theta), 1e-10);
    }
  }
}

TEST(Slerp, TinyAngleFallsBackToNormalizedLerp) {
  Vec a = random_unit(5, 7);
  Vec b = at_angle(a, random_unit(5, 8), 1e-9);
  Vec y = slerp(a, b, 0.4);
  Vec ref = unit_normalize(lerp(a, b, 0.4));
  EXPECT_LT(dist(y, ref), 1e-15);
  EXPECT_TRUE(std::isfinite(y[0]));
}

TEST(Slerp, AntipodalThrows) {
  Vec a{1, 0}, b{-1, 0};
  EXPECT_THROW(slerp(a, b, 0.5), NumericError);
}

TEST(Slerp, CoincidesWithNormalizedLerpAtThreePoints) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Vec a = random_unit(16, 300 + s), b = random_unit(16, 600 + s);
    for (double al : {0.0, 0.5, 1.0}) {
      EXPECT_LT(dist(slerp(a, b, al), unit_normalize(lerp(a, b, al))), 1e-10);
    }
  }
}

TEST(Slerp, CloseToNormalizedLerpForSmallAngles) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Vec a = random_unit(16, 900 + s);
    Vec b = at_angle(a, random_unit(16, 1900 + s), 0.5 * (s + 1) / 100.0);
    for (int k = 0; k <= 20; ++k) {
      const double al = k / 20.0;
      EXPECT_LT(dist(slerp(a, b, al), unit_normalize(lerp(a, b, al))), 0.02);
    }
  }
}

TEST(Lerp, Examples) {
  Vec a = random_unit(4, 9), b = random_unit(4, 10);
  EXPECT_EQ(lerp(a, b, 0.0), a);
  Vec m = lerp(Vec{0, 0}, Vec{2, 4}, 0.5);
  EXPECT_EQ(m, (Vec{1, 2}));
  Tensor x = random_tensor({11}, 11), y = random_tensor({11}, 12);
  Vec l = lerp(x.data(), y.data(), 0.3);
  for (std::size_t i = 0; i < 11; ++i) EXPECT_NEAR(l[i], 0.7 * x[i] + 0.3 * y[i], 1e-15);
}

TEST(Lerp, LengthMismatchThrows) {
  EXPECT_THROW(lerp(Vec{1, 2}, Vec{1}, 0.5), DimensionError);
}

TEST(TangentProject, Examples) {
  Vec h = random_unit(7, 13);
  for (double v : tangent_project(h, h)) EXPECT_NEAR(v, 0.0, 1e-15);
  Vec a{1, 0, 0}, b{0, 1, 0};
  Vec g = tangent_project(a, b);
  EXPECT_EQ(g, (Vec{0, -1, 0}));
}

TEST(TangentProject, OrthogonalToH) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    Vec h = random_unit(12, 2000 + s), b = random_unit(12, 3000 + s);
    EXPECT_LT(std::abs(dot(h, tangent_project(h, b))), 1e-12);
  }
}

TEST(EigenLR, EffectiveEqualsInitAtStart) {
  auto e = EigenLR::make(6, 0.05, 1.0 / std::sqrt(6.0));
  for (double v : e.effective()) EXPECT_EQ(v, 0.05);
  auto s = EigenLR::make(1, 0.3, 0.1);
  EXPECT_TRUE(s.is_scalar());
  EXPECT_DOUBLE_EQ(s.effective()[0], 0.3);
}

TEST(EigenLR, AbsoluteConstraintNonNegative) {
  auto e = EigenLR::make(4, 0.05, 0.5, AlphaConstraint::kAbsolute);
  e.raw = Tensor({1, 4}, std::vector<double>{-0.5, 0.25, -1.0, 0.0});
  auto eff = e.effective();
  for (double v : eff) EXPECT_GE(v, 0.0);
  EXPECT_DOUBLE_EQ(eff[0], 0.05);
  EXPECT_DOUBLE_EQ(eff[2], 0.1);
  e.constraint = AlphaConstraint::kFree;
  EXPECT_DOUBLE_EQ(e.effective()[0], -0.05);
}

TEST(ResidualStep, ZeroAlphaLeavesH) {
  Vec h = random_unit(8, 14);
  Tensor hbt = random_tensor({8}, 15);
  Vec hb(hbt.data().begin(), hbt.data().end());
  auto e = EigenLR::make(8, 0.0, 1.0);
  for (auto mode : {ResidualMode::kLerp, ResidualMode::kRiemannian}) {
    EXPECT_LT(dist(residual_step(h, hb, e, mode), h), 1e-15);
  }
  EXPECT_LT(dist(residual_step(h, hb, EigenLR::make(1, 0.0, 1.0), ResidualMode::kSlerp), h), 1e-15);
}

TEST(ResidualStep, FullStepReturnsNormalizedBlock) {
  Vec h = random_unit(8, 16);
  Tensor hb = random_tensor({8}, 17, 3.0);
  Vec y = residual_step(h, hb.data(), EigenLR::make(8, 1.0, 1.0), ResidualMode::kLerp);
  EXPECT_LT(dist(y, unit_normalize(hb.data())), 1e-15);
}

TEST(ResidualStep, LerpAndSlerpMidpointCoincideForOrthogonalInputs) {
  Vec h{1, 0, 0, 0}, hb{0, 5, 0, 0};
  auto e = EigenLR::make(1, 0.5, 1.0);
  Vec l = residual_step(h, hb, e, ResidualMode::kLerp);
  Vec s = residual_step(h, hb, e, ResidualMode::kSlerp);
  EXPECT_LT(dist(l, s), 1e-15);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(l[0], r, 1e-15);
  EXPECT_NEAR(l[1], r, 1e-15);
}

TEST(ResidualStep, SlerpWithVectorAlphaIsConfigError) {
  Vec h = random_unit(4, 18), hb = random_unit(4, 19);
  EXPECT_THROW(residual_step(h, hb, EigenLR::make(4, 0.5, 1.0), ResidualMode::kSlerp), ConfigError);
}

TEST(ResidualStep, RiemannianMatchesTangentFormula) {
  Vec h = random_unit(6, 20);
  Tensor hb = random_tensor({6}, 21);
  auto e = EigenLR::make(6, 0.2, 1.0);
  Vec b = unit_normalize(hb.data());
  Vec g = tangent_project(h, b);
  Vec ref(6);
  for (std::size_t i = 0; i < 6; ++i) ref[i] = h[i] - 0.2 * g[i];
  EXPECT_LT(dist(residual_step(h, hb.data(), e, ResidualMode::kRiemannian), unit_normalize(ref)), 1e-15);
}

TEST(ResidualStep, OutputUnitNormForAllModes) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Vec h = random_unit(10, 4000 + s);
    Tensor hb = random_tensor({10}, 5000 + s, 4.0);
    auto vec_alpha = EigenLR::make(10, 0.05, 0.3, AlphaConstraint::kFree);
    vec_alpha.raw = random_tensor({1, 10}, 6000 + s);
    auto scalar_alpha = EigenLR::make(1, 0.3, 1.0);
    EXPECT_NEAR(norm(residual_step(h, hb.data(), vec_alpha, ResidualMode::kLerp)), 1.0, 1e-10);
    EXPECT_NEAR(norm(residual_step(h, hb.data(), vec_alpha, ResidualMode::kRiemannian)), 1.0, 1e-10);
    EXPECT_NEAR(norm(residual_step(h, hb.data(), scalar_alpha, ResidualMode::kSlerp)), 1.0, 1e-10);
  }
}

TEST(NormalizeEmbeddingDim, Examples) {
  Tensor m = Tensor::from_rows({{3, 4}, {0, 2}});
  Tensor r = normalize_embedding_dim(m, Axis::kRows);
  EXPECT_EQ(r, Tensor::from_rows({{0.6, 0.8}, {0, 1}}));
  Tensor again = normalize_embedding_dim(r, Axis::kRows);
  EXPECT_LE(max_abs_diff(again, r), 1e-14);
}

TEST(NormalizeEmbeddingDim, RandomRowsAndCols) {
  Tensor m = random_tensor({16, 8}, 22);
  EXPECT_LT(max_norm_deviation(normalize_embedding_dim(m, Axis::kRows), Axis::kRows), 1e-12);
  EXPECT_LT(max_norm_deviation(normalize_embedding_dim(m, Axis::kCols), Axis::kCols), 1e-12);
  EXPECT_GT(max_norm_deviation(m, Axis::kRows), 0.1);
}

TEST(NormalizeEmbeddingDim, ZeroVectorThrows) {
  EXPECT_THROW(normalize_embedding_dim(Tensor::from_rows({{1, 0}, {0, 0}}), Axis::kRows),
               DegenerateVectorError);
  EXPECT_THROW(normalize_embedding_dim(Tensor::from_rows({{1, 0}, {1, 0}}), Axis::kCols),
               DegenerateVectorError);
}

TEST(Parsing, ModesRoundTrip) {
  for (auto m : {ResidualMode::kLerp, ResidualMode::kSlerp, ResidualMode::kRiemannian})
    EXPECT_EQ(parse_residual_mode(to_string(m)), m);
  for (auto c : {AlphaConstraint::kAbsolute, AlphaConstraint::kFree})
    EXPECT_EQ(parse_alpha_constraint(to_string(c)), c);
  EXPECT_THROW(parse_residual_mode("geodesic"), ConfigError);
}

}  // namespace
}  // namespace ngpt
