#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "ngpt/errors.hpp"
#include "ngpt/linalg.hpp"
#include "ngpt/rng.hpp"
#include "ngpt/tensor.hpp"
#include "test_support.hpp"

namespace ngpt {
namespace {

using test::expect_near;
using test::naive_matmul;
using test::random_tensor;

constexpr double kInf = std::numeric_limits<double>::infinity();

TEST(Tensor, ShapeMatchesDataLength) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({1, 1, 1, 1}), DimensionError);
}

TEST(Tensor, ElementwiseOpsRejectMismatchedShapes) {
  EXPECT_THROW(add(Tensor::matrix(2, 3), Tensor::matrix(3, 2)), DimensionError);
  EXPECT_THROW(hadamard(Tensor::matrix(1, 3), Tensor::matrix(1, 2)), DimensionError);
}

TEST(Matmul, IdentityCase) {
  auto r = matmul(Tensor::from_rows({{1, 0}, {0, 1}}), Tensor::from_rows({{2, 3}, {4, 5}}));
  EXPECT_EQ(r, Tensor::from_rows({{2, 3}, {4, 5}}));
}

TEST(Matmul, RowTimesColumn) {
  auto r = matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}}));
  EXPECT_EQ(r, Tensor::from_rows({{11}}));
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  auto a = random_tensor({5, 7}, 1);
  auto b = random_tensor({7, 3}, 2);
  expect_near(matmul(a, b), naive_matmul(a, b), 1e-12);
}

TEST(Matmul, LargeBlockedShapesMatchNaive) {
  // Exercises the packed kernel's edge tiles.
  auto a = random_tensor({37, 129}, 3);
  auto b = random_tensor({129, 71}, 4);
  expect_near(matmul(a, b), naive_matmul(a, b), 1e-11);
}

TEST(Matmul, TransposedVariantsMatchOracle) {
  auto a = random_tensor({9, 6}, 5);
  auto b = random_tensor({11, 6}, 6);
  expect_near(matmul_nt(a, b), naive_matmul(a, transpose(b)), 1e-12);
  auto c = random_tensor({9, 4}, 7);
  expect_near(matmul_tn(a, c), naive_matmul(transpose(a), c), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::matrix(2, 3), Tensor::matrix(4, 5));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Matmul, Associativity) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto a = random_tensor({4, 6}, 10 + s);
    auto b = random_tensor({6, 5}, 20 + s);
    auto c = random_tensor({5, 3}, 30 + s);
    expect_near(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), 1e-9);
  }
}

TEST(Matmul, ThreadCountDoesNotChangeBits) {
  auto a = random_tensor({64, 200}, 8);
  auto b = random_tensor({200, 96}, 9);
  const int before = kernel_threads();
  set_kernel_threads(1);
  auto one = matmul(a, b);
  set_kernel_threads(4);
  auto four = matmul(a, b);
  set_kernel_threads(before);
  EXPECT_EQ(one, four);
}

TEST(Softmax, UniformRow) {
  auto p = softmax_rows(Tensor::from_rows({{0, 0, 0}}));
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, MaskedEntryIsExactlyZero) {
  auto p = softmax_rows(Tensor::from_rows({{-kInf, 0}}));
  EXPECT_EQ(p[0], 0.0);
  EXPECT_EQ(p[1], 1.0);
}

TEST(Softmax, MatchesDirectFormula) {
  auto p = softmax_rows(Tensor::from_rows({{1, 2, 3}}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(p[1], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(p[2], std::exp(3.0) / z, 1e-12);
}

TEST(Softmax, FullyMaskedRowThrows) {
  EXPECT_THROW(softmax_rows(Tensor::from_rows({{1, 2}, {-kInf, -kInf}})), NumericError);
}

TEST(Softmax, RowsSumToOneAndStayInUnitInterval) {
  auto x = random_tensor({20, 13}, 11, 30.0);
  auto p = softmax_rows(x);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto p = softmax_rows(Tensor::from_rows({{1000, 1000}}));
  EXPECT_NEAR(p[0], 0.5, 1e-15);
}

TEST(L2Norm, Examples) {
  std::vector<double> v{3, 4};
  EXPECT_EQ(l2_norm(v), 5.0);
  std::vector<double> z{0, 0, 0};
  EXPECT_EQ(l2_norm(z), 0.0);
}

TEST(L2Norm, MatchesSumOfSquares) {
  auto v = random_tensor({17}, 12);
  double s = 0.0;
  for (double x : v.data()) s += x * x;
  EXPECT_NEAR(l2_norm(v.data()), std::sqrt(s), 1e-14);
}

TEST(L2Norm, NoOverflowForHugeEntries) {
  std::vector<double> v{3e200, 4e200};
  EXPECT_NEAR(l2_norm(v) / 5e200, 1.0, 1e-15);
}

TEST(SingularValues, Identity) {
  Tensor eye = Tensor::matrix(4, 4);
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  auto s = singular_values(eye);
  ASSERT_EQ(s.size(), 4u);
  for (double v : s) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(SingularValues, DiagonalDescending) {
  auto s = singular_values(Tensor::from_rows({{1, 0, 0}, {0, 3, 0}, {0, 0, 2}}));
  ASSERT_EQ(s.size(), 3u);
  EXPECT_NEAR(s[0], 3.0, 1e-14);
  EXPECT_NEAR(s[1], 2.0, 1e-14);
  EXPECT_NEAR(s[2], 1.0, 1e-14);
}

std::vector<double> gram_eigen_oracle(const Tensor& m) {
  Eigen::MatrixXd a(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) a(i, j) = m.at(i, j);
  Eigen::MatrixXd g = a.cols() <= a.rows() ? Eigen::MatrixXd(a.transpose() * a)
                                           : Eigen::MatrixXd(a * a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + g.rows());
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

TEST(SingularValues, SquaresMatchGramEigenvalues) {
  auto m = random_tensor({8, 5}, 13);
  auto s = singular_values(m);
  auto ev = gram_eigen_oracle(m);
  ASSERT_EQ(s.size(), ev.size());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i] * s[i], ev[i], 1e-9);
}

TEST(SingularValues, WideMatrixMatchesGramEigenvalues) {
  auto m = random_tensor({4, 9}, 14);
  auto s = singular_values(m);
  auto ev = gram_eigen_oracle(m);
  ASSERT_EQ(s.size(), 4u);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i] * s[i], ev[i], 1e-9);
}

TEST(SingularValues, RowPermutationInvariance) {
  auto m = random_tensor({7, 5}, 15);
  Tensor p = Tensor::matrix(7, 5);
  const std::size_t perm[7] = {3, 0, 6, 1, 5, 2, 4};
  for (std::size_t r = 0; r < 7; ++r)
    std::copy(m.row(perm[r]).begin(), m.row(perm[r]).end(), p.row(r).begin());
  auto a = singular_values(m);
  auto b = singular_values(p);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(SingularValues, RankDeficientHasZero) {
  auto s = singular_values(Tensor::from_rows({{1, 2}, {2, 4}, {3, 6}}));
  EXPECT_NEAR(s[1], 0.0, 1e-12);
  EXPECT_NEAR(s[0], std::sqrt(70.0), 1e-12);
}

TEST(SingularValues, NonFiniteInputThrows) {
  auto m = Tensor::from_rows({{1, std::nan("")}, {0, 1}});
  EXPECT_THROW(singular_values(m), NumericError);
}

TEST(Rng, SplitMix64ReferenceValue) {
  // Published first output of SplitMix64 from seed 0.
  Rng r(0);
  EXPECT_EQ(r.next(), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, UniformIndexCoversRangeEvenly) {
  Rng r(2);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) ++counts[r.uniform_index(7)];
  for (int c : counts) EXPECT_NEAR(c, n / 7.0, 5 * std::sqrt(n / 7.0));
}

TEST(Randn, ZeroStdGivesMean) {
  Rng r(3);
  auto t = randn(r, {5, 5}, 1.25, 0.0);
  for (double v : t.data()) EXPECT_EQ(v, 1.25);
}

TEST(Randn, SameSeedSameTensor) {
  Rng a(42), b(42);
  EXPECT_EQ(randn(a, {6, 7}, 0.0, 1.0), randn(b, {6, 7}, 0.0, 1.0));
}

TEST(Randn, MomentsMatchTarget) {
  Rng r(4);
  const double mean = 0.7, sd = 2.0;
  const std::size_t n = 100000;
  auto t = randn(r, {n}, mean, sd);
  const double m = std::accumulate(t.data().begin(), t.data().end(), 0.0) / n;
  double var = 0.0;
  for (double v : t.data()) var += (v - m) * (v - m);
  var /= n - 1;
  EXPECT_LT(std::abs(m - mean), 4 * sd / std::sqrt(double(n)));
  EXPECT_LT(std::abs(var - sd * sd), 0.05 * sd * sd);
}

TEST(Randn, BoxMullerPairLayout) {
  Rng r(5), ref(5);
  auto t = randn(r, {3}, 0.0, 1.0);
  double z0, z1, z2, z3;
  ref.normal_pair(z0, z1);
  ref.normal_pair(z2, z3);
  EXPECT_EQ(t[0], z0);
  EXPECT_EQ(t[1], z1);
  EXPECT_EQ(t[2], z2);
}

TEST(Determinism, ReplayedOpSequenceIsBitwiseIdentical) {
  auto run = [] {
    Rng r(99);
    auto a = randn(r, {12, 9}, 0, 1);
    auto b = randn(r, {9, 12}, 0, 1);
    return softmax_rows(matmul(a, b));
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace ngpt
