#include "ngpt/linalg.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <memory>
#include <thread>

#include "ngpt/errors.hpp"

namespace ngpt {
namespace {

constexpr std::size_t kNr = 32;   // columns per packed B panel
constexpr std::size_t kMr = 4;    // rows per micro-kernel call
constexpr std::size_t kKc = 128;  // depth of one packed block

std::atomic<int> g_threads{0};

int threads_from_env() {
  const char* env = std::getenv("NGPT_LAB_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

typedef double Vec8 __attribute__((vector_size(64), aligned(8)));

inline Vec8 load8(const double* p) {
  Vec8 v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}
inline void store8(double* p, Vec8 v) { __builtin_memcpy(p, &v, sizeof(v)); }

// Loads C (or zero) into a row buffer of kNr entries, handling ragged panels.
inline void load_row(const double* c, std::size_t ncols, bool load, double* buf) {
  for (std::size_t j = 0; j < kNr; ++j) buf[j] = (load && j < ncols) ? c[j] : 0.0;
}

// One row of C: acc accumulates A[0, p] * B[p, :] for p = 0..kc-1 in order.
// Loading C first (or starting from zero) keeps the summation sequential
// across depth blocks.
inline void micro_kernel_1(const double* a, const double* bp, std::size_t kc, double* c,
                           std::size_t ncols, bool load) {
  alignas(64) double buf[kNr];
  load_row(c, ncols, load, buf);
  Vec8 c0 = load8(buf), c1 = load8(buf + 8), c2 = load8(buf + 16), c3 = load8(buf + 24);
  for (std::size_t p = 0; p < kc; ++p) {
    const double* b = bp + p * kNr;
    const double av = a[p];
    c0 += av * load8(b);
    c1 += av * load8(b + 8);
    c2 += av * load8(b + 16);
    c3 += av * load8(b + 24);
  }
  store8(buf, c0), store8(buf + 8, c1), store8(buf + 16, c2), store8(buf + 24, c3);
  for (std::size_t j = 0; j < ncols; ++j) c[j] = buf[j];
}

// Four rows at once; each accumulator sees the same sequential k order as
// micro_kernel_1.
inline void micro_kernel_4(const double* a, std::size_t lda, const double* bp, std::size_t kc,
                           double* c, std::size_t ldc, std::size_t ncols, bool load) {
  alignas(64) double buf[4][kNr];
  for (std::size_t r = 0; r < 4; ++r) load_row(c + r * ldc, ncols, load, buf[r]);
  Vec8 c00 = load8(buf[0]), c01 = load8(buf[0] + 8), c02 = load8(buf[0] + 16),
       c03 = load8(buf[0] + 24);
  Vec8 c10 = load8(buf[1]), c11 = load8(buf[1] + 8), c12 = load8(buf[1] + 16),
       c13 = load8(buf[1] + 24);
  Vec8 c20 = load8(buf[2]), c21 = load8(buf[2] + 8), c22 = load8(buf[2] + 16),
       c23 = load8(buf[2] + 24);
  Vec8 c30 = load8(buf[3]), c31 = load8(buf[3] + 8), c32 = load8(buf[3] + 16),
       c33 = load8(buf[3] + 24);
  const double* a0 = a;
  const double* a1 = a + lda;
  const double* a2 = a + 2 * lda;
  const double* a3 = a + 3 * lda;
  for (std::size_t p = 0; p < kc; ++p) {
    const double* b = bp + p * kNr;
    const Vec8 b0 = load8(b), b1 = load8(b + 8), b2 = load8(b + 16), b3 = load8(b + 24);
    double av = a0[p];
    c00 += av * b0, c01 += av * b1, c02 += av * b2, c03 += av * b3;
    av = a1[p];
    c10 += av * b0, c11 += av * b1, c12 += av * b2, c13 += av * b3;
    av = a2[p];
    c20 += av * b0, c21 += av * b1, c22 += av * b2, c23 += av * b3;
    av = a3[p];
    c30 += av * b0, c31 += av * b1, c32 += av * b2, c33 += av * b3;
  }
  store8(buf[0], c00), store8(buf[0] + 8, c01), store8(buf[0] + 16, c02), store8(buf[0] + 24, c03);
  store8(buf[1], c10), store8(buf[1] + 8, c11), store8(buf[1] + 16, c12), store8(buf[1] + 24, c13);
  store8(buf[2], c20), store8(buf[2] + 8, c21), store8(buf[2] + 16, c22), store8(buf[2] + 24, c23);
  store8(buf[3], c30), store8(buf[3] + 8, c31), store8(buf[3] + 16, c32), store8(buf[3] + 24, c33);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < ncols; ++j) c[r * ldc + j] = buf[r][j];
}

void run_rows(const double* a, std::size_t lda, const double* packed, std::size_t n_panels,
              std::size_t kc, double* c, std::size_t ldc, std::size_t n, std::size_t row_begin,
              std::size_t row_end, bool load) {
  for (std::size_t jp = 0; jp < n_panels; ++jp) {
    const std::size_t j0 = jp * kNr;
    const std::size_t ncols = std::min(kNr, n - j0);
    const double* bp = packed + jp * kc * kNr;
    std::size_t i = row_begin;
    for (; i + kMr <= row_end; i += kMr) {
      micro_kernel_4(a + i * lda, lda, bp, kc, c + i * ldc + j0, ldc, ncols, load);
    }
    for (; i < row_end; ++i) {
      micro_kernel_1(a + i * lda, bp, kc, c + i * ldc + j0, ncols, load);
    }
  }
}

}  // namespace

int kernel_threads() {
  int n = g_threads.load(std::memory_order_relaxed);
  if (n == 0) {
    n = threads_from_env();
    g_threads.store(n, std::memory_order_relaxed);
  }
  return n;
}

void set_kernel_threads(int n) { g_threads.store(std::max(1, n), std::memory_order_relaxed); }

void gemm(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
          std::size_t ldc, std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0);
    return;
  }
  const std::size_t n_panels = (n + kNr - 1) / kNr;
  const std::size_t kc_max = std::min(k, kKc);
  std::unique_ptr<double[]> packed(new double[n_panels * kc_max * kNr]);

  const int threads = kernel_threads();
  const bool parallel = threads > 1 && m >= 64 && m * n * k >= (1u << 20);

  for (std::size_t k0 = 0; k0 < k; k0 += kKc) {
    const std::size_t kc = std::min(kKc, k - k0);
    for (std::size_t jp = 0; jp < n_panels; ++jp) {
      const std::size_t j0 = jp * kNr;
      const std::size_t ncols = std::min(kNr, n - j0);
      double* dst = packed.get() + jp * kc * kNr;
      for (std::size_t p = 0; p < kc; ++p) {
        const double* src = b + (k0 + p) * ldb + j0;
        std::size_t j = 0;
        for (; j < ncols; ++j) dst[p * kNr + j] = src[j];
        for (; j < kNr; ++j) dst[p * kNr + j] = 0.0;
      }
    }
    const bool load = accumulate || k0 > 0;
    const double* a_blk = a + k0;
    if (!parallel) {
      run_rows(a_blk, lda, packed.get(), n_panels, kc, c, ldc, n, 0, m, load);
    } else {
      // Row partitions are disjoint; every element is still computed by the
      // same sequential kernel, so the result does not depend on `threads`.
      std::vector<std::thread> pool;
      const std::size_t chunk = ((m + threads - 1) / threads + kMr - 1) / kMr * kMr;
      for (std::size_t r0 = 0; r0 < m; r0 += chunk) {
        const std::size_t r1 = std::min(m, r0 + chunk);
        pool.emplace_back(run_rows, a_blk, lda, packed.get(), n_panels, kc, c, ldc, n, r0, r1,
                          load);
      }
      for (auto& t : pool) t.join();
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() > 2 || b.rank() > 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  gemm(a.raw(), a.cols(), b.raw(), b.cols(), c.raw(), c.cols(), a.rows(), b.cols(), a.cols(),
       false);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() > 2 || b.rank() > 2 || a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + to_string(a.shape()) +
                         " x " + to_string(b.shape()) + "^T");
  }
  return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() > 2 || b.rank() > 2 || a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: inner dimensions differ for " + to_string(a.shape()) +
                         "^T x " + to_string(b.shape()));
  }
  return matmul(transpose(a), b);
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double mx = neg_inf;
    for (double v : row) mx = std::max(mx, v);
    if (mx == neg_inf) {
      throw NumericError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    }
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    const double inv = 1.0 / sum;
    for (double& v : row) v *= inv;
  }
  return out;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  if (std::isfinite(s) && s > 1e-290) return std::sqrt(s);
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  if (m == 0.0 || !std::isfinite(m)) return std::sqrt(s);
  s = 0.0;
  for (double x : v) s += (x / m) * (x / m);
  return m * std::sqrt(s);
}

std::vector<double> singular_values(const Tensor& m) {
  if (m.rank() > 2 || m.empty()) {
    throw DimensionError("singular_values: need a non-empty matrix, got " + to_string(m.shape()));
  }
  if (!m.all_finite()) throw NumericError("singular_values: non-finite input");

  // Work on the orientation with fewer columns; singular values are shared.
  const Tensor work_src = m.cols() > m.rows() ? transpose(m) : m;
  const std::size_t rows = work_src.rows(), cols = work_src.cols();
  // Column-major copy so column operations are contiguous.
  std::vector<double> w(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) w[j * rows + i] = work_src.at(i, j);

  constexpr double kTol = 1e-12;
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double* cp = w.data() + p * rows;
        double* cq = w.data() + q * rows;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = cp[i], y = cq[i];
          cp[i] = cs * x - sn * y;
          cq[i] = sn * x + cs * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(cols);
  for (std::size_t j = 0; j < cols; ++j) sv[j] = l2_norm({w.data() + j * rows, rows});
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

}  // namespace ngpt
