#include "ngpt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ngpt/errors.hpp"
#include "ngpt/linalg.hpp"

namespace ngpt::ad {
namespace {

constexpr double kDegenerateNorm = 1e-30;
constexpr double kSlerpMinAngle = 1e-7;
constexpr double kAntipodalSlack = 1e-12;

void check_arity(OpKind kind, std::size_t got, std::size_t want) {
  if (got != want) {
    throw Error(std::string("op ") + op_name(kind) + " expects " + std::to_string(want) +
                " inputs, got " + std::to_string(got));
  }
}

void require_matrix(const Tensor& t, OpKind kind) {
  if (t.rank() > 2) {
    throw DimensionError(std::string(op_name(kind)) + ": expected rank <= 2, got " +
                         to_string(t.shape()));
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Angle table for rotary embeddings: angle(pos, i) = pos * base^(-2i/d).
void rope_angles(std::size_t pos, std::size_t head_dim, double base, std::vector<double>& cs,
                 std::vector<double>& sn) {
  const std::size_t half = head_dim / 2;
  cs.resize(half);
  sn.resize(half);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double ang = static_cast<double>(pos) * freq;
    cs[i] = std::cos(ang);
    sn[i] = std::sin(ang);
  }
}

// Copy a (rows x cols) block with leading dimension `ld` into contiguous
// transposed storage (cols x rows).
void gather_transposed(const double* src, std::size_t ld, std::size_t rows, std::size_t cols,
                       double* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * ld + j];
}

}  // namespace

const char* op_name(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kMatmulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kMulBroadcast: return "mul_broadcast";
    case OpKind::kScale: return "scale";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kSlice: return "slice";
    case OpKind::kSoftmaxRows: return "softmax_rows";
    case OpKind::kSilu: return "silu";
    case OpKind::kUnitNormalize: return "unit_normalize";
    case OpKind::kUnitNormalizeCols: return "unit_normalize_cols";
    case OpKind::kRmsNorm: return "rmsnorm";
    case OpKind::kRope: return "rope";
    case OpKind::kEmbedLookup: return "embed_lookup";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kAbs: return "abs";
    case OpKind::kSum: return "sum";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kCausalMask: return "causal_mask";
    case OpKind::kCausalAttention: return "causal_attention";
    case OpKind::kSlerpRows: return "slerp_rows";
    case OpKind::kTangentProject: return "tangent_project";
  }
  return "unknown";
}

struct Tape::Node {
  OpKind kind{};
  bool is_leaf = false;
  bool requires_grad = false;
  Tensor value;
  Tensor grad;
  std::vector<Var> parents;
  OpAttrs attrs;
  std::vector<double> saved;  // op-specific forward state
};

Tape::Tape(bool retain_grads) : retain_grads_(retain_grads) {}
Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw Error("invalid tape variable");
  return *nodes_[v.id];
}
const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw Error("invalid tape variable");
  return *nodes_[v.id];
}

std::size_t Tape::size() const noexcept { return nodes_.size(); }
OpKind Tape::kind(Var v) const { return node(v).kind; }
std::vector<Var> Tape::parents(Var v) const { return node(v).parents; }
const Tensor& Tape::value(Var v) const { return node(v).value; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

const Tensor& Tape::grad(Var v) { return grad_buffer(v); }

Tensor& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = Tensor(n.value.shape());
  }
  return n.grad;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n->grad = Tensor();
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_unique<Node>();
  n->is_leaf = true;
  n->requires_grad = requires_grad;
  n->value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::mul_broadcast(Var x, Var v, double c) {
  OpAttrs a;
  a.scalar = c;
  return record(OpKind::kMulBroadcast, {x, v}, a);
}

Var Tape::scale(Var x, double c) {
  OpAttrs a;
  a.scalar = c;
  return record(OpKind::kScale, {x}, a);
}

Var Tape::slice(Var x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  OpAttrs a;
  a.r0 = r0, a.r1 = r1, a.c0 = c0, a.c1 = c1;
  return record(OpKind::kSlice, {x}, a);
}

Var Tape::unit_normalize(Var x, std::size_t group) {
  OpAttrs a;
  a.group = group;
  return record(OpKind::kUnitNormalize, {x}, a);
}

Var Tape::rope(Var x, std::size_t seq_len, std::size_t head_dim, double base) {
  OpAttrs a;
  a.seq_len = seq_len;
  a.group = head_dim;
  a.base = base;
  return record(OpKind::kRope, {x}, a);
}

Var Tape::embed(Var table, std::vector<std::int32_t> ids) {
  OpAttrs a;
  a.indices = std::move(ids);
  return record(OpKind::kEmbedLookup, {table}, a);
}

Var Tape::cross_entropy(Var logits, std::vector<std::int32_t> targets) {
  OpAttrs a;
  a.indices = std::move(targets);
  return record(OpKind::kCrossEntropy, {logits}, a);
}

Var Tape::causal_mask(Var scores, double scale) {
  OpAttrs a;
  a.scalar = scale;
  return record(OpKind::kCausalMask, {scores}, a);
}

Var Tape::causal_attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t heads,
                           double scale) {
  OpAttrs a;
  a.seq_len = seq_len;
  a.heads = heads;
  a.scalar = scale;
  return record(OpKind::kCausalAttention, {q, k, v}, a);
}

Var Tape::record(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs) {
  auto n = std::make_unique<Node>();
  n->kind = kind;
  n->attrs = attrs;
  n->parents.assign(inputs.begin(), inputs.end());
  for (Var p : inputs) n->requires_grad = n->requires_grad || node(p).requires_grad;

  auto in = [&](std::size_t i) -> const Tensor& { return node(inputs[i]).value; };
  const double neg_inf = -std::numeric_limits<double>::infinity();

  switch (kind) {
    case OpKind::kMatmul: {
      check_arity(kind, inputs.size(), 2);
      n->value = ngpt::matmul(in(0), in(1));
      break;
    }
    case OpKind::kMatmulNT: {
      check_arity(kind, inputs.size(), 2);
      n->value = ngpt::matmul_nt(in(0), in(1));
      break;
    }
    case OpKind::kAdd: {
      check_arity(kind, inputs.size(), 2);
      n->value = ngpt::add(in(0), in(1));
      break;
    }
    case OpKind::kSub: {
      check_arity(kind, inputs.size(), 2);
      n->value = ngpt::sub(in(0), in(1));
      break;
    }
    case OpKind::kMul: {
      check_arity(kind, inputs.size(), 2);
      n->value = ngpt::hadamard(in(0), in(1));
      break;
    }
    case OpKind::kMulBroadcast: {
      check_arity(kind, inputs.size(), 2);
      const Tensor& x = in(0);
      const Tensor& v = in(1);
      const std::size_t cols = x.cols(), len = v.size();
      if (len == 0 || cols % len != 0) {
        throw DimensionError("mul_broadcast: vector of length " + std::to_string(len) +
                             " does not tile " + to_string(x.shape()));
      }
      n->value = x;
      const double c = attrs.scalar;
      auto out = n->value.data();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c * v[(i % cols) % len];
      break;
    }
    case OpKind::kScale: {
      check_arity(kind, inputs.size(), 1);
      n->value = ngpt::scale(in(0), attrs.scalar);
      break;
    }
    case OpKind::kConcatRows: {
      if (inputs.empty()) throw Error("concat_rows needs at least one input");
      const std::size_t cols = in(0).cols();
      std::size_t rows = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        require_matrix(in(i), kind);
        if (in(i).cols() != cols) {
          throw DimensionError("concat_rows: column mismatch " + to_string(in(0).shape()) +
                               " vs " + to_string(in(i).shape()));
        }
        rows += in(i).rows();
      }
      std::vector<double> data;
      data.reserve(rows * cols);
      for (std::size_t i = 0; i < inputs.size(); ++i)
        data.insert(data.end(), in(i).data().begin(), in(i).data().end());
      n->value = Tensor({rows, cols}, std::move(data));
      break;
    }
    case OpKind::kSlice: {
      check_arity(kind, inputs.size(), 1);
      const Tensor& x = in(0);
      require_matrix(x, kind);
      if (attrs.r0 > attrs.r1 || attrs.r1 > x.rows() || attrs.c0 > attrs.c1 ||
          attrs.c1 > x.cols()) {
        throw DimensionError("slice: range out of bounds for " + to_string(x.shape()));
      }
      Tensor out = Tensor::matrix(attrs.r1 - attrs.r0, attrs.c1 - attrs.c0);
      for (std::size_t r = attrs.r0; r < attrs.r1; ++r)
        for (std::size_t c = attrs.c0; c < attrs.c1; ++c)
          out.at(r - attrs.r0, c - attrs.c0) = x.at(r, c);
      n->value = std::move(out);
      break;
    }
    case OpKind::kSoftmaxRows: {
      check_arity(kind, inputs.size(), 1);
      n->value = ngpt::softmax_rows(in(0));
      break;
    }
    case OpKind::kSilu: {
      check_arity(kind, inputs.size(), 1);
      n->value = in(0);
      for (double& x : n->value.data()) x = x * sigmoid(x);
      break;
    }
    case OpKind::kUnitNormalize: {
      check_arity(kind, inputs.size(), 1);
      const Tensor& x = in(0);
      const std::size_t cols = x.cols();
      const std::size_t g = attrs.group ? attrs.group : cols;
      if (cols % g != 0) {
        throw DimensionError("unit_normalize: group " + std::to_string(g) + " does not divide " +
                             to_string(x.shape()));
      }
      n->attrs.group = g;
      n->value = x;
      auto y = n->value.data();
      n->saved.resize(x.size() / g);
      for (std::size_t s = 0; s < n->saved.size(); ++s) {
        std::span<double> seg = y.subspan(s * g, g);
        const double norm = l2_norm(seg);
        if (!(norm >= kDegenerateNorm)) {
          throw DegenerateVectorError("unit_normalize: vector norm " + std::to_string(norm) +
                                      " below threshold");
        }
        const double inv = 1.0 / norm;
        for (double& e : seg) e *= inv;
        n->saved[s] = inv;
      }
      break;
    }
    case OpKind::kUnitNormalizeCols: {
      check_arity(kind, inputs.size(), 1);
      const Tensor& x = in(0);
      require_matrix(x, kind);
      const std::size_t rows = x.rows(), cols = x.cols();
      std::vector<double> sq(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) sq[c] += x.at(r, c) * x.at(r, c);
      n->saved.resize(cols);
      for (std::size_t c = 0; c < cols; ++c) {
        const double norm = std::sqrt(sq[c]);
        if (!(norm >= kDegenerateNorm)) {
          throw DegenerateVectorError("unit_normalize_cols: column " + std::to_string(c) +
                                      " is degenerate");
        }
        n->saved[c] = 1.0 / norm;
      }
      n->value = x;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) n->value.at(r, c) *= n->saved[c];
      break;
    }
    case OpKind::kRmsNorm: {
      check_arity(kind, inputs.size(), 2);
      const Tensor& x = in(0);
      const Tensor& gains = in(1);
      const std::size_t d = x.cols();
      if (gains.size() != d) {
        throw DimensionError("rmsnorm: gains " + to_string(gains.shape()) + " vs input " +
                             to_string(x.shape()));
      }
      const double root_d = std::sqrt(static_cast<double>(d));
      n->value = x;
      n->saved.resize(x.rows());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = n->value.row(r);
        const double norm = l2_norm(row);
        if (!(norm >= kDegenerateNorm)) {
          throw DegenerateVectorError("rmsnorm: zero-norm input row " + std::to_string(r));
        }
        const double inv = 1.0 / norm;
        n->saved[r] = inv;
        for (std::size_t j = 0; j < d; ++j) row[j] *= root_d * inv * gains[j];
      }
      break;
    }
    case OpKind::kRope: {
      check_arity(kind, inputs.size(), 1);
      const Tensor& x = in(0);
      const std::size_t hd = attrs.group, T = attrs.seq_len;
      if (hd == 0 || hd % 2 != 0) {
        throw ConfigError("rope: head dimension must be even, got " + std::to_string(hd));
      }
      if (x.cols() % hd != 0 || T == 0 || x.rows() % T != 0) {
        throw DimensionError("rope: input " + to_string(x.shape()) + " does not split into heads of " +
                             std::to_string(hd) + " and sequences of " + std::to_string(T));
      }
      n->value = x;
      std::vector<double> cs, sn;
      for (std::size_t pos = 0; pos < T; ++pos) {
        rope_angles(pos, hd, attrs.base, cs, sn);
        for (std::size_t r = pos; r < x.rows(); r += T) {
          auto row = n->value.row(r);
          for (std::size_t h0 = 0; h0 < row.size(); h0 += hd) {
            for (std::size_t i = 0; i < hd / 2; ++i) {
              const double a = row[h0 + 2 * i], b = row[h0 + 2 * i + 1];
              row[h0 + 2 * i] = a * cs[i] - b * sn[i];
              row[h0 + 2 * i + 1] = a * sn[i] + b * cs[i];
            }
          }
        }
      }
      break;
    }
    case OpKind::kEmbedLookup: {
      check_arity(kind, inputs.size(), 1);
      const Tensor& table = in(0);
      require_matrix(table, kind);
      const std::size_t d = table.cols();
      Tensor out = Tensor::matrix(attrs.indices.size(), d);
      for (std::size_t r = 0; r < attrs.indices.size(); ++r) {
        const auto id = attrs.indices[r];
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
          throw DataError("embed_lookup: token id " + std::to_string(id) + " outside vocab of " +
                          std::to_string(table.rows()));
        }
        std::copy_n(table.row(static_cast<std::size_t>(id)).begin(), d, out.row(r).begin());
      }
      n->value = std::move(out);
      break;
    }
    case OpKind::kCrossEntropy: {
      check_arity(kind, inputs.size(), 1);
      const Tensor& z = in(0);
      require_matrix(z, kind);
      if (attrs.indices.size() != z.rows()) {
        throw DimensionError("cross_entropy: " + std::to_string(attrs.indices.size()) +
                             " targets for logits " + to_string(z.shape()));
      }
      const std::size_t V = z.cols();
      Tensor probs = ngpt::softmax_rows(z);
      double total = 0.0;
      for (std::size_t r = 0; r < z.rows(); ++r) {
        const auto t = attrs.indices[r];
        if (t < 0 || static_cast<std::size_t>(t) >= V) {
          throw DataError("cross_entropy: target " + std::to_string(t) + " outside vocab of " +
                          std::to_string(V));
        }
        // log-sum-exp form keeps the loss accurate when p[t] underflows.
        auto row = z.row(r);
        double mx = neg_inf;
        for (double v : row) mx = std::max(mx, v);
        double s = 0.0;
        for (double v : row) s += std::exp(v - mx);
        total += (mx + std::log(s)) - row[static_cast<std::size_t>(t)];
      }
      n->value = Tensor(Shape{}, total / static_cast<double>(z.rows()));
      n->saved.assign(probs.data().begin(), probs.data().end());
      break;
    }
    case OpKind::kAbs: {
      check_arity(kind, inputs.size(), 1);
      n->value = in(0);
      for (double& x : n->value.data()) x = std::abs(x);
      break;
    }
    case OpKind::kSum: {
      check_arity(kind, inputs.size(), 1);
      double s = 0.0;
      for (double x : in(0).data()) s += x;
      n->value = Tensor(Shape{}, s);
      break;
    }
    case OpKind::kTranspose: {
      check_arity(kind, inputs.size(), 1);
      require_matrix(in(0), kind);
      n->value = ngpt::transpose(in(0));
      break;
    }
    case OpKind::kCausalMask: {
      check_arity(kind, inputs.size(), 1);
      const Tensor& x = in(0);
      require_matrix(x, kind);
      const std::size_t T = x.cols();
      n->value = ngpt::scale(x, attrs.scalar);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const std::size_t i = r % T;
        for (std::size_t j = i + 1; j < T; ++j) n->value.at(r, j) = neg_inf;
      }
      break;
    }
    case OpKind::kCausalAttention: {
      check_arity(kind, inputs.size(), 3);
      const Tensor& q = in(0);
      const Tensor& k = in(1);
      const Tensor& v = in(2);
      require_same_shape(q, k, "causal_attention");
      require_same_shape(q, v, "causal_attention");
      const std::size_t T = attrs.seq_len, H = attrs.heads, width = q.cols();
      if (T == 0 || H == 0 || q.rows() % T != 0 || width % H != 0) {
        throw DimensionError("causal_attention: " + to_string(q.shape()) + " does not split into " +
                             std::to_string(H) + " heads over sequences of " + std::to_string(T));
      }
      const std::size_t dk = width / H, B = q.rows() / T;
      const double sc = attrs.scalar;
      n->value = Tensor::matrix(q.rows(), width);
      n->saved.assign(B * H * T * T, 0.0);
      std::vector<double> kt(dk * T);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const double* qb = q.raw() + b * T * width + h * dk;
          const double* kb = k.raw() + b * T * width + h * dk;
          const double* vb = v.raw() + b * T * width + h * dk;
          double* ob = n->value.raw() + b * T * width + h * dk;
          double* p = n->saved.data() + (b * H + h) * T * T;
          gather_transposed(kb, width, T, dk, kt.data());
          // Only keys j <= i contribute, so each row block stops at its diagonal.
          constexpr std::size_t kRowBlock = 32;
          for (std::size_t i0 = 0; i0 < T; i0 += kRowBlock) {
            const std::size_t i1 = std::min(T, i0 + kRowBlock);
            gemm(qb + i0 * width, width, kt.data(), T, p + i0 * T, T, i1 - i0, i1, dk, false);
          }
          for (std::size_t i = 0; i < T; ++i) {
            double* row = p + i * T;
            double mx = neg_inf;
            for (std::size_t j = 0; j <= i; ++j) {
              row[j] *= sc;
              mx = std::max(mx, row[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              row[j] = std::exp(row[j] - mx);
              sum += row[j];
            }
            const double inv = 1.0 / sum;
            for (std::size_t j = 0; j <= i; ++j) row[j] *= inv;
            for (std::size_t j = i + 1; j < T; ++j) row[j] = 0.0;
          }
          for (std::size_t i0 = 0; i0 < T; i0 += kRowBlock) {
            const std::size_t i1 = std::min(T, i0 + kRowBlock);
            gemm(p + i0 * T, T, vb, width, ob + i0 * width, width, i1 - i0, dk, i1, false);
          }
        }
      }
      break;
    }
    case OpKind::kSlerpRows: {
      check_arity(kind, inputs.size(), 3);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      require_same_shape(a, b, "slerp_rows");
      if (in(2).size() != 1) {
        throw ConfigError("slerp_rows: SLERP needs a scalar interpolation weight, got " +
                          to_string(in(2).shape()));
      }
      const double alpha = in(2)[0];
      n->value = Tensor(a.shape());
      // saved per row: theta, and a fallback flag (1 = normalized lerp).
      n->saved.assign(a.rows() * 2, 0.0);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto ar = a.row(r), br = b.row(r);
        auto yr = n->value.row(r);
        const double c = std::clamp(dot(ar, br), -1.0, 1.0);
        if (c <= -1.0 + kAntipodalSlack) {
          throw NumericError("slerp_rows: antipodal inputs in row " + std::to_string(r));
        }
        const double theta = std::acos(c);
        n->saved[2 * r] = theta;
        if (theta < kSlerpMinAngle) {
          n->saved[2 * r + 1] = 1.0;
          for (std::size_t j = 0; j < yr.size(); ++j) yr[j] = (1.0 - alpha) * ar[j] + alpha * br[j];
          const double norm = l2_norm(yr);
          for (double& e : yr) e /= norm;
          continue;
        }
        const double s = std::sin(theta);
        const double w1 = std::sin((1.0 - alpha) * theta) / s;
        const double w2 = std::sin(alpha * theta) / s;
        for (std::size_t j = 0; j < yr.size(); ++j) yr[j] = w1 * ar[j] + w2 * br[j];
      }
      break;
    }
    case OpKind::kTangentProject: {
      check_arity(kind, inputs.size(), 2);
      const Tensor& h = in(0);
      const Tensor& b = in(1);
      require_same_shape(h, b, "tangent_project");
      n->value = Tensor(h.shape());
      for (std::size_t r = 0; r < h.rows(); ++r) {
        auto hr = h.row(r), br = b.row(r);
        auto yr = n->value.row(r);
        const double c = dot(hr, br);
        for (std::size_t j = 0; j < yr.size(); ++j) yr[j] = hr[j] * c - br[j];
      }
      break;
    }
    default:
      throw Error("unsupported op kind " + std::to_string(static_cast<int>(kind)));
  }

  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::backward(Var loss) {
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw DimensionError("backward: loss must be scalar, got " + to_string(root.value.shape()));
  }
  for (std::size_t i = 0; i <= loss.id; ++i) {
    if (!nodes_[i]->is_leaf) nodes_[i]->grad = Tensor();
  }
  grad_buffer(loss)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = *nodes_[i];
    if (n.is_leaf || !n.requires_grad || n.grad.empty()) continue;
    propagate(n);
    if (!retain_grads_ && i != loss.id) n.grad = Tensor();
  }
}

void Tape::propagate(Node& n) {
  const Tensor& g = n.grad;
  auto wants = [&](std::size_t i) { return node(n.parents[i]).requires_grad; };
  auto val = [&](std::size_t i) -> const Tensor& { return node(n.parents[i]).value; };
  auto gbuf = [&](std::size_t i) -> Tensor& { return grad_buffer(n.parents[i]); };

  switch (n.kind) {
    case OpKind::kMatmul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (wants(0)) {
        const Tensor bt = ngpt::transpose(b);
        gemm(g.raw(), g.cols(), bt.raw(), bt.cols(), gbuf(0).raw(), a.cols(), a.rows(), a.cols(),
             g.cols(), true);
      }
      if (wants(1)) {
        const Tensor at = ngpt::transpose(a);
        gemm(at.raw(), at.cols(), g.raw(), g.cols(), gbuf(1).raw(), b.cols(), b.rows(), b.cols(),
             a.rows(), true);
      }
      break;
    }
    case OpKind::kMatmulNT: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (wants(0)) {
        gemm(g.raw(), g.cols(), b.raw(), b.cols(), gbuf(0).raw(), a.cols(), a.rows(), a.cols(),
             g.cols(), true);
      }
      if (wants(1)) {
        const Tensor gt = ngpt::transpose(g);
        gemm(gt.raw(), gt.cols(), a.raw(), a.cols(), gbuf(1).raw(), b.cols(), b.rows(), b.cols(),
             a.rows(), true);
      }
      break;
    }
    case OpKind::kAdd:
      if (wants(0)) axpy(1.0, g.data(), gbuf(0).data());
      if (wants(1)) axpy(1.0, g.data(), gbuf(1).data());
      break;
    case OpKind::kSub:
      if (wants(0)) axpy(1.0, g.data(), gbuf(0).data());
      if (wants(1)) axpy(-1.0, g.data(), gbuf(1).data());
      break;
    case OpKind::kMul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (wants(0)) {
        auto ga = gbuf(0).data();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (wants(1)) {
        auto gb = gbuf(1).data();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case OpKind::kMulBroadcast: {
      const Tensor& x = val(0);
      const Tensor& v = val(1);
      const std::size_t cols = x.cols(), len = v.size();
      const double c = n.attrs.scalar;
      if (wants(0)) {
        auto gx = gbuf(0).data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * g[i] * v[(i % cols) % len];
      }
      if (wants(1)) {
        auto gv = gbuf(1).data();
        for (std::size_t i = 0; i < x.size(); ++i) gv[(i % cols) % len] += c * g[i] * x[i];
      }
      break;
    }
    case OpKind::kScale:
      if (wants(0)) axpy(n.attrs.scalar, g.data(), gbuf(0).data());
      break;
    case OpKind::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        const std::size_t cnt = val(i).size();
        if (wants(i)) axpy(1.0, g.data().subspan(offset, cnt), gbuf(i).data());
        offset += cnt;
      }
      break;
    }
    case OpKind::kSlice: {
      if (!wants(0)) break;
      Tensor& gx = gbuf(0);
      const auto& a = n.attrs;
      for (std::size_t r = a.r0; r < a.r1; ++r)
        for (std::size_t c = a.c0; c < a.c1; ++c) gx.at(r, c) += g.at(r - a.r0, c - a.c0);
      break;
    }
    case OpKind::kSoftmaxRows: {
      if (!wants(0)) break;
      Tensor& gx = gbuf(0);
      const Tensor& y = n.value;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        const double s = dot(g.row(r), y.row(r));
        auto gr = gx.row(r);
        auto yr = y.row(r);
        auto gu = g.row(r);
        for (std::size_t j = 0; j < gr.size(); ++j) gr[j] += yr[j] * (gu[j] - s);
      }
      break;
    }
    case OpKind::kSilu: {
      if (!wants(0)) break;
      const Tensor& x = val(0);
      auto gx = gbuf(0).data();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double sg = sigmoid(x[i]);
        gx[i] += g[i] * sg * (1.0 + x[i] * (1.0 - sg));
      }
      break;
    }
    case OpKind::kUnitNormalize: {
      if (!wants(0)) break;
      const std::size_t grp = n.attrs.group;
      auto gx = gbuf(0).data();
      auto y = n.value.data();
      auto gu = g.data();
      for (std::size_t s = 0; s < n.saved.size(); ++s) {
        const std::size_t o = s * grp;
        double yg = 0.0;
        for (std::size_t j = 0; j < grp; ++j) yg += y[o + j] * gu[o + j];
        const double inv = n.saved[s];
        for (std::size_t j = 0; j < grp; ++j) gx[o + j] += (gu[o + j] - y[o + j] * yg) * inv;
      }
      break;
    }
    case OpKind::kUnitNormalizeCols: {
      if (!wants(0)) break;
      Tensor& gx = gbuf(0);
      const Tensor& y = n.value;
      const std::size_t rows = y.rows(), cols = y.cols();
      std::vector<double> yg(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) yg[c] += y.at(r, c) * g.at(r, c);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          gx.at(r, c) += (g.at(r, c) - y.at(r, c) * yg[c]) * n.saved[c];
      break;
    }
    case OpKind::kRmsNorm: {
      const Tensor& x = val(0);
      const Tensor& gains = val(1);
      const std::size_t d = x.cols();
      const double root_d = std::sqrt(static_cast<double>(d));
      const bool wx = wants(0), wg = wants(1);
      Tensor* gx = wx ? &gbuf(0) : nullptr;
      Tensor* gg = wg ? &gbuf(1) : nullptr;
      std::vector<double> scaled(d);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const double inv = n.saved[r];
        auto xr = x.row(r);
        auto gr = g.row(r);
        if (wg) {
          for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * root_d * xr[j] * inv;
        }
        if (wx) {
          double proj = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            scaled[j] = gr[j] * gains[j] * root_d;
            proj += scaled[j] * xr[j] * inv;
          }
          auto gxr = gx->row(r);
          for (std::size_t j = 0; j < d; ++j) gxr[j] += (scaled[j] - xr[j] * inv * proj) * inv;
        }
      }
      break;
    }
    case OpKind::kRope: {
      if (!wants(0)) break;
      Tensor& gx = gbuf(0);
      const std::size_t hd = n.attrs.group, T = n.attrs.seq_len;
      std::vector<double> cs, sn;
      for (std::size_t pos = 0; pos < T; ++pos) {
        rope_angles(pos, hd, n.attrs.base, cs, sn);
        for (std::size_t r = pos; r < g.rows(); r += T) {
          auto gr = g.row(r);
          auto out = gx.row(r);
          for (std::size_t h0 = 0; h0 < gr.size(); h0 += hd) {
            for (std::size_t i = 0; i < hd / 2; ++i) {
              const double a = gr[h0 + 2 * i], b = gr[h0 + 2 * i + 1];
              out[h0 + 2 * i] += a * cs[i] + b * sn[i];
              out[h0 + 2 * i + 1] += -a * sn[i] + b * cs[i];
            }
          }
        }
      }
      break;
    }
    case OpKind::kEmbedLookup: {
      if (!wants(0)) break;
      Tensor& gt = gbuf(0);
      for (std::size_t r = 0; r < n.attrs.indices.size(); ++r) {
        axpy(1.0, g.row(r), gt.row(static_cast<std::size_t>(n.attrs.indices[r])));
      }
      break;
    }
    case OpKind::kCrossEntropy: {
      if (!wants(0)) break;
      Tensor& gz = gbuf(0);
      const std::size_t rows = gz.rows(), V = gz.cols();
      const double w = g[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        auto gr = gz.row(r);
        const double* p = n.saved.data() + r * V;
        for (std::size_t j = 0; j < V; ++j) gr[j] += w * p[j];
        gr[static_cast<std::size_t>(n.attrs.indices[r])] -= w;
      }
      break;
    }
    case OpKind::kAbs: {
      if (!wants(0)) break;
      const Tensor& x = val(0);
      auto gx = gbuf(0).data();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double sgn = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
        gx[i] += sgn * g[i];
      }
      break;
    }
    case OpKind::kSum: {
      if (!wants(0)) break;
      for (double& e : gbuf(0).data()) e += g[0];
      break;
    }
    case OpKind::kTranspose: {
      if (!wants(0)) break;
      const Tensor gt = ngpt::transpose(g);
      axpy(1.0, gt.data(), gbuf(0).data());
      break;
    }
    case OpKind::kCausalMask: {
      if (!wants(0)) break;
      Tensor& gx = gbuf(0);
      const std::size_t T = gx.cols();
      for (std::size_t r = 0; r < gx.rows(); ++r) {
        const std::size_t i = r % T;
        for (std::size_t j = 0; j <= i; ++j) gx.at(r, j) += n.attrs.scalar * g.at(r, j);
      }
      break;
    }
    case OpKind::kCausalAttention: {
      const Tensor& q = val(0);
      const Tensor& k = val(1);
      const Tensor& v = val(2);
      const std::size_t T = n.attrs.seq_len, H = n.attrs.heads, width = q.cols();
      const std::size_t dk = width / H, B = q.rows() / T;
      const double sc = n.attrs.scalar;
      double* gq = wants(0) ? gbuf(0).raw() : nullptr;
      double* gk = wants(1) ? gbuf(1).raw() : nullptr;
      double* gv = wants(2) ? gbuf(2).raw() : nullptr;
      std::vector<double> pt(T * T), dp(T * T), vt(dk * T), dst(T * T);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t off = b * T * width + h * dk;
          const double* p = n.saved.data() + (b * H + h) * T * T;
          const double* go = g.raw() + off;
          if (gv) {
            // dV = P^T dO
            for (std::size_t i = 0; i < T; ++i)
              for (std::size_t j = 0; j < T; ++j) pt[j * T + i] = p[i * T + j];
            gemm(pt.data(), T, go, width, gv + off, width, T, dk, T, true);
          }
          if (!gq && !gk) continue;
          // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)), scaled.
          gather_transposed(v.raw() + off, width, T, dk, vt.data());
          gemm(go, width, vt.data(), T, dp.data(), T, T, T, dk, false);
          for (std::size_t i = 0; i < T; ++i) {
            const double* pr = p + i * T;
            double* dr = dp.data() + i * T;
            double s = 0.0;
            for (std::size_t j = 0; j <= i; ++j) s += dr[j] * pr[j];
            for (std::size_t j = 0; j <= i; ++j) dr[j] = sc * pr[j] * (dr[j] - s);
            for (std::size_t j = i + 1; j < T; ++j) dr[j] = 0.0;
          }
          if (gq) gemm(dp.data(), T, k.raw() + off, width, gq + off, width, T, dk, T, true);
          if (gk) {
            for (std::size_t i = 0; i < T; ++i)
              for (std::size_t j = 0; j < T; ++j) dst[j * T + i] = dp[i * T + j];
            gemm(dst.data(), T, q.raw() + off, width, gk + off, width, T, dk, T, true);
          }
        }
      }
      break;
    }
    case OpKind::kSlerpRows: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      const double alpha = val(2)[0];
      const bool wa = wants(0), wb = wants(1), wal = wants(2);
      Tensor* ga = wa ? &gbuf(0) : nullptr;
      Tensor* gb = wb ? &gbuf(1) : nullptr;
      double galpha = 0.0;
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto ar = a.row(r), br = b.row(r), gr = g.row(r);
        const double theta = n.saved[2 * r];
        if (n.saved[2 * r + 1] != 0.0) {
          // Normalized-lerp fallback: y = u / ||u||, u = (1 - alpha) a + alpha b.
          auto yr = n.value.row(r);
          std::vector<double> u(ar.size());
          for (std::size_t j = 0; j < u.size(); ++j) u[j] = (1.0 - alpha) * ar[j] + alpha * br[j];
          const double inv = 1.0 / l2_norm(u);
          const double yg = dot(yr, gr);
          for (std::size_t j = 0; j < u.size(); ++j) {
            const double gu = (gr[j] - yr[j] * yg) * inv;
            if (wa) ga->at(r, j) += (1.0 - alpha) * gu;
            if (wb) gb->at(r, j) += alpha * gu;
            galpha += gu * (br[j] - ar[j]);
          }
          continue;
        }
        const double s = std::sin(theta), c = std::cos(theta);
        const double s1 = std::sin((1.0 - alpha) * theta), c1 = std::cos((1.0 - alpha) * theta);
        const double s2 = std::sin(alpha * theta), c2 = std::cos(alpha * theta);
        const double w1 = s1 / s, w2 = s2 / s;
        const double ga_dot = dot(gr, ar), gb_dot = dot(gr, br);
        const double dw1 = ((1.0 - alpha) * c1 * s - s1 * c) / (s * s);
        const double dw2 = (alpha * c2 * s - s2 * c) / (s * s);
        const double dtheta = ga_dot * dw1 + gb_dot * dw2;
        // dtheta/dc = -1/sin(theta), c = a . b
        const double dc = -dtheta / s;
        for (std::size_t j = 0; j < ar.size(); ++j) {
          if (wa) ga->at(r, j) += w1 * gr[j] + dc * br[j];
          if (wb) gb->at(r, j) += w2 * gr[j] + dc * ar[j];
        }
        galpha += ga_dot * (-theta * c1 / s) + gb_dot * (theta * c2 / s);
      }
      if (wal) gbuf(2)[0] += galpha;
      break;
    }
    case OpKind::kTangentProject: {
      const Tensor& h = val(0);
      const Tensor& b = val(1);
      const bool wh = wants(0), wb = wants(1);
      Tensor* gh = wh ? &gbuf(0) : nullptr;
      Tensor* gbp = wb ? &gbuf(1) : nullptr;
      for (std::size_t r = 0; r < h.rows(); ++r) {
        auto hr = h.row(r), br = b.row(r), gr = g.row(r);
        const double c = dot(hr, br);
        const double gh_dot = dot(gr, hr);
        for (std::size_t j = 0; j < hr.size(); ++j) {
          if (wh) gh->at(r, j) += gr[j] * c + gh_dot * br[j];
          if (wb) gbp->at(r, j) += gh_dot * hr[j] - gr[j];
        }
      }
      break;
    }
  }
}

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  Tensor analytic;
  {
    Tape tape;
    const Var xv = tape.leaf(x);
    const Var y = f(tape, xv);
    tape.backward(y);
    analytic = tape.grad(xv);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape(false);
    const Var xv = tape.leaf(at, false);
    return tape.value(f(tape, xv))[0];
  };
  Tensor probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = eval(probe);
    probe[i] = orig - eps;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double err =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ngpt::ad
