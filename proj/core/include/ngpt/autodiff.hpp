#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "ngpt/tensor.hpp"

namespace ngpt::ad {

/// Every operation the tape can record. Each kind owns a forward rule and a
/// reverse-mode rule in autodiff.cpp.
enum class OpKind : std::uint8_t {
  kMatmul,             // a[m x k] * b[k x n]
  kMatmulNT,           // a[m x k] * b[n x k]^T
  kAdd,
  kSub,
  kMul,                // elementwise, equal shapes
  kMulBroadcast,       // x[m x n] * tile(v[L]) * scalar, L divides n
  kScale,              // x * scalar
  kConcatRows,
  kSlice,              // rows [r0, r1) x cols [c0, c1)
  kSoftmaxRows,
  kSilu,
  kUnitNormalize,      // each row split into groups of `group` columns
  kUnitNormalizeCols,  // each column
  kRmsNorm,            // x * sqrt(d) / ||x|| * gains, per row
  kRope,
  kEmbedLookup,
  kCrossEntropy,       // mean over rows of -log softmax(z)[target]
  kAbs,
  kSum,
  kTranspose,
  kCausalMask,         // scalar * x + M, M[i][j] = -inf for j > i
  kCausalAttention,    // fused softmax(scale q k^T + M) v per sequence and head
  kSlerpRows,          // SLERP of matching rows with a scalar weight
  kTangentProject,     // h (h . b) - b per row
};

const char* op_name(OpKind kind) noexcept;

/// Handle to a node on a Tape.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
  friend bool operator==(Var, Var) = default;
};

/// Non-tensor operands of an operation.
struct OpAttrs {
  double scalar = 1.0;
  std::size_t group = 0;
  std::size_t seq_len = 0;
  std::size_t heads = 0;
  double base = 10000.0;
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  std::vector<std::int32_t> indices;
};

/// Define-by-run reverse-mode tape. Values are computed eagerly when an
/// operation is recorded; `backward` walks the nodes in reverse creation
/// order, which is a valid reverse topological order.
class Tape {
 public:
  /// With `retain_grads == false`, gradients of interior nodes are released
  /// as soon as they have been propagated; only leaf gradients survive.
  explicit Tape(bool retain_grads = true);
  ~Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Generic entry point. Throws ngpt::Error for kinds that cannot be built
  /// from the given arity, DimensionError for shape mismatches.
  Var record(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});
  Var record(OpKind kind, std::initializer_list<Var> inputs, const OpAttrs& attrs = {}) {
    return record(kind, std::span<const Var>(inputs.begin(), inputs.size()), attrs);
  }

  Var matmul(Var a, Var b) { return record(OpKind::kMatmul, {a, b}); }
  Var matmul_nt(Var a, Var b) { return record(OpKind::kMatmulNT, {a, b}); }
  Var add(Var a, Var b) { return record(OpKind::kAdd, {a, b}); }
  Var sub(Var a, Var b) { return record(OpKind::kSub, {a, b}); }
  Var mul(Var a, Var b) { return record(OpKind::kMul, {a, b}); }
  Var mul_broadcast(Var x, Var v, double c = 1.0);
  Var scale(Var x, double c);
  Var concat_rows(std::span<const Var> parts) { return record(OpKind::kConcatRows, parts); }
  Var slice(Var x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
  Var softmax_rows(Var x) { return record(OpKind::kSoftmaxRows, {x}); }
  Var silu(Var x) { return record(OpKind::kSilu, {x}); }
  Var unit_normalize(Var x, std::size_t group = 0);
  Var unit_normalize_cols(Var x) { return record(OpKind::kUnitNormalizeCols, {x}); }
  Var rmsnorm(Var x, Var gains) { return record(OpKind::kRmsNorm, {x, gains}); }
  Var rope(Var x, std::size_t seq_len, std::size_t head_dim, double base);
  Var embed(Var table, std::vector<std::int32_t> ids);
  Var cross_entropy(Var logits, std::vector<std::int32_t> targets);
  Var abs(Var x) { return record(OpKind::kAbs, {x}); }
  Var sum(Var x) { return record(OpKind::kSum, {x}); }
  Var transpose(Var x) { return record(OpKind::kTranspose, {x}); }
  Var causal_mask(Var scores, double scale);
  Var causal_attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t heads, double scale);
  Var slerp_rows(Var a, Var b, Var alpha) { return record(OpKind::kSlerpRows, {a, b, alpha}); }
  Var tangent_project(Var h, Var b) { return record(OpKind::kTangentProject, {h, b}); }

  /// Reverse pass from a scalar node. Leaf gradients accumulate across calls;
  /// interior gradients are recomputed from zero on every call.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  /// Gradient of the last backward pass (zeros if none reached this node).
  const Tensor& grad(Var v);
  bool requires_grad(Var v) const;
  void zero_grad();

  std::size_t size() const noexcept;
  OpKind kind(Var v) const;
  std::vector<Var> parents(Var v) const;

 private:
  struct Node;
  Node& node(Var v);
  const Node& node(Var v) const;
  Tensor& grad_buffer(Var v);
  void propagate(Node& n);

  std::vector<std::unique_ptr<Node>> nodes_;
  bool retain_grads_;
};

/// Scalar function of one tensor, built on a fresh tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Central differences against reverse mode. Returns
/// max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8).
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace ngpt::ad
