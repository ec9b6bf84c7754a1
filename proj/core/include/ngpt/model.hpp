#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ngpt/autodiff.hpp"
#include "ngpt/config.hpp"
#include "ngpt/hypersphere.hpp"
#include "ngpt/rng.hpp"
#include "ngpt/tensor.hpp"

namespace ngpt {

/// Trainable scaling vector with effective value raw * init / scale.
struct ScaledParam {
  Tensor raw;  // [1 x n], or [1 x 1] in scalar mode
  double init = 1.0;
  double scale = 1.0;
  bool trainable = true;

  static ScaledParam make(std::size_t dim, double init, double scale, ScalingMode mode);
  std::vector<double> effective() const;
};

struct LayerParams {
  Tensor w_q, w_k, w_v;  // [d_model x n_heads*d_k]
  Tensor w_o;            // [n_heads*d_k x d_model]
  Tensor w_u, w_nu;      // [d_model x d_mlp]
  Tensor w_o_mlp;        // [d_mlp x d_model]
  ScaledParam s_qk, s_u, s_nu;
  EigenLR alpha_a, alpha_m;
  Tensor attn_gain, mlp_gain;  // gpt only, [1 x d_model]
};

struct ModelParams {
  Tensor e_in;   // [vocab x d_model]
  Tensor e_out;  // [vocab x d_model], empty when embeddings are tied
  std::vector<LayerParams> layers;
  ScaledParam s_z;
  Tensor final_gain;  // gpt only
};

enum class ParamRole { kEmbedding, kMatrix, kScaling, kEigenLR, kGain };

/// One named parameter tensor. `normalized` marks the nGPT matrix groups
/// kept on the unit sphere along `axis`.
template <class T>
struct BasicParamEntry {
  std::string name;
  T* tensor;
  ParamRole role;
  int layer;  // -1 for global parameters
  bool trainable;
  bool normalized;
  Axis axis;
  bool decay;
};
using ParamEntry = BasicParamEntry<Tensor>;
using ConstParamEntry = BasicParamEntry<const Tensor>;

/// Parameters in a fixed order (checkpoint and optimizer order).
std::vector<ParamEntry> named_params(ModelParams& p, const ModelConfig& cfg);
std::vector<ConstParamEntry> named_params(const ModelParams& p, const ModelConfig& cfg);

/// A zero-filled copy with the same structure.
ModelParams zeros_like(const ModelParams& p);

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
ModelParams init_params(const ModelConfig& cfg, Rng& rng);

/// Tape handles mirroring ModelParams.
struct LayerVars {
  ad::Var w_q, w_k, w_v, w_o, w_u, w_nu, w_o_mlp;
  ad::Var s_qk, s_u, s_nu, alpha_a, alpha_m;
  ad::Var attn_gain, mlp_gain;
};
struct ParamVars {
  ad::Var e_in, e_out;
  std::vector<LayerVars> layers;
  ad::Var s_z, final_gain;
};

ParamVars bind_params(ad::Tape& tape, const ModelParams& p, const ModelConfig& cfg,
                      bool requires_grad = true);
/// Replaces the handle of the parameter called `name` (as in named_params)
/// with `x`, applying the same forward-pass wrapping bind_params would.
/// Throws ConfigError for an unknown name.
void rebind_param(ad::Tape& tape, ParamVars& vars, const ModelConfig& cfg, std::string_view name,
                  ad::Var x);
/// Gradients from the last backward pass, shaped like `p`.
ModelParams collect_grads(ad::Tape& tape, const ParamVars& vars, const ModelParams& p,
                          const ModelConfig& cfg);

struct ForwardOptions {
  bool allow_extrapolation = false;  // permit seq_len > context
};

/// Logits [batch*seq_len x vocab] for `tokens` laid out as consecutive
/// sequences of length seq_len.
ad::Var forward(ad::Tape& tape, const ParamVars& vars, const ModelConfig& cfg,
                std::span<const std::int32_t> tokens, std::size_t seq_len,
                const ForwardOptions& opts = {});

ad::Var loss(ad::Tape& tape, ad::Var logits, std::span<const std::int32_t> targets);

/// Convenience wrappers on a throwaway tape.
Tensor logits(const ModelParams& p, const ModelConfig& cfg, std::span<const std::int32_t> tokens,
              std::size_t seq_len, const ForwardOptions& opts = {});
double loss_value(const ModelParams& p, const ModelConfig& cfg,
                  std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
                  std::size_t seq_len, const ForwardOptions& opts = {});

/// Building blocks, exposed for tests and diagnostics.
ad::Var rmsnorm(ad::Tape& tape, ad::Var h, ad::Var gains);
ad::Var attention_block(ad::Tape& tape, ad::Var h, const LayerVars& lv, const ModelConfig& cfg,
                        std::size_t seq_len);
ad::Var mlp_block(ad::Tape& tape, ad::Var h, const LayerVars& lv, const ModelConfig& cfg);
/// nGPT residual update of unit rows h towards block output b, with the
/// effective eigen learning rate already applied.
ad::Var residual_update(ad::Tape& tape, ad::Var h, ad::Var block, ad::Var alpha_eff,
                        ResidualMode mode);
/// raw * init / scale, with |raw| under the absolute constraint.
ad::Var eigen_lr_effective(ad::Tape& tape, ad::Var raw, const ModelConfig& cfg);
Tensor rope_apply(const Tensor& x, std::size_t seq_len, std::size_t head_dim, double base);

double silu(double x) noexcept;

}  // namespace ngpt
