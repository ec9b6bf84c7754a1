#include "ngpt/model.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "ngpt/errors.hpp"

namespace ngpt {
namespace {

using ad::Tape;
using ad::Var;

template <class Params, class Entry>
std::vector<Entry> collect_entries(Params& p, const ModelConfig& cfg) {
  std::vector<Entry> out;
  const bool ngpt = cfg.variant == Variant::kNgpt;
  auto add = [&](std::string name, auto& tensor, ParamRole role, int layer, bool trainable,
                 bool normalized, Axis axis, bool decay) {
    out.push_back(Entry{std::move(name), &tensor, role, layer, trainable, normalized && ngpt, axis,
                        decay});
  };
  add("embed.in", p.e_in, ParamRole::kEmbedding, -1, true, true, Axis::kRows, true);
  if (!cfg.tie_embeddings) {
    add("embed.out", p.e_out, ParamRole::kEmbedding, -1, true, true, Axis::kRows, true);
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const int li = static_cast<int>(l);
    const std::string pre = "layers." + std::to_string(l) + ".";
    add(pre + "w_q", L.w_q, ParamRole::kMatrix, li, true, true, Axis::kCols, true);
    add(pre + "w_k", L.w_k, ParamRole::kMatrix, li, true, true, Axis::kCols, true);
    add(pre + "w_v", L.w_v, ParamRole::kMatrix, li, true, true, Axis::kCols, true);
    add(pre + "w_o", L.w_o, ParamRole::kMatrix, li, true, true, Axis::kRows, true);
    add(pre + "w_u", L.w_u, ParamRole::kMatrix, li, true, true, Axis::kCols, true);
    add(pre + "w_nu", L.w_nu, ParamRole::kMatrix, li, true, true, Axis::kCols, true);
    add(pre + "w_o_mlp", L.w_o_mlp, ParamRole::kMatrix, li, true, true, Axis::kRows, true);
    if (ngpt) {
      add(pre + "s_qk", L.s_qk.raw, ParamRole::kScaling, li, L.s_qk.trainable, false, Axis::kRows,
          false);
      add(pre + "s_u", L.s_u.raw, ParamRole::kScaling, li, L.s_u.trainable, false, Axis::kRows,
          false);
      add(pre + "s_nu", L.s_nu.raw, ParamRole::kScaling, li, L.s_nu.trainable, false, Axis::kRows,
          false);
      add(pre + "alpha_a", L.alpha_a.raw, ParamRole::kEigenLR, li, true, false, Axis::kRows, false);
      add(pre + "alpha_m", L.alpha_m.raw, ParamRole::kEigenLR, li, true, false, Axis::kRows, false);
    } else {
      add(pre + "attn_gain", L.attn_gain, ParamRole::kGain, li, true, false, Axis::kRows, false);
      add(pre + "mlp_gain", L.mlp_gain, ParamRole::kGain, li, true, false, Axis::kRows, false);
    }
  }
  if (ngpt) {
    add("s_z", p.s_z.raw, ParamRole::kScaling, -1, p.s_z.trainable, false, Axis::kRows, false);
  } else {
    add("final_gain", p.final_gain, ParamRole::kGain, -1, true, false, Axis::kRows, false);
  }
  return out;
}

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double std) {
  return randn(rng, Shape{rows, cols}, 0.0, std);
}

Var scaled_effective(Tape& t, Var raw, double init, double scale) {
  return t.scale(raw, init / scale);
}

Var bind_scaled(Tape& t, const ScaledParam& s, bool requires_grad) {
  return t.leaf(s.raw, requires_grad && s.trainable);
}

Var effective_weight(Tape& t, Var w, Axis axis, const ModelConfig& cfg) {
  if (cfg.variant != Variant::kNgpt || !cfg.forward_normalize) return w;
  return axis == Axis::kRows ? t.unit_normalize(w) : t.unit_normalize_cols(w);
}

}  // namespace

double silu(double x) noexcept { return x / (1.0 + std::exp(-x)); }

ScaledParam ScaledParam::make(std::size_t dim, double init, double scale, ScalingMode mode) {
  ScaledParam s;
  s.raw = Tensor::matrix(1, mode == ScalingMode::kVector ? dim : 1, scale);
  s.init = init;
  s.scale = scale;
  s.trainable = mode != ScalingMode::kFixed;
  return s;
}

std::vector<double> ScaledParam::effective() const {
  std::vector<double> out(raw.data().begin(), raw.data().end());
  for (double& v : out) v *= init / scale;
  return out;
}

std::vector<ParamEntry> named_params(ModelParams& p, const ModelConfig& cfg) {
  return collect_entries<ModelParams, ParamEntry>(p, cfg);
}

std::vector<ConstParamEntry> named_params(const ModelParams& p, const ModelConfig& cfg) {
  return collect_entries<const ModelParams, ConstParamEntry>(p, cfg);
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  auto clear = [](Tensor& t) {
    for (double& v : t.data()) v = 0.0;
  };
  clear(z.e_in);
  clear(z.e_out);
  clear(z.s_z.raw);
  clear(z.final_gain);
  for (auto& L : z.layers) {
    for (Tensor* t : {&L.w_q, &L.w_k, &L.w_v, &L.w_o, &L.w_u, &L.w_nu, &L.w_o_mlp, &L.s_qk.raw,
                      &L.s_u.raw, &L.s_nu.raw, &L.alpha_a.raw, &L.alpha_m.raw, &L.attn_gain,
                      &L.mlp_gain}) {
      clear(*t);
    }
  }
  return z;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return init_params(cfg, rng);
}

ModelParams init_params(const ModelConfig& cfg_in, Rng& rng) {
  ModelConfig cfg = cfg_in;
  cfg.resolve();
  cfg.validate();
  const std::size_t d = cfg.d_model, V = cfg.vocab, hk = cfg.n_heads * cfg.d_k();
  const std::size_t f = cfg.mlp_dim();
  const bool ngpt = cfg.variant == Variant::kNgpt;
  const double std_in = ngpt ? 1.0 / std::sqrt(static_cast<double>(d)) : cfg.gpt_init_std;
  const double std_out =
      ngpt ? std_in : cfg.gpt_init_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  ModelParams p;
  p.e_in = gaussian(rng, V, d, std_in);
  if (!cfg.tie_embeddings) p.e_out = gaussian(rng, V, d, std_in);
  p.layers.resize(cfg.n_layers);
  for (auto& L : p.layers) {
    L.w_q = gaussian(rng, d, hk, std_in);
    L.w_k = gaussian(rng, d, hk, std_in);
    L.w_v = gaussian(rng, d, hk, std_in);
    L.w_o = gaussian(rng, hk, d, std_out);
    L.w_u = gaussian(rng, d, f, std_in);
    L.w_nu = gaussian(rng, d, f, std_in);
    L.w_o_mlp = gaussian(rng, f, d, std_out);
    if (ngpt) {
      L.s_qk = ScaledParam::make(hk, cfg.sqk_init, cfg.sqk_scale, cfg.scaling_sqk);
      L.s_u = ScaledParam::make(f, cfg.suv_init, cfg.suv_scale, cfg.scaling_suv);
      L.s_nu = ScaledParam::make(f, cfg.suv_init, cfg.suv_scale, cfg.scaling_suv);
      const std::size_t adim = cfg.alpha_scalar ? 1 : d;
      L.alpha_a = EigenLR::make(adim, cfg.alpha_init, cfg.alpha_scale, cfg.alpha_constraint);
      L.alpha_m = EigenLR::make(adim, cfg.alpha_init, cfg.alpha_scale, cfg.alpha_constraint);
    } else {
      L.attn_gain = Tensor::matrix(1, d, 1.0);
      L.mlp_gain = Tensor::matrix(1, d, 1.0);
    }
  }
  if (ngpt) {
    p.s_z = ScaledParam::make(V, cfg.sz_init, cfg.sz_scale, cfg.scaling_sz);
    for (auto& e : named_params(p, cfg)) {
      if (e.normalized) normalize_embedding_dim_inplace(*e.tensor, e.axis);
    }
  } else {
    p.final_gain = Tensor::matrix(1, d, 1.0);
  }
  return p;
}

ParamVars bind_params(Tape& t, const ModelParams& p, const ModelConfig& cfg, bool rg) {
  ParamVars v;
  const bool ngpt = cfg.variant == Variant::kNgpt;
  v.e_in = effective_weight(t, t.leaf(p.e_in, rg), Axis::kRows, cfg);
  v.e_out = cfg.tie_embeddings ? v.e_in : effective_weight(t, t.leaf(p.e_out, rg), Axis::kRows, cfg);
  v.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams& L = p.layers[l];
    LayerVars& lv = v.layers[l];
    lv.w_q = t.leaf(L.w_q, rg);
    lv.w_k = t.leaf(L.w_k, rg);
    lv.w_v = t.leaf(L.w_v, rg);
    lv.w_o = t.leaf(L.w_o, rg);
    lv.w_u = t.leaf(L.w_u, rg);
    lv.w_nu = t.leaf(L.w_nu, rg);
    lv.w_o_mlp = t.leaf(L.w_o_mlp, rg);
    if (ngpt) {
      lv.s_qk = bind_scaled(t, L.s_qk, rg);
      lv.s_u = bind_scaled(t, L.s_u, rg);
      lv.s_nu = bind_scaled(t, L.s_nu, rg);
      lv.alpha_a = t.leaf(L.alpha_a.raw, rg);
      lv.alpha_m = t.leaf(L.alpha_m.raw, rg);
    } else {
      lv.attn_gain = t.leaf(L.attn_gain, rg);
      lv.mlp_gain = t.leaf(L.mlp_gain, rg);
    }
  }
  if (ngpt) {
    v.s_z = bind_scaled(t, p.s_z, rg);
  } else {
    v.final_gain = t.leaf(p.final_gain, rg);
  }
  return v;
}

void rebind_param(Tape& t, ParamVars& v, const ModelConfig& cfg, std::string_view name, Var x) {
  if (name == "embed.in") {
    v.e_in = effective_weight(t, x, Axis::kRows, cfg);
    if (cfg.tie_embeddings) v.e_out = v.e_in;
    return;
  }
  if (name == "embed.out" && !cfg.tie_embeddings) {
    v.e_out = effective_weight(t, x, Axis::kRows, cfg);
    return;
  }
  if (name == "s_z" && v.s_z.valid()) {
    v.s_z = x;
    return;
  }
  if (name == "final_gain" && v.final_gain.valid()) {
    v.final_gain = x;
    return;
  }
  constexpr std::string_view kPrefix = "layers.";
  if (name.starts_with(kPrefix)) {
    const std::string_view rest = name.substr(kPrefix.size());
    const std::size_t dot = rest.find('.');
    std::size_t l = 0;
    bool ok = dot != std::string_view::npos && dot > 0;
    for (std::size_t i = 0; ok && i < dot; ++i) {
      ok = rest[i] >= '0' && rest[i] <= '9';
      l = l * 10 + static_cast<std::size_t>(rest[i] - '0');
    }
    if (ok && l < v.layers.size()) {
      LayerVars& lv = v.layers[l];
      const std::string_view field = rest.substr(dot + 1);
      const std::pair<std::string_view, Var*> slots[] = {
          {"w_q", &lv.w_q},       {"w_k", &lv.w_k},         {"w_v", &lv.w_v},
          {"w_o", &lv.w_o},       {"w_u", &lv.w_u},         {"w_nu", &lv.w_nu},
          {"w_o_mlp", &lv.w_o_mlp}, {"s_qk", &lv.s_qk},     {"s_u", &lv.s_u},
          {"s_nu", &lv.s_nu},     {"alpha_a", &lv.alpha_a}, {"alpha_m", &lv.alpha_m},
          {"attn_gain", &lv.attn_gain}, {"mlp_gain", &lv.mlp_gain}};
      for (const auto& [n, slot] : slots) {
        if (n == field && slot->valid()) {
          *slot = x;
          return;
        }
      }
    }
  }
  throw ConfigError("rebind_param: no parameter named '" + std::string(name) + "'");
}

ModelParams collect_grads(Tape& t, const ParamVars& v, const ModelParams& p,
                          const ModelConfig& cfg) {
  ModelParams g = zeros_like(p);
  auto take = [&](Tensor& dst, Var var) {
    if (var.valid()) dst = t.grad(var);
  };
  // With forward_normalize the embedding handles are normalize nodes; the
  // gradient that belongs to the parameter is the one at their input.
  auto leaf_of = [&](Var var) {
    if (var.valid() && (t.kind(var) == ad::OpKind::kUnitNormalize ||
                        t.kind(var) == ad::OpKind::kUnitNormalizeCols)) {
      return t.parents(var)[0];
    }
    return var;
  };
  take(g.e_in, leaf_of(v.e_in));
  if (!cfg.tie_embeddings) take(g.e_out, leaf_of(v.e_out));
  for (std::size_t l = 0; l < v.layers.size(); ++l) {
    const LayerVars& lv = v.layers[l];
    LayerParams& G = g.layers[l];
    take(G.w_q, lv.w_q);
    take(G.w_k, lv.w_k);
    take(G.w_v, lv.w_v);
    take(G.w_o, lv.w_o);
    take(G.w_u, lv.w_u);
    take(G.w_nu, lv.w_nu);
    take(G.w_o_mlp, lv.w_o_mlp);
    take(G.s_qk.raw, lv.s_qk);
    take(G.s_u.raw, lv.s_u);
    take(G.s_nu.raw, lv.s_nu);
    take(G.alpha_a.raw, lv.alpha_a);
    take(G.alpha_m.raw, lv.alpha_m);
    take(G.attn_gain, lv.attn_gain);
    take(G.mlp_gain, lv.mlp_gain);
  }
  take(g.s_z.raw, v.s_z);
  take(g.final_gain, v.final_gain);
  return g;
}

Var rmsnorm(Tape& t, Var h, Var gains) { return t.rmsnorm(h, gains); }

Var eigen_lr_effective(Tape& t, Var raw, const ModelConfig& cfg) {
  const Var base = cfg.alpha_constraint == AlphaConstraint::kAbsolute ? t.abs(raw) : raw;
  return t.scale(base, cfg.alpha_init / cfg.alpha_scale);
}

Var attention_block(Tape& t, Var h, const LayerVars& lv, const ModelConfig& cfg,
                    std::size_t seq_len) {
  const std::size_t dk = cfg.d_k();
  const bool ngpt = cfg.variant == Variant::kNgpt;
  const Var wq = effective_weight(t, lv.w_q, Axis::kCols, cfg);
  const Var wk = effective_weight(t, lv.w_k, Axis::kCols, cfg);
  const Var wv = effective_weight(t, lv.w_v, Axis::kCols, cfg);
  const Var wo = effective_weight(t, lv.w_o, Axis::kRows, cfg);
  Var q = t.rope(t.matmul(h, wq), seq_len, dk, cfg.rope_base);
  Var k = t.rope(t.matmul(h, wk), seq_len, dk, cfg.rope_base);
  const Var v = t.matmul(h, wv);
  if (ngpt) {
    const Var s = scaled_effective(t, lv.s_qk, cfg.sqk_init, cfg.sqk_scale);
    if (cfg.qk_norm) {
      q = t.unit_normalize(q, dk);
      k = t.unit_normalize(k, dk);
    }
    q = t.mul_broadcast(q, s);
    k = t.mul_broadcast(k, s);
  }
  const Var o = t.causal_attention(q, k, v, seq_len, cfg.n_heads, cfg.attention_scale());
  return t.matmul(o, wo);
}

Var mlp_block(Tape& t, Var h, const LayerVars& lv, const ModelConfig& cfg) {
  const Var wu = effective_weight(t, lv.w_u, Axis::kCols, cfg);
  const Var wnu = effective_weight(t, lv.w_nu, Axis::kCols, cfg);
  const Var wo = effective_weight(t, lv.w_o_mlp, Axis::kRows, cfg);
  Var u = t.matmul(h, wu);
  Var nu = t.matmul(h, wnu);
  if (cfg.variant == Variant::kNgpt) {
    const double k = cfg.suv_init / cfg.suv_scale;
    u = t.mul_broadcast(u, lv.s_u, k);
    nu = t.mul_broadcast(nu, lv.s_nu, k * std::sqrt(static_cast<double>(cfg.d_model)));
  }
  return t.matmul(t.mul(u, t.silu(nu)), wo);
}

Var residual_update(Tape& t, Var h, Var block, Var alpha_eff, ResidualMode mode) {
  const Var b = t.unit_normalize(block);
  switch (mode) {
    case ResidualMode::kLerp:
      return t.unit_normalize(t.add(h, t.mul_broadcast(t.sub(b, h), alpha_eff)));
    case ResidualMode::kSlerp:
      if (t.value(alpha_eff).size() != 1) {
        throw ConfigError("residual_mode=slerp needs a scalar eigen learning rate");
      }
      return t.slerp_rows(h, b, alpha_eff);
    case ResidualMode::kRiemannian:
      return t.unit_normalize(t.sub(h, t.mul_broadcast(t.tangent_project(h, b), alpha_eff)));
  }
  return h;
}

Var forward(Tape& t, const ParamVars& v, const ModelConfig& cfg,
            std::span<const std::int32_t> tokens, std::size_t seq_len,
            const ForwardOptions& opts) {
  if (seq_len == 0 || tokens.size() % seq_len != 0 || tokens.empty()) {
    throw DimensionError("forward: " + std::to_string(tokens.size()) +
                         " tokens do not form sequences of length " + std::to_string(seq_len));
  }
  if (seq_len > cfg.context && !opts.allow_extrapolation) {
    throw DimensionError("forward: sequence length " + std::to_string(seq_len) +
                         " exceeds context " + std::to_string(cfg.context));
  }
  const bool ngpt = cfg.variant == Variant::kNgpt;
  Var h = t.embed(v.e_in, std::vector<std::int32_t>(tokens.begin(), tokens.end()));
  for (const LayerVars& lv : v.layers) {
    if (ngpt) {
      const Var aa = eigen_lr_effective(t, lv.alpha_a, cfg);
      h = residual_update(t, h, attention_block(t, h, lv, cfg, seq_len), aa, cfg.residual_mode);
      const Var am = eigen_lr_effective(t, lv.alpha_m, cfg);
      h = residual_update(t, h, mlp_block(t, h, lv, cfg), am, cfg.residual_mode);
    } else {
      h = t.add(h, attention_block(t, t.rmsnorm(h, lv.attn_gain), lv, cfg, seq_len));
      h = t.add(h, mlp_block(t, t.rmsnorm(h, lv.mlp_gain), lv, cfg));
    }
  }
  if (!ngpt) h = t.rmsnorm(h, v.final_gain);
  Var z = t.matmul_nt(h, v.e_out);
  if (ngpt) z = t.mul_broadcast(z, v.s_z, cfg.sz_init / cfg.sz_scale);
  return z;
}

Var loss(Tape& t, Var logits, std::span<const std::int32_t> targets) {
  return t.cross_entropy(logits, std::vector<std::int32_t>(targets.begin(), targets.end()));
}

Tensor logits(const ModelParams& p, const ModelConfig& cfg, std::span<const std::int32_t> tokens,
              std::size_t seq_len, const ForwardOptions& opts) {
  Tape t(false);
  const ParamVars v = bind_params(t, p, cfg, false);
  return t.value(forward(t, v, cfg, tokens, seq_len, opts));
}

double loss_value(const ModelParams& p, const ModelConfig& cfg,
                  std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
                  std::size_t seq_len, const ForwardOptions& opts) {
  Tape t(false);
  const ParamVars v = bind_params(t, p, cfg, false);
  return t.value(loss(t, forward(t, v, cfg, inputs, seq_len, opts), targets))[0];
}

Tensor rope_apply(const Tensor& x, std::size_t seq_len, std::size_t head_dim, double base) {
  Tape t(false);
  return t.value(t.rope(t.constant(x), seq_len, head_dim, base));
}

}  // namespace ngpt
