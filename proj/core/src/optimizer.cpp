#include "ngpt/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ngpt/errors.hpp"

namespace ngpt {

double lr_at(std::int64_t step, const OptimConfig& cfg) {
  if (step < 0) throw ConfigError("lr_at: negative step");
  const std::int64_t total = cfg.total_steps;
  const std::int64_t warm = std::max<std::int64_t>(cfg.warmup_steps, 0);
  if (step >= total) return 0.0;
  if (step < warm) return cfg.lr * static_cast<double>(step) / static_cast<double>(warm);
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState make_adam_state(const ModelParams& params, const ModelConfig& cfg) {
  AdamState s;
  for (const auto& e : named_params(params, cfg)) {
    s.names.push_back(e.name);
    s.m.emplace_back(e.tensor->shape());
    s.v.emplace_back(e.tensor->shape());
  }
  return s;
}

void adam_update(std::span<double> theta, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::int64_t t, double lr, double weight_decay,
                 const OptimConfig& cfg) {
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    if (weight_decay > 0.0) theta[i] *= decay;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, double lr,
               const OptimConfig& ocfg, const ModelConfig& mcfg) {
  auto entries = named_params(params, mcfg);
  const auto gentries = named_params(grads, mcfg);
  if (entries.size() != gentries.size() || entries.size() != state.m.size()) {
    throw DimensionError("adam_step: parameter, gradient and state layouts differ");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    const Tensor& g = *gentries[i].tensor;
    if (g.shape() != entries[i].tensor->shape() || state.m[i].shape() != g.shape()) {
      throw DimensionError("adam_step: shape mismatch for " + entries[i].name + ": " +
                           to_string(entries[i].tensor->shape()) + " vs " + to_string(g.shape()));
    }
    if (!g.all_finite()) {
      throw NumericError("adam_step: non-finite gradient in parameter " + entries[i].name);
    }
  }
  ++state.step;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    const double wd = entries[i].decay ? ocfg.weight_decay : 0.0;
    adam_update(entries[i].tensor->data(), gentries[i].tensor->data(), state.m[i].data(),
                state.v[i].data(), state.step, lr, wd, ocfg);
  }
}

void post_step_normalize(ModelParams& params, const ModelConfig& cfg) {
  if (cfg.variant != Variant::kNgpt) {
    throw ConfigError("post_step_normalize applies to the ngpt variant only");
  }
  for (auto& e : named_params(params, cfg)) {
    if (e.normalized) normalize_embedding_dim_inplace(*e.tensor, e.axis);
  }
}

std::vector<NormAudit> audit_norms(const ModelParams& params, const ModelConfig& cfg) {
  std::vector<NormAudit> out;
  for (const auto& e : named_params(params, cfg)) {
    if (e.normalized) out.push_back({e.name, max_norm_deviation(*e.tensor, e.axis)});
  }
  return out;
}

double max_norm_deviation(const ModelParams& params, const ModelConfig& cfg) {
  double worst = 0.0;
  for (const auto& a : audit_norms(params, cfg)) worst = std::max(worst, a.max_deviation);
  return worst;
}

}  // namespace ngpt
