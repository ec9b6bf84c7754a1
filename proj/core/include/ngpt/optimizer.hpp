#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ngpt/config.hpp"
#include "ngpt/model.hpp"

namespace ngpt {

/// Linear warmup to lr over warmup_steps, then cosine decay reaching 0 at
/// total_steps. Steps past total_steps return 0.
double lr_at(std::int64_t step, const OptimConfig& cfg);

/// First and second moments, one pair per entry of named_params().
struct AdamState {
  std::vector<std::string> names;
  std::vector<Tensor> m, v;
  std::int64_t step = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

AdamState make_adam_state(const ModelParams& params, const ModelConfig& cfg);

/// In-place Adam update of one tensor. `t` is the 1-based step count used for
/// bias correction. Decoupled weight decay is applied first when wd > 0.
void adam_update(std::span<double> theta, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, std::int64_t t, double lr, double weight_decay,
                 const OptimConfig& cfg);

/// One optimizer step over every trainable parameter. Grads are checked
/// for NaN/Inf before anything is modified; a bad gradient throws
/// NumericError naming the parameter.
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, double lr,
               const OptimConfig& ocfg, const ModelConfig& mcfg);

/// Re-normalizes every nGPT matrix group and embedding table along its
/// d_model axis, in the storage adam_step reads. Refuses gpt configs.
void post_step_normalize(ModelParams& params, const ModelConfig& cfg);

struct NormAudit {
  std::string name;
  double max_deviation;
};

/// Per-group max |norm - 1| over the normalized parameters.
std::vector<NormAudit> audit_norms(const ModelParams& params, const ModelConfig& cfg);
double max_norm_deviation(const ModelParams& params, const ModelConfig& cfg);

}  // namespace ngpt
