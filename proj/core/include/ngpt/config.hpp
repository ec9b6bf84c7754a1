#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ngpt/hypersphere.hpp"

namespace ngpt {

enum class Variant { kGpt, kNgpt };
enum class ScalingMode { kVector, kScalar, kFixed };

Variant parse_variant(std::string_view s);
std::string_view to_string(Variant v) noexcept;
ScalingMode parse_scaling_mode(std::string_view s);
std::string_view to_string(ScalingMode m) noexcept;

/// Architecture hyperparameters. Fields documented as "0 = default" are
/// filled in by `resolve()`.
struct ModelConfig {
  Variant variant = Variant::kNgpt;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 0;  // 0 = 4 * d_model
  std::size_t vocab = 256;
  std::size_t context = 256;
  double rope_base = 10000.0;

  // nGPT switches.
  bool qk_norm = true;
  ResidualMode residual_mode = ResidualMode::kLerp;
  ScalingMode scaling_sqk = ScalingMode::kVector;
  ScalingMode scaling_suv = ScalingMode::kVector;
  ScalingMode scaling_sz = ScalingMode::kVector;
  AlphaConstraint alpha_constraint = AlphaConstraint::kAbsolute;
  bool alpha_scalar = false;
  bool forward_normalize = false;  // also normalize weights inside the forward pass
  bool tie_embeddings = false;
  double softmax_scale = 0.0;  // 0 = 1/sqrt(d_k) for gpt, sqrt(d_k) for ngpt

  // Reparameterized scalings: effective = raw * init / scale. 0 = 1/sqrt(d_model).
  double alpha_init = 0.05;
  double alpha_scale = 0.0;
  double sqk_init = 1.0;
  double sqk_scale = 0.0;
  double suv_init = 1.0;
  double suv_scale = 1.0;
  double sz_init = 1.0;
  double sz_scale = 0.0;

  double gpt_init_std = 0.02;

  std::size_t d_k() const noexcept { return n_heads ? d_model / n_heads : 0; }
  std::size_t mlp_dim() const noexcept { return d_mlp ? d_mlp : 4 * d_model; }
  double attention_scale() const noexcept;

  void resolve();
  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct OptimConfig {
  double lr = 1e-3;
  std::int64_t total_steps = 1000;
  std::int64_t warmup_steps = -1;  // -1 = variant default
  double weight_decay = -1.0;      // -1 = variant default
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;

  void resolve(Variant variant);
  void validate() const;

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t micro_batch = 0;  // sequences per forward pass; 0 = batch_size
  std::int64_t eval_every = 250;
  std::size_t eval_batches = 8;
  std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
  std::uint64_t seed = 1;

  void resolve();
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct DataConfig {
  std::string path;
  double split = 0.9;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  TrainConfig train;
  DataConfig data;

  /// Fills defaults that depend on other fields, then validates.
  void finalize();

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Parses a JSON object of dotted keys ("model.d_model": 64). Nested objects
/// are flattened, so {"model": {"d_model": 64}} is accepted too.
RunConfig parse_run_config(std::string_view json_text, RunConfig base = {});
RunConfig load_run_config(const std::string& path, RunConfig base = {});

/// Sets one key from its textual value. A key without a section prefix is
/// accepted when exactly one section has it ("variant=ngpt").
void apply_override(RunConfig& cfg, std::string_view key, std::string_view value);
/// "key=value" form.
void apply_override(RunConfig& cfg, std::string_view assignment);

/// Every key with its current value, pretty-printed.
std::string to_json(const RunConfig& cfg);
std::vector<std::string> config_keys();

/// Serializes only the model section (used by checkpoints).
std::string model_config_json(const ModelConfig& cfg);
ModelConfig parse_model_config_json(std::string_view json_text);

}  // namespace ngpt
