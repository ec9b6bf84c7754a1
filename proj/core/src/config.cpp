#include "ngpt/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ngpt/errors.hpp"

namespace ngpt {
namespace {

using nlohmann::json;

struct Field {
  std::string key;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
  bool is_string;
};

template <class T>
T expect_number(const json& j, const std::string& key) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw ConfigError("config key '" + key + "' expects true or false");
    return j.get<bool>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw ConfigError("config key '" + key + "' expects a number");
    return j.get<T>();
  } else {
    if (!j.is_number_integer() && !j.is_number_unsigned()) {
      throw ConfigError("config key '" + key + "' expects an integer");
    }
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_integer() && j.get<std::int64_t>() < 0) {
        throw ConfigError("config key '" + key + "' must be non-negative");
      }
    }
    return j.get<T>();
  }
}

std::string expect_string(const json& j, const std::string& key) {
  if (!j.is_string()) throw ConfigError("config key '" + key + "' expects a string");
  return j.get<std::string>();
}

template <class Section, class T>
Field number_field(std::string key, Section RunConfig::*section, T Section::*member) {
  Field f;
  f.key = key;
  f.set = [key, section, member](RunConfig& c, const json& j) {
    (c.*section).*member = expect_number<T>(j, key);
  };
  f.get = [section, member](const RunConfig& c) { return json((c.*section).*member); };
  f.is_string = false;
  return f;
}

template <class Section, class E, class Parse, class Print>
Field enum_field(std::string key, Section RunConfig::*section, E Section::*member, Parse parse,
                 Print print) {
  Field f;
  f.key = key;
  f.set = [key, section, member, parse](RunConfig& c, const json& j) {
    (c.*section).*member = parse(expect_string(j, key));
  };
  f.get = [section, member, print](const RunConfig& c) {
    return json(std::string(print((c.*section).*member)));
  };
  f.is_string = true;
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using M = ModelConfig;
    using O = OptimConfig;
    using T = TrainConfig;
    auto variant_to = [](Variant v) { return to_string(v); };
    auto scaling_to = [](ScalingMode m) { return to_string(m); };
    auto residual_to = [](ResidualMode m) { return to_string(m); };
    auto alpha_to = [](AlphaConstraint a) { return to_string(a); };
    std::vector<Field> f;
    const auto m = &RunConfig::model;
    f.push_back(enum_field("model.variant", m, &M::variant, parse_variant, variant_to));
    f.push_back(number_field("model.d_model", m, &M::d_model));
    f.push_back(number_field("model.n_layers", m, &M::n_layers));
    f.push_back(number_field("model.n_heads", m, &M::n_heads));
    f.push_back(number_field("model.d_mlp", m, &M::d_mlp));
    f.push_back(number_field("model.vocab", m, &M::vocab));
    f.push_back(number_field("model.context", m, &M::context));
    f.push_back(number_field("model.rope_base", m, &M::rope_base));
    f.push_back(number_field("model.qk_norm", m, &M::qk_norm));
    f.push_back(enum_field("model.residual_mode", m, &M::residual_mode, parse_residual_mode,
                           residual_to));
    f.push_back(enum_field("model.scaling_mode_sqk", m, &M::scaling_sqk, parse_scaling_mode,
                           scaling_to));
    f.push_back(enum_field("model.scaling_mode_suv", m, &M::scaling_suv, parse_scaling_mode,
                           scaling_to));
    f.push_back(enum_field("model.scaling_mode_sz", m, &M::scaling_sz, parse_scaling_mode,
                           scaling_to));
    f.push_back(enum_field("model.alpha_constraint", m, &M::alpha_constraint,
                           parse_alpha_constraint, alpha_to));
    f.push_back(number_field("model.alpha_scalar", m, &M::alpha_scalar));
    f.push_back(number_field("model.forward_normalize", m, &M::forward_normalize));
    f.push_back(number_field("model.tie_embeddings", m, &M::tie_embeddings));
    f.push_back(number_field("model.softmax_scale", m, &M::softmax_scale));
    f.push_back(number_field("model.alpha_init", m, &M::alpha_init));
    f.push_back(number_field("model.alpha_scale", m, &M::alpha_scale));
    f.push_back(number_field("model.sqk_init", m, &M::sqk_init));
    f.push_back(number_field("model.sqk_scale", m, &M::sqk_scale));
    f.push_back(number_field("model.suv_init", m, &M::suv_init));
    f.push_back(number_field("model.suv_scale", m, &M::suv_scale));
    f.push_back(number_field("model.sz_init", m, &M::sz_init));
    f.push_back(number_field("model.sz_scale", m, &M::sz_scale));
    f.push_back(number_field("model.gpt_init_std", m, &M::gpt_init_std));
    const auto o = &RunConfig::optim;
    f.push_back(number_field("optim.lr", o, &O::lr));
    f.push_back(number_field("optim.total_steps", o, &O::total_steps));
    f.push_back(number_field("optim.warmup_steps", o, &O::warmup_steps));
    f.push_back(number_field("optim.weight_decay", o, &O::weight_decay));
    f.push_back(number_field("optim.beta1", o, &O::beta1));
    f.push_back(number_field("optim.beta2", o, &O::beta2));
    f.push_back(number_field("optim.eps", o, &O::eps));
    const auto t = &RunConfig::train;
    f.push_back(number_field("train.batch_size", t, &T::batch_size));
    f.push_back(number_field("train.micro_batch", t, &T::micro_batch));
    f.push_back(number_field("train.eval_every", t, &T::eval_every));
    f.push_back(number_field("train.eval_batches", t, &T::eval_batches));
    f.push_back(number_field("train.checkpoint_every", t, &T::checkpoint_every));
    f.push_back(number_field("train.seed", t, &T::seed));
    Field path;
    path.key = "data.path";
    path.set = [](RunConfig& c, const json& j) { c.data.path = expect_string(j, "data.path"); };
    path.get = [](const RunConfig& c) { return json(c.data.path); };
    path.is_string = true;
    f.push_back(path);
    f.push_back(number_field("data.split", &RunConfig::data, &DataConfig::split));
    return f;
  }();
  return table;
}

const Field& find_field(std::string_view key) {
  const Field* suffix_match = nullptr;
  int suffix_count = 0;
  for (const Field& f : fields()) {
    if (f.key == key) return f;
    const auto dot = f.key.find('.');
    if (f.key.substr(dot + 1) == key) {
      suffix_match = &f;
      ++suffix_count;
    }
  }
  if (suffix_count == 1) return *suffix_match;
  if (suffix_count > 1) throw ConfigError("ambiguous config key '" + std::string(key) + "'");
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object()) {
      flatten(it.value(), key, out);
    } else {
      out.emplace_back(key, it.value());
    }
  }
}

void check_positive(std::size_t v, const char* name) {
  if (v == 0) throw ConfigError(std::string(name) + " must be positive");
}

void check_positive_real(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive");
}

}  // namespace

Variant parse_variant(std::string_view s) {
  if (s == "gpt") return Variant::kGpt;
  if (s == "ngpt") return Variant::kNgpt;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected gpt or ngpt)");
}

std::string_view to_string(Variant v) noexcept { return v == Variant::kGpt ? "gpt" : "ngpt"; }

ScalingMode parse_scaling_mode(std::string_view s) {
  if (s == "vector") return ScalingMode::kVector;
  if (s == "scalar") return ScalingMode::kScalar;
  if (s == "fixed") return ScalingMode::kFixed;
  throw ConfigError("unknown scaling mode '" + std::string(s) +
                    "' (expected vector, scalar or fixed)");
}

std::string_view to_string(ScalingMode m) noexcept {
  switch (m) {
    case ScalingMode::kVector: return "vector";
    case ScalingMode::kScalar: return "scalar";
    case ScalingMode::kFixed: return "fixed";
  }
  return "vector";
}

double ModelConfig::attention_scale() const noexcept {
  if (softmax_scale > 0.0) return softmax_scale;
  const double dk = static_cast<double>(d_k());
  return variant == Variant::kNgpt ? std::sqrt(dk) : 1.0 / std::sqrt(dk);
}

void ModelConfig::resolve() {
  if (d_mlp == 0) d_mlp = 4 * d_model;
  const double inv_root = d_model ? 1.0 / std::sqrt(static_cast<double>(d_model)) : 0.0;
  if (alpha_scale == 0.0) alpha_scale = inv_root;
  if (sqk_scale == 0.0) sqk_scale = inv_root;
  if (sz_scale == 0.0) sz_scale = inv_root;
}

void ModelConfig::validate() const {
  check_positive(d_model, "model.d_model");
  check_positive(n_heads, "model.n_heads");
  check_positive(context, "model.context");
  if (vocab < 2) throw ConfigError("model.vocab must be at least 2");
  if (d_model % n_heads != 0) {
    throw ConfigError("model.d_model (" + std::to_string(d_model) +
                      ") must be divisible by model.n_heads (" + std::to_string(n_heads) + ")");
  }
  if (d_k() % 2 != 0) {
    throw ConfigError("head dimension d_model/n_heads = " + std::to_string(d_k()) +
                      " must be even for rotary embeddings");
  }
  check_positive(mlp_dim(), "model.d_mlp");
  check_positive_real(rope_base, "model.rope_base");
  if (softmax_scale < 0.0) throw ConfigError("model.softmax_scale must be >= 0");
  if (variant == Variant::kNgpt) {
    for (auto [v, name] : {std::pair{alpha_scale, "model.alpha_scale"},
                           std::pair{sqk_scale, "model.sqk_scale"},
                           std::pair{suv_scale, "model.suv_scale"},
                           std::pair{sz_scale, "model.sz_scale"}}) {
      if (v != 0.0) check_positive_real(v, name);
    }
    if (residual_mode == ResidualMode::kSlerp && !alpha_scalar) {
      throw ConfigError("residual_mode=slerp needs a scalar eigen learning rate (model.alpha_scalar=true)");
    }
  } else {
    check_positive_real(gpt_init_std, "model.gpt_init_std");
  }
}

void OptimConfig::resolve(Variant variant) {
  if (warmup_steps < 0) {
    warmup_steps = variant == Variant::kGpt ? std::min<std::int64_t>(2000, total_steps) : 0;
  }
  if (weight_decay < 0.0) weight_decay = variant == Variant::kGpt ? 0.1 : 0.0;
}

void OptimConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("optim.lr must be >= 0");
  if (total_steps < 0) throw ConfigError("optim.total_steps must be >= 0");
  if (warmup_steps > total_steps) {
    throw ConfigError("optim.warmup_steps (" + std::to_string(warmup_steps) +
                      ") exceeds optim.total_steps (" + std::to_string(total_steps) + ")");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2 must be in [0, 1)");
  check_positive_real(eps, "optim.eps");
}

void TrainConfig::resolve() {
  if (micro_batch == 0 || micro_batch > batch_size) micro_batch = batch_size;
}

void TrainConfig::validate() const {
  check_positive(batch_size, "train.batch_size");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
}

void RunConfig::finalize() {
  model.resolve();
  optim.resolve(model.variant);
  train.resolve();
  model.validate();
  optim.validate();
  train.validate();
  if (!(data.split > 0.0 && data.split < 1.0)) throw ConfigError("data.split must be in (0, 1)");
}

RunConfig parse_run_config(std::string_view json_text, RunConfig base) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::pair<std::string, json>> flat;
  flatten(j, "", flat);
  for (const auto& [key, value] : flat) find_field(key).set(base, value);
  return base;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void apply_override(RunConfig& cfg, std::string_view key, std::string_view value) {
  const Field& f = find_field(key);
  json j;
  if (f.is_string) {
    j = std::string(value);
  } else {
    j = json::parse(value, nullptr, false);
    if (j.is_discarded()) {
      throw ConfigError("override " + std::string(key) + "=" + std::string(value) +
                        ": value is not a number or boolean");
    }
  }
  f.set(cfg, j);
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  apply_override(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::string to_json(const RunConfig& cfg) {
  json j = json::object();
  for (const Field& f : fields()) j[f.key] = f.get(cfg);
  return j.dump(2) + "\n";
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

std::string model_config_json(const ModelConfig& cfg) {
  RunConfig rc;
  rc.model = cfg;
  json j = json::object();
  for (const Field& f : fields()) {
    if (f.key.rfind("model.", 0) == 0) j[f.key] = f.get(rc);
  }
  return j.dump();
}

ModelConfig parse_model_config_json(std::string_view json_text) {
  return parse_run_config(json_text).model;
}

}  // namespace ngpt
