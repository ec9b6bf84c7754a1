#include "cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "ngpt/checkpoint.hpp"
#include "ngpt/csv.hpp"
#include "ngpt/diagnostics.hpp"
#include "ngpt/errors.hpp"
#include "ngpt/linalg.hpp"
#include "ngpt/training.hpp"

namespace ngpt::cli {
namespace fs = std::filesystem;

namespace {

/// Failures that are the caller's fault and map to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

void prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = fs::path(dir) / ".ngpt_write_probe";
  std::ofstream f(probe);
  if (ec || !f) throw UsageError("output directory '" + dir + "' is not writable");
  f.close();
  fs::remove(probe, ec);
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
  if (!f) throw Error("cannot write '" + path.string() + "'");
}

struct TrainOptions {
  std::string config;
  std::string resume;
  std::string out = ".";
  std::string data;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  std::int64_t log_every = 10;
};

struct EvalOptions {
  std::string ckpt;
  std::string data;
  std::vector<std::size_t> lengths;
  std::size_t batches = 0;
  std::size_t batch_size = 0;
  std::string csv;
};

struct InspectOptions {
  std::string ckpt;
  std::string out;
  std::string reports;
  std::uint64_t seed = 0;
};

struct AblateOptions {
  std::string base;
  std::string axis;
  std::int64_t budget = 0;
  std::string out;
  std::string data;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
};

struct SampleOptions {
  std::string ckpt;
  std::string prompt;
  std::size_t tokens = 64;
  double temperature = 0.0;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainOptions& o, std::ostream& out) {
  RunConfig cfg;
  TrainState state;
  const bool resuming = !o.resume.empty();
  std::optional<LoadedCheckpoint> ck;
  if (resuming) {
    ck = load_checkpoint(o.resume);
    cfg = ck->config;
  } else if (o.config.empty()) {
    throw UsageError("train needs --config or --resume");
  } else {
    cfg = load_run_config(o.config);
  }
  for (const auto& ov : o.overrides) apply_override(cfg, ov);
  if (o.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(o.seed);
  if (!o.data.empty()) cfg.data.path = o.data;
  cfg.finalize();
  if (cfg.data.path.empty()) throw UsageError("no corpus: set data.path or pass --data");

  prepare_out_dir(o.out);
  const fs::path dir(o.out);
  write_text(dir / "effective_config.json", to_json(cfg));

  const Corpus corpus = load_corpus_source(cfg.data.path, cfg.data.split, cfg.model.context);
  state = resuming ? std::move(ck->state) : init_train_state(cfg);

  out << "train: variant=" << to_string(cfg.model.variant) << " steps=" << state.step << ".."
      << cfg.optim.total_steps << " corpus=" << corpus.tokens.size() << " tokens\n";
  CsvWriter log((dir / "train_log.csv").string(), {"step", "split", "loss", "lr"}, {}, resuming);
  TrainCallbacks cb;
  cb.on_log = [&](const LogRow& r) {
    log.row({std::to_string(r.step), split_name(r.split), format_double(r.loss),
             format_double(r.lr)});
    if (r.split == Split::kVal || (o.log_every > 0 && r.step % o.log_every == 0)) {
      out << "step " << r.step << ' ' << split_name(r.split) << " loss " << fmt("%.6f", r.loss)
          << " lr " << fmt("%.3e", r.lr) << '\n';
    }
    if (r.split == Split::kVal && cfg.model.variant == Variant::kNgpt) {
      // A checkpoint can only carry normalized weights if the live ones are.
      const double dev = max_norm_deviation(state.params, cfg.model);
      if (dev > 1e-6) throw NumericError("norm audit failed: deviation " + format_double(dev));
    }
  };
  cb.on_checkpoint = [&](const TrainState& s) {
    save_checkpoint((dir / ("checkpoint_step" + std::to_string(s.step) + ".ngpt")).string(), s,
                    cfg);
  };
  cb.on_failure = [&](const TrainState& s) {
    save_checkpoint((dir / "diagnostic.ngpt").string(), s, cfg);
    out << "wrote diagnostic checkpoint " << (dir / "diagnostic.ngpt").string() << '\n';
  };
  const TrainReport report = train(state, cfg, corpus, cb);
  save_checkpoint((dir / "checkpoint.ngpt").string(), state, cfg);
  out << "final val loss " << fmt("%.6f", report.last_val_loss()) << ", checkpoint "
      << (dir / "checkpoint.ngpt").string() << '\n';
  return kExitOk;
}

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const LoadedCheckpoint ck = load_checkpoint(o.ckpt);
  const RunConfig& cfg = ck.config;
  const std::string data = o.data.empty() ? cfg.data.path : o.data;
  if (data.empty()) throw UsageError("eval needs --data");
  const Corpus corpus = load_corpus_source(data, cfg.data.split, 1);
  if (corpus.max_token() >= static_cast<std::int32_t>(cfg.model.vocab)) {
    throw DataError("data token " + std::to_string(corpus.max_token()) +
                    " is outside the checkpoint vocabulary of " + std::to_string(cfg.model.vocab));
  }
  std::vector<std::size_t> lengths = o.lengths;
  if (lengths.empty()) lengths.push_back(cfg.model.context);
  const std::size_t batches = o.batches ? o.batches : cfg.train.eval_batches;
  const std::size_t bs = o.batch_size ? o.batch_size : cfg.train.batch_size;
  const std::string csv =
      o.csv.empty() ? (fs::path(o.ckpt).parent_path() / "eval.csv").string() : o.csv;
  CsvWriter w(csv, {"checkpoint", "length", "batches", "loss", "perplexity"}, {}, true);
  for (std::size_t T : lengths) {
    if (T == 0) throw UsageError("--length must be at least 1");
    const EvalResult r = evaluate(ck.state.params, cfg.model, corpus, T, batches, bs);
    out << "length " << T << " loss " << format_double(r.loss) << " perplexity "
        << format_double(r.perplexity) << '\n';
    w.row({o.ckpt, std::to_string(T), std::to_string(batches), format_double(r.loss),
           format_double(r.perplexity)});
  }
  return kExitOk;
}

int cmd_inspect(const InspectOptions& o, std::ostream& out, std::ostream& err) {
  const LoadedCheckpoint ck = load_checkpoint(o.ckpt);
  const ModelConfig& mc = ck.config.model;
  std::vector<std::string> reports;
  if (o.reports.empty()) {
    reports = {"cond", "embed"};
    if (mc.variant == Variant::kNgpt) reports.push_back("scalings");
  } else {
    std::stringstream ss(o.reports);
    for (std::string r; std::getline(ss, r, ',');) {
      if (r != "cond" && r != "embed" && r != "scalings") {
        throw UsageError("unknown report '" + r + "' (expected cond, embed or scalings)");
      }
      reports.push_back(r);
    }
  }
  for (const auto& r : reports) {
    if (r == "scalings" && mc.variant != Variant::kNgpt) {
      err << "error: the scalings report needs an ngpt checkpoint, " << o.ckpt << " is "
          << to_string(mc.variant) << '\n';
      return kExitFailure;
    }
  }
  prepare_out_dir(o.out);
  const fs::path dir(o.out);
  const std::string origin = "checkpoint " + o.ckpt + ", step " + std::to_string(ck.state.step) +
                             ", variant " + std::string(to_string(mc.variant));
  for (const auto& r : reports) {
    if (r == "cond") {
      write_condition_csv((dir / "cond_layers.csv").string(),
                          per_layer_condition_report(ck.state.params, mc), {origin});
      write_condition_csv((dir / "cond_layers_renorm.csv").string(),
                          per_layer_condition_report(ck.state.params, mc, true),
                          {origin, "matrices renormalized along d_model before measuring"});
    } else if (r == "embed") {
      write_embedding_csvs(o.out, ck.state.params, mc, o.seed);
    } else {
      write_scalings_csv((dir / "scalings.csv").string(),
                         learned_scalings_report(ck.state.params, mc), {origin});
    }
    out << "wrote " << r << " report to " << o.out << '\n';
  }
  return kExitOk;
}

int cmd_ablate(const AblateOptions& o, std::ostream& out) {
  RunConfig base = load_run_config(o.base);
  for (const auto& ov : o.overrides) apply_override(base, ov);
  if (o.seed >= 0) base.train.seed = static_cast<std::uint64_t>(o.seed);
  if (!o.data.empty()) base.data.path = o.data;
  if (base.data.path.empty()) throw UsageError("no corpus: set data.path or pass --data");
  if (o.budget <= 0) throw UsageError("--budget must be positive");
  {
    RunConfig probe = base;
    probe.finalize();
  }
  const Corpus corpus = load_corpus_source(base.data.path, base.data.split, base.model.context);
  const auto runs = run_ablation(base, o.axis, o.budget, corpus, out);
  out << "axis,setting,final_val_loss,delta\n";
  for (const auto& r : runs) {
    out << o.axis << ',' << r.setting << ',' << fmt("%.6f", r.final_val_loss) << ','
        << format_delta(r.delta_pct) << '\n';
  }
  if (!o.out.empty()) {
    prepare_out_dir(o.out);
    CsvWriter w((fs::path(o.out) / "ablation.csv").string(),
                {"axis", "setting", "final_val_loss", "delta"},
                {"budget " + std::to_string(o.budget) + " steps, seed " +
                 std::to_string(base.train.seed)});
    for (const auto& r : runs) {
      w.row({o.axis, r.setting, format_double(r.final_val_loss), format_delta(r.delta_pct)});
    }
  }
  return kExitOk;
}

int cmd_sample(const SampleOptions& o, std::ostream& out) {
  const LoadedCheckpoint ck = load_checkpoint(o.ckpt);
  const ModelConfig& mc = ck.config.model;
  std::vector<std::int32_t> toks(o.prompt.begin(), o.prompt.end());
  if (toks.empty()) toks.push_back('\n');
  for (auto t : toks) {
    if (t < 0 || t >= static_cast<std::int32_t>(mc.vocab)) {
      throw DataError("prompt byte outside the model vocabulary");
    }
  }
  Rng rng(o.seed);
  std::string text = o.prompt;
  for (std::size_t i = 0; i < o.tokens; ++i) {
    const std::size_t T = std::min(toks.size(), mc.context);
    const std::span<const std::int32_t> window(toks.data() + toks.size() - T, T);
    const Tensor z = logits(ck.state.params, mc, window, T);
    auto last = z.row(T - 1);
    std::size_t next = 0;
    if (o.temperature <= 0.0) {
      next = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
    } else {
      Tensor scaled = Tensor::matrix(1, last.size());
      for (std::size_t j = 0; j < last.size(); ++j) scaled[j] = last[j] / o.temperature;
      const Tensor p = softmax_rows(scaled);
      double u = rng.uniform();
      next = last.size() - 1;
      for (std::size_t j = 0; j < p.size(); ++j) {
        if ((u -= p[j]) < 0.0) {
          next = j;
          break;
        }
      }
    }
    toks.push_back(static_cast<std::int32_t>(next));
    text.push_back(static_cast<char>(next));
  }
  out << text << '\n';
  return kExitOk;
}

RunConfig variant_of(RunConfig cfg, const std::string& key, const std::string& value) {
  apply_override(cfg, key, value);
  return cfg;
}

}  // namespace

std::vector<std::string> ablation_axes() {
  return {"qk_norm",         "residual_mode",    "scaling_mode_sqk", "scaling_mode_suv",
          "scaling_mode_sz", "alpha_constraint", "alpha_scalar"};
}

std::string format_delta(double pct) { return fmt("%+.2f%%", pct); }

std::vector<AblationRun> run_ablation(const RunConfig& base_in, const std::string& axis,
                                      std::int64_t budget, const Corpus& corpus,
                                      std::ostream& log) {
  RunConfig base = base_in;
  if (base.model.variant != Variant::kNgpt) {
    throw ConfigError("ablation axes apply to the ngpt variant; the base config is gpt");
  }
  base.optim.total_steps = budget;
  if (base.optim.warmup_steps > budget) base.optim.warmup_steps = budget;
  base.train.eval_every = 0;

  std::vector<std::pair<std::string, RunConfig>> runs;
  auto flip = [](bool b) { return b ? std::string("false") : std::string("true"); };
  auto tf = [](bool b) { return b ? std::string("true") : std::string("false"); };
  if (axis == "qk_norm") {
    runs.emplace_back("qk_norm=" + tf(base.model.qk_norm), base);
    runs.emplace_back("qk_norm=" + flip(base.model.qk_norm),
                      variant_of(base, "model.qk_norm", flip(base.model.qk_norm)));
  } else if (axis == "residual_mode") {
    // SLERP is defined for a scalar eigen learning rate, so both arms use one.
    RunConfig b = variant_of(base, "model.alpha_scalar", "true");
    runs.emplace_back("lerp", variant_of(b, "model.residual_mode", "lerp"));
    runs.emplace_back("slerp", variant_of(b, "model.residual_mode", "slerp"));
  } else if (axis == "scaling_mode_sqk" || axis == "scaling_mode_suv" ||
             axis == "scaling_mode_sz") {
    const ScalingMode current = axis == "scaling_mode_sqk"   ? base.model.scaling_sqk
                                : axis == "scaling_mode_suv" ? base.model.scaling_suv
                                                             : base.model.scaling_sz;
    runs.emplace_back(std::string(to_string(current)), base);
    for (const char* m : {"vector", "scalar", "fixed"}) {
      if (m != to_string(current)) runs.emplace_back(m, variant_of(base, "model." + axis, m));
    }
  } else if (axis == "alpha_constraint") {
    const bool abs = base.model.alpha_constraint == AlphaConstraint::kAbsolute;
    runs.emplace_back(abs ? "absolute" : "free", base);
    runs.emplace_back(abs ? "free" : "absolute",
                      variant_of(base, "model.alpha_constraint", abs ? "free" : "absolute"));
  } else if (axis == "alpha_scalar") {
    runs.emplace_back("alpha_scalar=" + tf(base.model.alpha_scalar), base);
    runs.emplace_back("alpha_scalar=" + flip(base.model.alpha_scalar),
                      variant_of(base, "model.alpha_scalar", flip(base.model.alpha_scalar)));
  } else {
    throw UsageError("unknown ablation axis '" + axis + "'");
  }

  std::vector<AblationRun> out;
  for (auto& [setting, cfg] : runs) {
    cfg.finalize();
    TrainState state = init_train_state(cfg);
    log << "ablate " << axis << ": " << setting << " (" << budget << " steps)\n" << std::flush;
    const TrainReport rep = train(state, cfg, corpus);
    const double loss = rep.last_val_loss();
    const double ref = out.empty() ? loss : out.front().final_val_loss;
    out.push_back({setting, loss, 100.0 * (loss - ref) / ref});
    log << "  final val loss " << fmt("%.6f", loss) << '\n';
  }
  return out;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ngpt_lab: baseline GPT and normalized Transformer experiments"};
  app.require_subcommand(1);

  TrainOptions to;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config", to.config, "JSON config with dotted keys");
  train_cmd->add_option("--resume", to.resume, "continue from a checkpoint");
  train_cmd->add_option("--seed", to.seed, "overrides train.seed");
  train_cmd->add_option("--out", to.out, "output directory")->capture_default_str();
  train_cmd->add_option("--data", to.data, "corpus path (overrides data.path)");
  train_cmd->add_option("--override", to.overrides, "key=value, repeatable");
  train_cmd->add_option("--log-every", to.log_every, "print every Nth training step");

  EvalOptions eo;
  auto* eval_cmd = app.add_subcommand("eval", "validation loss and perplexity");
  eval_cmd->add_option("--ckpt", eo.ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eo.data, "corpus (default: the training corpus)");
  eval_cmd->add_option("--length", eo.lengths, "sequence length, repeatable");
  eval_cmd->add_option("--batches", eo.batches, "number of validation batches");
  eval_cmd->add_option("--batch-size", eo.batch_size, "windows per batch");
  eval_cmd->add_option("--csv", eo.csv, "CSV file to append to");

  InspectOptions io;
  auto* inspect_cmd = app.add_subcommand("inspect", "diagnostic CSV reports");
  inspect_cmd->add_option("--ckpt", io.ckpt, "checkpoint file")->required();
  inspect_cmd->add_option("--out", io.out, "output directory")->required();
  inspect_cmd->add_option("--reports", io.reports, "comma list of cond, embed, scalings");
  inspect_cmd->add_option("--seed", io.seed, "dot-product subsample seed");

  AblateOptions ao;
  auto* ablate_cmd = app.add_subcommand("ablate", "compare settings along one ablation axis");
  ablate_cmd->add_option("--base", ao.base, "base config")->required();
  ablate_cmd->add_option("--axis", ao.axis, "ablation axis")->required();
  ablate_cmd->add_option("--budget", ao.budget, "training steps per run")->required();
  ablate_cmd->add_option("--out", ao.out, "directory for ablation.csv");
  ablate_cmd->add_option("--data", ao.data, "corpus path (overrides data.path)");
  ablate_cmd->add_option("--override", ao.overrides, "key=value, repeatable");
  ablate_cmd->add_option("--seed", ao.seed, "overrides train.seed");

  SampleOptions so;
  auto* sample_cmd = app.add_subcommand("sample", "generate bytes from a checkpoint");
  sample_cmd->add_option("--ckpt", so.ckpt, "checkpoint file")->required();
  sample_cmd->add_option("--prompt", so.prompt, "prompt text");
  sample_cmd->add_option("--tokens", so.tokens, "tokens to generate");
  sample_cmd->add_option("--temperature", so.temperature, "0 = greedy");
  sample_cmd->add_option("--seed", so.seed, "sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(to, out);
    if (eval_cmd->parsed()) return cmd_eval(eo, out);
    if (inspect_cmd->parsed()) return cmd_inspect(io, out, err);
    if (ablate_cmd->parsed()) return cmd_ablate(ao, out);
    if (sample_cmd->parsed()) return cmd_sample(so, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"ngpt_lab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace ngpt::cli
