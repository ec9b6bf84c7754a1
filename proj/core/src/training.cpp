#include "ngpt/training.hpp"

#include <cmath>

#include "ngpt/csv.hpp"
#include "ngpt/errors.hpp"

namespace ngpt {
namespace {

// Batch stream seed, kept apart from the parameter-init stream.
constexpr std::uint64_t kBatchStreamSalt = 0xB5AD4ECEDA1CE2A9ull;

void add_into(ModelParams& acc, const ModelParams& g, const ModelConfig& cfg) {
  auto dst = named_params(acc, cfg);
  const auto src = named_params(g, cfg);
  for (std::size_t i = 0; i < dst.size(); ++i) axpy(1.0, src[i].tensor->data(), dst[i].tensor->data());
}

}  // namespace

const char* split_name(Split s) noexcept { return s == Split::kTrain ? "train" : "val"; }

double TrainReport::last_val_loss() const {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it)
    if (it->split == Split::kVal) return it->loss;
  return std::nan("");
}

TrainState init_train_state(const RunConfig& cfg) {
  TrainState s;
  s.params = init_params(cfg.model, cfg.train.seed);
  s.adam = make_adam_state(s.params, cfg.model);
  s.rng = Rng(cfg.train.seed ^ kBatchStreamSalt);
  return s;
}

StepResult loss_and_grads(const ModelParams& params, const ModelConfig& cfg, const Batch& batch,
                          std::size_t micro_batch) {
  const std::size_t T = batch.seq_len;
  const std::size_t mb = micro_batch == 0 ? batch.batch : std::min(micro_batch, batch.batch);
  StepResult r{0.0, {}};
  for (std::size_t b0 = 0; b0 < batch.batch; b0 += mb) {
    const std::size_t n = std::min(mb, batch.batch - b0);
    const std::span<const std::int32_t> in(batch.inputs.data() + b0 * T, n * T);
    const std::span<const std::int32_t> tg(batch.targets.data() + b0 * T, n * T);
    ad::Tape tape(false);
    const ParamVars vars = bind_params(tape, params, cfg);
    const ad::Var l = loss(tape, forward(tape, vars, cfg, in, T), tg);
    const double w = static_cast<double>(n) / static_cast<double>(batch.batch);
    const ad::Var scaled = tape.scale(l, w);
    tape.backward(scaled);
    r.loss += tape.value(scaled)[0];
    ModelParams g = collect_grads(tape, vars, params, cfg);
    if (b0 == 0) {
      r.grads = std::move(g);
    } else {
      add_into(r.grads, g, cfg);
    }
  }
  return r;
}

EvalResult evaluate(const ModelParams& params, const ModelConfig& cfg, const Corpus& corpus,
                    std::size_t seq_len, std::size_t n_batches, std::size_t batch_size) {
  if (n_batches == 0 || batch_size == 0) throw ConfigError("evaluate needs at least one batch");
  ForwardOptions opts;
  opts.allow_extrapolation = true;
  const std::size_t count = n_batches * batch_size;
  double total = 0.0;
  for (std::size_t i = 0; i < n_batches; ++i) {
    const Batch b = fixed_batch(corpus, seq_len, Split::kVal, i * batch_size, batch_size, count);
    total += loss_value(params, cfg, b.inputs, b.targets, seq_len, opts);
  }
  const double l = total / static_cast<double>(n_batches);
  return {l, std::exp(l)};
}

TrainReport train(TrainState& state, const RunConfig& cfg, const Corpus& corpus,
                  const TrainCallbacks& cb, std::int64_t stop_step) {
  const ModelConfig& mc = cfg.model;
  const OptimConfig& oc = cfg.optim;
  const TrainConfig& tc = cfg.train;
  if (stop_step < 0 || stop_step > oc.total_steps) stop_step = oc.total_steps;
  if (corpus.max_token() >= static_cast<std::int32_t>(mc.vocab)) {
    throw DataError("corpus token " + std::to_string(corpus.max_token()) +
                    " does not fit the model vocabulary of " + std::to_string(mc.vocab));
  }
  const bool ngpt = mc.variant == Variant::kNgpt;
  TrainReport report;
  auto log = [&](const LogRow& row) {
    report.rows.push_back(row);
    if (cb.on_log) cb.on_log(row);
  };
  auto validate = [&](std::int64_t step) {
    const EvalResult e =
        evaluate(state.params, mc, corpus, mc.context, tc.eval_batches, tc.batch_size);
    log({step, Split::kVal, e.loss, lr_at(step, oc)});
    if (cb.on_eval) cb.on_eval(state);
  };
  auto due = [&](std::int64_t step) {
    return step == oc.total_steps || (tc.eval_every > 0 && step % tc.eval_every == 0);
  };

  for (std::int64_t s = state.step; s < stop_step; ++s) {
    if (due(s)) validate(s);
    const Batch batch = sample_batch(corpus, state.rng, tc.batch_size, mc.context, Split::kTrain);
    StepResult r;
    try {
      r = loss_and_grads(state.params, mc, batch, tc.micro_batch);
    } catch (const DegenerateVectorError& e) {
      // Inf/NaN activations surface here as degenerate norms.
      if (cb.on_failure) cb.on_failure(state);
      throw NumericError("forward pass failed at step " + std::to_string(s) + ": " + e.what());
    }
    const double lr = lr_at(s, oc);
    if (!std::isfinite(r.loss)) {
      if (cb.on_failure) cb.on_failure(state);
      throw NumericError("non-finite training loss at step " + std::to_string(s));
    }
    try {
      adam_step(state.params, r.grads, state.adam, lr, oc, mc);
    } catch (const NumericError&) {
      if (cb.on_failure) cb.on_failure(state);
      throw;
    }
    if (ngpt) post_step_normalize(state.params, mc);
    state.step = s + 1;
    log({s, Split::kTrain, r.loss, lr});
    if (cb.on_checkpoint && tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 &&
        state.step != oc.total_steps) {
      cb.on_checkpoint(state);
    }
  }
  if (stop_step == oc.total_steps && state.step == stop_step) validate(stop_step);
  return report;
}

void write_train_log(const std::string& path, const std::vector<LogRow>& rows) {
  CsvWriter w(path, {"step", "split", "loss", "lr"});
  for (const auto& r : rows) {
    w.row({std::to_string(r.step), split_name(r.split), format_double(r.loss),
           format_double(r.lr)});
  }
}

}  // namespace ngpt
