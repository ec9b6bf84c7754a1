#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ngpt/config.hpp"
#include "ngpt/corpus.hpp"
#include "ngpt/model.hpp"
#include "ngpt/optimizer.hpp"
#include "ngpt/rng.hpp"

namespace ngpt {

/// Everything needed to continue a run.
struct TrainState {
  ModelParams params;
  AdamState adam;
  std::int64_t step = 0;
  Rng rng;
};

/// Fresh parameters from the config seed; the batch stream uses a separate
/// generator derived from the same seed.
TrainState init_train_state(const RunConfig& cfg);

struct LogRow {
  std::int64_t step;
  Split split;
  double loss;
  double lr;
};

struct TrainReport {
  std::vector<LogRow> rows;
  double last_val_loss() const;
};

struct TrainCallbacks {
  std::function<void(const LogRow&)> on_log;
  /// Called after validation rows, with the state at that step.
  std::function<void(const TrainState&)> on_eval;
  /// Called every train.checkpoint_every steps.
  std::function<void(const TrainState&)> on_checkpoint;
  /// Receives the state before a non-finite loss aborts the run.
  std::function<void(const TrainState&)> on_failure;
};

/// Runs optimizer steps from state.step up to stop_step (default:
/// optim.total_steps). Validation is logged at steps that are multiples of
/// train.eval_every and at optim.total_steps.
TrainReport train(TrainState& state, const RunConfig& cfg, const Corpus& corpus,
                  const TrainCallbacks& callbacks = {}, std::int64_t stop_step = -1);

/// Loss and gradient of one batch, accumulated over micro-batches so the
/// result equals the full-batch mean.
struct StepResult {
  double loss;
  ModelParams grads;
};
StepResult loss_and_grads(const ModelParams& params, const ModelConfig& cfg, const Batch& batch,
                          std::size_t micro_batch);

struct EvalResult {
  double loss;
  double perplexity;
};

/// Mean cross-entropy over `n_batches` deterministic validation batches of
/// `batch_size` windows at length seq_len. Lengths above the training
/// context are allowed (extrapolation).
EvalResult evaluate(const ModelParams& params, const ModelConfig& cfg, const Corpus& corpus,
                    std::size_t seq_len, std::size_t n_batches, std::size_t batch_size);

/// "train" / "val".
const char* split_name(Split s) noexcept;

/// Writes rows as `step,split,loss,lr`.
void write_train_log(const std::string& path, const std::vector<LogRow>& rows);

}  // namespace ngpt
