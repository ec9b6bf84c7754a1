#include <benchmark/benchmark.h>

#include "ngpt/autodiff.hpp"
#include "ngpt/config.hpp"
#include "ngpt/corpus.hpp"
#include "ngpt/diagnostics.hpp"
#include "ngpt/linalg.hpp"
#include "ngpt/model.hpp"
#include "ngpt/rng.hpp"
#include "ngpt/training.hpp"

namespace {

using namespace ngpt;

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = randn(rng, {n, 128}, 0.0, 1.0), b = randn(rng, {128, 512}, 0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * n * 128 * 512, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Matmul)->Arg(256)->Arg(2048)->Unit(benchmark::kMillisecond);

void BM_MatmulNT(benchmark::State& state) {
  Rng rng(2);
  const Tensor a = randn(rng, {2048, 128}, 0.0, 1.0), b = randn(rng, {256, 128}, 0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(matmul_nt(a, b));
}
BENCHMARK(BM_MatmulNT)->Unit(benchmark::kMillisecond);

ModelConfig bench_model(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.d_model = 128;
  c.n_layers = 1;
  c.n_heads = 4;
  c.context = 256;
  c.resolve();
  c.validate();
  return c;
}

void BM_AttentionForwardBackward(benchmark::State& state) {
  const ModelConfig c = bench_model(static_cast<Variant>(state.range(0)));
  const ModelParams p = init_params(c, 3);
  Rng rng(4);
  const Tensor h = randn(rng, {4 * c.context, c.d_model}, 0.0, 1.0);
  for (auto _ : state) {
    ad::Tape t;
    const ParamVars v = bind_params(t, p, c);
    const ad::Var out = attention_block(t, t.constant(h), v.layers[0], c, c.context);
    t.backward(t.sum(out));
  }
  state.SetLabel(std::string(to_string(c.variant)));
}
BENCHMARK(BM_AttentionForwardBackward)
    ->Arg(static_cast<int>(Variant::kGpt))
    ->Arg(static_cast<int>(Variant::kNgpt))
    ->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  RunConfig cfg;
  cfg.model.variant = static_cast<Variant>(state.range(0));
  cfg.model.d_model = 64;
  cfg.model.n_layers = 2;
  cfg.model.n_heads = 2;
  cfg.model.context = 64;
  cfg.train.batch_size = 16;
  cfg.train.eval_every = 0;
  cfg.optim.total_steps = 1000000;
  cfg.data.path = "synthetic:200000:1";
  cfg.finalize();
  const Corpus corpus = load_corpus_source(cfg.data.path, cfg.data.split, cfg.model.context);
  TrainState s = init_train_state(cfg);
  for (auto _ : state) train(s, cfg, corpus, {}, s.step + 1);
  state.SetLabel(std::string(to_string(cfg.model.variant)));
}
BENCHMARK(BM_TrainStep)
    ->Arg(static_cast<int>(Variant::kGpt))
    ->Arg(static_cast<int>(Variant::kNgpt))
    ->Unit(benchmark::kMillisecond);

void BM_ConditionNumber(benchmark::State& state) {
  Rng rng(5);
  const Tensor m = randn(rng, {128, 32}, 0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(condition_number(m));
}
BENCHMARK(BM_ConditionNumber);

}  // namespace

BENCHMARK_MAIN();
