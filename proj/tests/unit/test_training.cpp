#include <cmath>
#include <cstring>
#include <fstream>

#include "model_fixtures.hpp"
#include "ngpt/checkpoint.hpp"
#include "ngpt/corpus.hpp"
#include "ngpt/csv.hpp"
#include "ngpt/errors.hpp"
#include "ngpt/training.hpp"
#include "test_support.hpp"

namespace ngpt {
namespace {

using test::read_file;
using test::TempDir;

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

RunConfig small_run(Variant v, std::int64_t steps, std::uint64_t seed = 1) {
  RunConfig c;
  c.model.variant = v;
  c.model.d_model = 16;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.context = 16;
  c.optim.lr = 3e-3;
  c.optim.total_steps = steps;
  c.optim.warmup_steps = v == Variant::kGpt ? std::min<std::int64_t>(2, steps) : -1;
  c.train.batch_size = 4;
  c.train.eval_every = 5;
  c.train.eval_batches = 2;
  c.train.seed = seed;
  c.finalize();
  return c;
}

const Corpus& small_corpus() {
  static const Corpus c = make_corpus(
      [] {
        const std::string s = synthetic_text(20000, 7);
        return std::vector<std::int32_t>(s.begin(), s.end());
      }(),
      0.9, 16);
  return c;
}

// ---- corpus ----

TEST(Corpus, ByteIdentity) {
  TempDir d("corpus");
  write_file(d / "abc.txt", "abc");
  Corpus c = load_corpus((d / "abc.txt").string(), 0.9, 1);
  EXPECT_EQ(c.tokens, (std::vector<std::int32_t>{97, 98, 99}));
  EXPECT_EQ(c.split_index, 2u);
}

TEST(Corpus, SplitSizes) {
  std::vector<std::int32_t> t(100, 5);
  Corpus c = make_corpus(t, 0.9, 8);
  EXPECT_EQ(c.train().size(), 90u);
  EXPECT_EQ(c.val().size(), 10u);
}

TEST(Corpus, RoundTripBytes) {
  TempDir d("corpus");
  std::string bytes;
  for (int i = 0; i < 1000; ++i) bytes.push_back(static_cast<char>((i * 37 + 11) & 0xFF));
  write_file(d / "x.bin", bytes);
  Corpus c = load_corpus((d / "x.bin").string(), 0.7, 16);
  std::string back;
  for (auto t : c.train()) back.push_back(static_cast<char>(t));
  for (auto t : c.val()) back.push_back(static_cast<char>(t));
  EXPECT_EQ(back, bytes);
}

TEST(Corpus, TooSmallNamesMinimum) {
  TempDir d("corpus");
  write_file(d / "tiny.txt", "hello");
  try {
    load_corpus((d / "tiny.txt").string(), 0.9, 16);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("18"), std::string::npos) << e.what();
  }
}

TEST(Corpus, MissingFileIsDataError) {
  EXPECT_THROW(load_corpus("/nonexistent/corpus.txt", 0.9, 4), DataError);
}

TEST(Corpus, U16TokenIds) {
  TempDir d("corpus");
  std::string bytes;
  for (int i = 0; i < 20; ++i) {
    const int id = 300 + i;
    bytes.push_back(static_cast<char>(id & 0xFF));
    bytes.push_back(static_cast<char>(id >> 8));
  }
  write_file(d / "ids.u16", bytes);
  Corpus c = load_corpus((d / "ids.u16").string(), 0.5, 4);
  EXPECT_EQ(c.tokens.front(), 300);
  EXPECT_EQ(c.tokens.back(), 319);
  EXPECT_EQ(c.max_token(), 319);
}

TEST(Corpus, SyntheticSourceIsDeterministic) {
  EXPECT_EQ(synthetic_text(5000, 3), synthetic_text(5000, 3));
  EXPECT_NE(synthetic_text(5000, 3), synthetic_text(5000, 4));
  EXPECT_EQ(synthetic_text(5000, 3).size(), 5000u);
  Corpus c = load_corpus_source("synthetic:4096:2", 0.9, 32);
  EXPECT_EQ(c.tokens.size(), 4096u);
  EXPECT_LT(c.max_token(), 128);
}

TEST(Batch, DeterministicAndShifted) {
  const Corpus& c = small_corpus();
  Rng a(9), b(9);
  Batch x = sample_batch(c, a, 6, 12, Split::kTrain);
  Batch y = sample_batch(c, b, 6, 12, Split::kTrain);
  EXPECT_EQ(x.inputs, y.inputs);
  EXPECT_EQ(x.targets, y.targets);
  ASSERT_EQ(x.inputs.size(), 72u);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t t = 0; t + 1 < 12; ++t) EXPECT_EQ(x.targets[r * 12 + t], x.inputs[r * 12 + t + 1]);
}

TEST(Batch, TargetsAreCorpusSuccessors) {
  std::vector<std::int32_t> tok(200);
  for (int i = 0; i < 200; ++i) tok[i] = i;
  Corpus c = make_corpus(tok, 0.9, 10);
  Rng r(3);
  Batch b = sample_batch(c, r, 50, 10, Split::kTrain);
  for (std::size_t i = 0; i < b.inputs.size(); ++i) {
    EXPECT_EQ(b.targets[i], b.inputs[i] + 1);
    EXPECT_LT(b.targets[i], 180);
  }
}

TEST(Batch, OffsetsAreUniform) {
  std::vector<std::int32_t> tok(200);
  for (int i = 0; i < 200; ++i) tok[i] = i;
  Corpus c = make_corpus(tok, 0.9, 10);  // 180 train tokens, 170 starts
  Rng r(4);
  const std::size_t starts = 170, draws = 10000;
  std::vector<int> hist(starts, 0);
  for (std::size_t i = 0; i < draws / 100; ++i) {
    Batch b = sample_batch(c, r, 100, 10, Split::kTrain);
    for (std::size_t k = 0; k < 100; ++k) ++hist[static_cast<std::size_t>(b.inputs[k * 10])];
  }
  const double e = double(draws) / starts;
  const double sigma = std::sqrt(e * (1.0 - 1.0 / starts));
  double chi2 = 0.0;
  for (int h : hist) {
    EXPECT_LT(std::abs(h - e), 4.0 * sigma + 1.0);
    chi2 += (h - e) * (h - e) / e;
  }
  // chi-square with 169 dof: mean 169, sd ~18.4
  EXPECT_LT(chi2, 169 + 4 * 18.4);
}

TEST(Batch, SplitTooShortThrows) {
  std::vector<std::int32_t> tok(40, 1);
  Corpus c = make_corpus(tok, 0.9, 8);
  Rng r(1);
  EXPECT_THROW(sample_batch(c, r, 2, 8, Split::kVal), DataError);
  EXPECT_THROW(fixed_batch(c, 8, Split::kVal, 0, 1, 1), DataError);
}

// ---- training loop ----

TEST(Train, ZeroStepsGivesOnlyInitialValidation) {
  RunConfig c = small_run(Variant::kNgpt, 0);
  TrainState s = init_train_state(c);
  TrainReport r = train(s, c, small_corpus());
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].split, Split::kVal);
  EXPECT_EQ(r.rows[0].step, 0);
}

TEST(Train, InitialValidationLossNearLogVocab) {
  for (auto v : {Variant::kGpt, Variant::kNgpt}) {
    RunConfig c = small_run(v, 0);
    TrainState s = init_train_state(c);
    TrainReport r = train(s, c, small_corpus());
    EXPECT_NEAR(r.rows[0].loss, std::log(256.0), 0.05 * std::log(256.0)) << to_string(v);
  }
}

TEST(Train, NormAuditPassesAtEveryLoggedStep) {
  RunConfig c = small_run(Variant::kNgpt, 12);
  TrainState s = init_train_state(c);
  int audits = 0;
  TrainCallbacks cb;
  cb.on_log = [&](const LogRow& row) {
    if (row.split == Split::kTrain) {
      EXPECT_LE(max_norm_deviation(s.params, c.model), 1e-6);
      ++audits;
    }
  };
  cb.on_eval = [&](const TrainState& st) { EXPECT_LE(max_norm_deviation(st.params, c.model), 1e-6); };
  train(s, c, small_corpus(), cb);
  EXPECT_EQ(audits, 12);
}

TEST(Train, DeterministicLossSeries) {
  for (auto v : {Variant::kGpt, Variant::kNgpt}) {
    RunConfig c = small_run(v, 8);
    TrainState a = init_train_state(c), b = init_train_state(c);
    TrainReport ra = train(a, c, small_corpus());
    TrainReport rb = train(b, c, small_corpus());
    ASSERT_EQ(ra.rows.size(), rb.rows.size());
    for (std::size_t i = 0; i < ra.rows.size(); ++i) {
      EXPECT_EQ(ra.rows[i].loss, rb.rows[i].loss);
      EXPECT_EQ(ra.rows[i].lr, rb.rows[i].lr);
    }
  }
}

TEST(Train, LogLayoutAndSchedule) {
  RunConfig c = small_run(Variant::kNgpt, 10);
  TrainState s = init_train_state(c);
  TrainReport r = train(s, c, small_corpus());
  // val@0, train 0..4, val@5, train 5..9, val@10
  ASSERT_EQ(r.rows.size(), 13u);
  EXPECT_EQ(r.rows[0].split, Split::kVal);
  EXPECT_EQ(r.rows[6].split, Split::kVal);
  EXPECT_EQ(r.rows[6].step, 5);
  EXPECT_EQ(r.rows.back().step, 10);
  EXPECT_EQ(r.rows.back().lr, 0.0);
  EXPECT_EQ(r.rows[1].lr, c.optim.lr);
  EXPECT_EQ(s.step, 10);
}

TEST(Train, MicroBatchingMatchesFullBatchGradient) {
  RunConfig c = small_run(Variant::kNgpt, 1);
  TrainState s = init_train_state(c);
  Rng r(5);
  Batch b = sample_batch(small_corpus(), r, 4, 16, Split::kTrain);
  StepResult full = loss_and_grads(s.params, c.model, b, 0);
  StepResult split = loss_and_grads(s.params, c.model, b, 1);
  EXPECT_NEAR(full.loss, split.loss, 1e-13);
  auto fe = named_params(full.grads, c.model), se = named_params(split.grads, c.model);
  for (std::size_t i = 0; i < fe.size(); ++i)
    EXPECT_LT(max_abs_diff(*fe[i].tensor, *se[i].tensor), 1e-13) << fe[i].name;
}

TEST(Train, LossDecreasesOnSmallRun) {
  RunConfig c = small_run(Variant::kNgpt, 30);
  c.optim.lr = 1e-2;
  TrainState s = init_train_state(c);
  TrainReport r = train(s, c, small_corpus());
  EXPECT_LT(r.last_val_loss(), r.rows[0].loss - 0.3);
}

TEST(Train, MemorizesOneSentence) {
  const std::string sentence = "The quick brown fox jumps over the lazy dog near a calm riverbank.";
  std::vector<std::int32_t> tok(sentence.begin(), sentence.end());
  Corpus corpus;
  corpus.tokens = tok;
  corpus.tokens.insert(corpus.tokens.end(), tok.begin(), tok.end());
  corpus.split_index = tok.size();
  for (auto v : {Variant::kGpt, Variant::kNgpt}) {
    RunConfig c;
    c.model.variant = v;
    c.model.d_model = 64;
    c.model.n_layers = 2;
    c.model.n_heads = 4;
    c.model.context = 32;
    c.optim.total_steps = 500;
    c.optim.lr = v == Variant::kGpt ? 3e-3 : 1e-2;
    c.optim.warmup_steps = v == Variant::kGpt ? 50 : 0;
    c.train.batch_size = 8;
    c.train.eval_every = 0;
    c.train.eval_batches = 1;
    c.train.seed = 3;
    c.finalize();
    TrainState s = init_train_state(c);
    TrainReport r = train(s, c, corpus);
    double best = 1e9;
    for (const auto& row : r.rows)
      if (row.split == Split::kTrain) best = std::min(best, row.loss);
    EXPECT_LT(best, 0.05) << to_string(v);
  }
}

TEST(Train, NonFiniteLossAbortsWithDiagnosticState) {
  RunConfig c = small_run(Variant::kGpt, 5);
  TrainState s = init_train_state(c);
  s.params.layers[0].w_v[0] = std::numeric_limits<double>::infinity();
  bool dumped = false;
  TrainCallbacks cb;
  cb.on_failure = [&](const TrainState& st) {
    dumped = true;
    EXPECT_EQ(st.step, 0);
  };
  c.train.eval_every = 0;
  EXPECT_THROW(train(s, c, small_corpus(), cb, 3), NumericError);
  EXPECT_TRUE(dumped);
}

TEST(Train, VocabTooSmallForCorpusIsDataError) {
  RunConfig c = small_run(Variant::kNgpt, 1);
  c.model.vocab = 64;
  c.finalize();
  TrainState s = init_train_state(c);
  EXPECT_THROW(train(s, c, small_corpus()), DataError);
}

TEST(Evaluate, MatchesTrainingLoopValidation) {
  RunConfig c = small_run(Variant::kNgpt, 0);
  TrainState s = init_train_state(c);
  TrainReport r = train(s, c, small_corpus());
  EvalResult e = evaluate(s.params, c.model, small_corpus(), c.model.context, c.train.eval_batches,
                          c.train.batch_size);
  EXPECT_NEAR(e.loss, r.rows[0].loss, 1e-12);
  EXPECT_DOUBLE_EQ(e.perplexity, std::exp(e.loss));
}

TEST(Evaluate, ExtrapolatesBeyondContextAndRejectsOverlongLengths) {
  RunConfig c = small_run(Variant::kGpt, 0);
  TrainState s = init_train_state(c);
  EvalResult e = evaluate(s.params, c.model, small_corpus(), 32, 1, 2);
  EXPECT_TRUE(std::isfinite(e.loss));
  EXPECT_THROW(evaluate(s.params, c.model, small_corpus(), 5000, 1, 1), DataError);
}

TEST(TrainLog, CsvFormat) {
  TempDir d("log");
  std::vector<LogRow> rows{{0, Split::kVal, 5.5, 0.001}, {0, Split::kTrain, 0.1, 1e-3}};
  write_train_log((d / "log.csv").string(), rows);
  const std::string s = read_file(d / "log.csv");
  EXPECT_EQ(s.substr(0, s.find('\n')), "step,split,loss,lr");
  EXPECT_NE(s.find("0,val,5.5,0.001"), std::string::npos) << s;
  EXPECT_NE(s.find("0,train,0.10000000000000001,0.001"), std::string::npos) << s;
}

// ---- checkpoints ----

TEST(Checkpoint, RoundTripWithinFloatRounding) {
  TempDir d("ckpt");
  RunConfig c = small_run(Variant::kNgpt, 6);
  TrainState s = init_train_state(c);
  train(s, c, small_corpus(), {}, 3);
  const std::string p = (d / "a.ngpt").string();
  save_checkpoint(p, s, c);
  LoadedCheckpoint l = load_checkpoint(p);
  EXPECT_EQ(l.config, c);
  EXPECT_EQ(l.state.step, 3);
  EXPECT_EQ(l.state.adam.step, s.adam.step);
  EXPECT_EQ(l.state.rng, s.rng);
  auto a = named_params(s.params, c.model), b = named_params(l.state.params, c.model);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].tensor->shape(), b[i].tensor->shape());
    for (std::size_t k = 0; k < a[i].tensor->size(); ++k)
      EXPECT_EQ(static_cast<float>((*a[i].tensor)[k]), (*b[i].tensor)[k]);
  }
  for (std::size_t i = 0; i < s.adam.v.size(); ++i)
    for (std::size_t k = 0; k < s.adam.v[i].size(); ++k)
      EXPECT_EQ(static_cast<float>(s.adam.v[i][k]), l.state.adam.v[i][k]);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir d("ckpt");
  for (auto v : {Variant::kGpt, Variant::kNgpt}) {
    RunConfig c = small_run(v, 4);
    TrainState s = init_train_state(c);
    train(s, c, small_corpus(), {}, 2);
    save_checkpoint((d / "a.ngpt").string(), s, c);
    LoadedCheckpoint l = load_checkpoint((d / "a.ngpt").string());
    save_checkpoint((d / "b.ngpt").string(), l.state, l.config);
    EXPECT_EQ(read_file(d / "a.ngpt"), read_file(d / "b.ngpt"));
  }
}

TEST(Checkpoint, ResumeMatchesContinuousRun) {
  TempDir d("ckpt");
  for (auto v : {Variant::kGpt, Variant::kNgpt}) {
    RunConfig c = small_run(v, 10);
    TrainState straight = init_train_state(c);
    const double continuous = train(straight, c, small_corpus()).last_val_loss();
    TrainState first = init_train_state(c);
    train(first, c, small_corpus(), {}, 5);
    save_checkpoint((d / "mid.ngpt").string(), first, c);
    LoadedCheckpoint l = load_checkpoint((d / "mid.ngpt").string());
    const double resumed = train(l.state, l.config, small_corpus()).last_val_loss();
    EXPECT_LT(std::abs(resumed - continuous) / continuous, 1e-5) << to_string(v);
  }
}

TEST(Checkpoint, DistinctErrors) {
  TempDir d("ckpt");
  RunConfig c = small_run(Variant::kNgpt, 2);
  TrainState s = init_train_state(c);
  const std::string good = (d / "g.ngpt").string();
  save_checkpoint(good, s, c);
  const std::string bytes = read_file(good);
  auto kind_of = [&](const std::string& content) {
    const auto p = d / "x.ngpt";
    write_file(p, content);
    try {
      load_checkpoint(p.string());
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error";
    return CheckpointError::Kind::kIo;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of(bad_magic), CheckpointError::Kind::kBadMagic);
  std::string bad_version = bytes;
  bad_version[4] = 7;
  EXPECT_EQ(kind_of(bad_version), CheckpointError::Kind::kVersionMismatch);
  EXPECT_EQ(kind_of(bytes.substr(0, bytes.size() - 10)), CheckpointError::Kind::kTruncated);
  EXPECT_EQ(kind_of(bytes.substr(0, 10)), CheckpointError::Kind::kTruncated);
  std::string bad_json = bytes;
  bad_json[16] = '#';
  EXPECT_EQ(kind_of(bad_json), CheckpointError::Kind::kMalformed);
  try {
    load_checkpoint((d / "missing.ngpt").string());
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::kIo);
  }
}

TEST(Checkpoint, HeaderIsJsonWithTensorDirectory) {
  TempDir d("ckpt");
  RunConfig c = small_run(Variant::kNgpt, 2);
  TrainState s = init_train_state(c);
  save_checkpoint((d / "h.ngpt").string(), s, c);
  const std::string bytes = read_file(d / "h.ngpt");
  ASSERT_EQ(bytes.substr(0, 4), "NGPT");
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&hlen, bytes.data() + 8, 8);
  EXPECT_EQ(version, kCheckpointVersion);
  const std::string header = bytes.substr(16, hlen);
  EXPECT_NE(header.find("\"layers.1.w_o_mlp\""), std::string::npos);
  EXPECT_NE(header.find("\"adam.v.s_z\""), std::string::npos);
  EXPECT_NE(header.find("\"f32\""), std::string::npos);
  std::size_t floats = 0;
  for (const auto& e : named_params(s.params, c.model)) floats += 3 * e.tensor->size();
  EXPECT_EQ(bytes.size(), 16 + hlen + 4 * floats);
}

}  // namespace
}  // namespace ngpt
