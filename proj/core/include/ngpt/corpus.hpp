#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ngpt/rng.hpp"

namespace ngpt {

enum class Split { kTrain, kVal };

/// Token stream with a train/validation boundary at floor(fraction * size).
struct Corpus {
  std::vector<std::int32_t> tokens;
  std::size_t split_index = 0;

  std::span<const std::int32_t> train() const {
    return std::span(tokens).first(split_index);
  }
  std::span<const std::int32_t> val() const { return std::span(tokens).subspan(split_index); }
  std::span<const std::int32_t> part(Split s) const { return s == Split::kTrain ? train() : val(); }
  std::int32_t max_token() const;
};

/// Splits a token stream. Needs at least context + 2 tokens in total and a
/// non-empty validation part; window-length checks happen when batching.
Corpus make_corpus(std::vector<std::int32_t> tokens, double split_fraction, std::size_t context);

/// Raw bytes become token ids 0..255. Files ending in ".u16" are read as
/// little-endian 16-bit token ids instead.
Corpus load_corpus(const std::string& path, double split_fraction, std::size_t context);

/// `path`, or "synthetic:<bytes>:<seed>" for synthetic_text().
Corpus load_corpus_source(const std::string& source, double split_fraction, std::size_t context);

/// Deterministic English-like text for runs without a natural corpus:
/// Zipf-distributed pseudo-words with per-word successor preferences,
/// sentences and paragraphs.
std::string synthetic_text(std::size_t bytes, std::uint64_t seed);

/// `inputs[b]` is a window of the split, `targets[b]` the same window
/// shifted by one token.
struct Batch {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
};

/// Window starts drawn uniformly from [0, len - T - 1] with `rng`.
Batch sample_batch(const Corpus& corpus, Rng& rng, std::size_t batch, std::size_t seq_len,
                   Split split);

/// Evenly spaced windows over the split; `count` windows in total, taken
/// from `first` onward.
Batch fixed_batch(const Corpus& corpus, std::size_t seq_len, Split split, std::size_t first,
                  std::size_t size, std::size_t count);

}  // namespace ngpt
