#include "ngpt/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string_view>

#include "ngpt/errors.hpp"

namespace ngpt {
namespace {

void append_window(Batch& b, std::span<const std::int32_t> src, std::size_t start) {
  const std::size_t T = b.seq_len;
  b.inputs.insert(b.inputs.end(), src.begin() + static_cast<std::ptrdiff_t>(start),
                  src.begin() + static_cast<std::ptrdiff_t>(start + T));
  b.targets.insert(b.targets.end(), src.begin() + static_cast<std::ptrdiff_t>(start + 1),
                   src.begin() + static_cast<std::ptrdiff_t>(start + T + 1));
}

void require_window(std::span<const std::int32_t> src, std::size_t seq_len, Split split) {
  if (seq_len == 0) throw DataError("sequence length must be at least 1");
  if (src.size() < seq_len + 1) {
    throw DataError(std::string(split == Split::kTrain ? "train" : "validation") + " split has " +
                    std::to_string(src.size()) + " tokens, a window of " +
                    std::to_string(seq_len) + " needs at least " + std::to_string(seq_len + 1));
  }
}

}  // namespace

std::int32_t Corpus::max_token() const {
  return tokens.empty() ? -1 : *std::max_element(tokens.begin(), tokens.end());
}

Corpus make_corpus(std::vector<std::int32_t> tokens, double split_fraction, std::size_t context) {
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ConfigError("split fraction must be in (0, 1)");
  }
  const std::size_t need = context + 2;
  if (tokens.size() < need) {
    throw DataError("corpus has " + std::to_string(tokens.size()) + " tokens, at least " +
                    std::to_string(need) + " are required for context " + std::to_string(context));
  }
  Corpus c;
  c.split_index = static_cast<std::size_t>(
      std::floor(split_fraction * static_cast<double>(tokens.size())));
  c.tokens = std::move(tokens);
  if (c.split_index == 0 || c.split_index >= c.tokens.size()) {
    throw DataError("split fraction leaves an empty train or validation part");
  }
  return c;
}

Corpus load_corpus(const std::string& path, double split_fraction, std::size_t context) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read corpus file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  std::vector<std::int32_t> tokens;
  const bool ids16 = path.size() >= 4 && path.compare(path.size() - 4, 4, ".u16") == 0;
  if (ids16) {
    if (bytes.size() % 2 != 0) throw DataError("'" + path + "' has an odd number of bytes");
    tokens.resize(bytes.size() / 2);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      tokens[i] = static_cast<std::int32_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
    }
  } else {
    tokens.assign(bytes.begin(), bytes.end());
  }
  try {
    return make_corpus(std::move(tokens), split_fraction, context);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

Corpus load_corpus_source(const std::string& source, double split_fraction, std::size_t context) {
  constexpr std::string_view kPrefix = "synthetic:";
  if (source.rfind(kPrefix, 0) != 0) return load_corpus(source, split_fraction, context);
  const std::string rest = source.substr(kPrefix.size());
  const auto colon = rest.find(':');
  std::size_t bytes = 0;
  std::uint64_t seed = 0;
  try {
    bytes = std::stoull(rest.substr(0, colon));
    seed = colon == std::string::npos ? 0 : std::stoull(rest.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("corpus source '" + source + "' is not synthetic:<bytes>:<seed>");
  }
  const std::string text = synthetic_text(bytes, seed);
  return make_corpus(std::vector<std::int32_t>(text.begin(), text.end()), split_fraction, context);
}

std::string synthetic_text(std::size_t bytes, std::uint64_t seed) {
  Rng rng(seed);
  static const char* const kOnsets[] = {"b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r",
                                        "s", "t", "v", "w", "th", "st", "br", "ch", "sh", "tr",
                                        "pl", "gr", ""};
  static const char* const kVowels[] = {"a", "e", "i", "o", "u", "ea", "ou", "ai", "y", "ee"};
  static const char* const kCodas[] = {"", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "m",
                                       "ck", "th"};
  auto pick = [&](auto& arr) {
    return std::string(arr[rng.uniform_index(std::size(arr))]);
  };

  constexpr std::size_t kWords = 3000;
  constexpr std::size_t kSuccessors = 6;
  std::vector<std::string> words(kWords);
  for (auto& w : words) {
    const std::size_t syll = 1 + rng.uniform_index(3);
    for (std::size_t s = 0; s < syll; ++s) w += pick(kOnsets) + pick(kVowels) + pick(kCodas);
  }
  // Zipf(1) over word ranks via the inverse of the cumulative weights.
  std::vector<double> cdf(kWords);
  double acc = 0.0;
  for (std::size_t i = 0; i < kWords; ++i) cdf[i] = acc += 1.0 / static_cast<double>(i + 1);
  auto zipf = [&] {
    const double u = rng.uniform() * acc;
    return static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
  };
  std::vector<std::array<std::size_t, kSuccessors>> next(kWords);
  for (auto& n : next)
    for (auto& s : n) s = zipf();

  std::string out;
  out.reserve(bytes + 64);
  std::size_t prev = zipf();
  bool sentence_start = true;
  std::size_t sentence_len = 0, sentences = 0;
  while (out.size() < bytes) {
    const std::size_t w = rng.uniform() < 0.6 ? next[prev][rng.uniform_index(kSuccessors)] : zipf();
    std::string word = words[w].substr(0, 12);
    if (sentence_start) {
      word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
      sentence_start = false;
    } else {
      out += (rng.uniform() < 0.08 ? ", " : " ");
    }
    out += word;
    prev = w;
    ++sentence_len;
    if (sentence_len >= 4 && rng.uniform() < 0.12) {
      out += rng.uniform() < 0.85 ? "." : (rng.uniform() < 0.5 ? "?" : "!");
      sentence_start = true;
      sentence_len = 0;
      ++sentences;
      out += (sentences % 6 == 0) ? "\n\n" : " ";
    }
  }
  out.resize(bytes);
  return out;
}

Batch sample_batch(const Corpus& corpus, Rng& rng, std::size_t batch, std::size_t seq_len,
                   Split split) {
  const auto src = corpus.part(split);
  require_window(src, seq_len, split);
  Batch b;
  b.batch = batch;
  b.seq_len = seq_len;
  b.inputs.reserve(batch * seq_len);
  b.targets.reserve(batch * seq_len);
  const std::uint64_t starts = src.size() - seq_len;
  for (std::size_t i = 0; i < batch; ++i) append_window(b, src, rng.uniform_index(starts));
  return b;
}

Batch fixed_batch(const Corpus& corpus, std::size_t seq_len, Split split, std::size_t first,
                  std::size_t size, std::size_t count) {
  const auto src = corpus.part(split);
  require_window(src, seq_len, split);
  const std::size_t last_start = src.size() - seq_len - 1;
  Batch b;
  b.batch = size;
  b.seq_len = seq_len;
  for (std::size_t i = first; i < first + size; ++i) {
    const std::size_t start =
        count <= 1 ? 0
                   : static_cast<std::size_t>((static_cast<unsigned __int128>(i) * last_start) /
                                              (count - 1));
    append_window(b, src, start);
  }
  return b;
}

}  // namespace ngpt
