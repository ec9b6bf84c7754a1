#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ngpt/config.hpp"
#include "ngpt/model.hpp"

namespace ngpt {

inline constexpr std::size_t kHistogramBins = 128;

/// Equal-width bins over [lo, hi); the top edge is folded into the last bin.
struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::uint64_t> counts;

  static Histogram build(const std::vector<double>& values, double lo, double hi,
                         std::size_t bins = kHistogramBins);
  double edge(std::size_t i) const;
  std::uint64_t total() const;
};

/// sigma_max / sigma_min, +inf when sigma_min < 1e-300 sigma_max.
double condition_number(const Tensor& m);

double median(std::vector<double> v);

struct ConditionRow {
  std::size_t layer;
  std::string matrix;  // w_q, w_k, w_v, w_o, w_u, w_nu, w_o_mlp
  double median_cond;
};

/// Attention matrices are split into per-head d_model x d_k slices and the
/// median over heads is reported; MLP matrices are taken whole. With
/// `renormalize`, vectors along d_model are made unit length first.
std::vector<ConditionRow> per_layer_condition_report(const ModelParams& params,
                                                     const ModelConfig& cfg,
                                                     bool renormalize = false);

struct EmbeddingStats {
  std::vector<double> norms;
  Histogram norm_hist;  // [0, max(2.5, 1.0001 * max norm))
  /// Eigenvalues of the mean-centered row covariance, descending, and
  /// each divided by their median.
  std::vector<double> eigenvalues;
  std::vector<double> eig_ratios;
  double median_eig = 0.0;
  bool degenerate = false;  // median eigenvalue is zero
  Histogram dot_hist;       // [-m, m), m = max(1, 1.0001 * max |dot|)
  double mean_dot = 0.0;
  std::size_t pairs = 0;
  bool subsampled = false;
  std::uint64_t seed = 0;
};

/// All row pairs when there are at most max_pairs, else max_pairs pairs
/// drawn with `seed`.
EmbeddingStats embedding_stats(const Tensor& e, std::uint64_t seed,
                               std::size_t max_pairs = 1000000);

struct ScalingSummary {
  std::string name;  // alpha_a, alpha_m, s_qk, s_u, s_nu, s_z
  std::vector<double> layer_means;  // one entry for s_z
  double mean = 0.0;
  Histogram hist;
};

/// Effective values of every learned scaling. Throws ConfigError on gpt.
std::vector<ScalingSummary> learned_scalings_report(const ModelParams& params,
                                                    const ModelConfig& cfg);

/// CSV exports. `comments` become leading `#` lines.
void write_condition_csv(const std::string& path, const std::vector<ConditionRow>& rows,
                         const std::vector<std::string>& comments = {});
void write_embedding_csvs(const std::string& dir, const ModelParams& params,
                          const ModelConfig& cfg, std::uint64_t seed);
void write_scalings_csv(const std::string& path, const std::vector<ScalingSummary>& rows,
                        const std::vector<std::string>& comments = {});

}  // namespace ngpt
