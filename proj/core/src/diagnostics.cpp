#include "ngpt/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "ngpt/csv.hpp"
#include "ngpt/errors.hpp"
#include "ngpt/linalg.hpp"

namespace ngpt {
namespace {

Tensor column_block(const Tensor& m, std::size_t c0, std::size_t c1) {
  Tensor out = Tensor::matrix(m.rows(), c1 - c0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = c0; c < c1; ++c) out.at(r, c - c0) = m.at(r, c);
  return out;
}

Tensor row_block(const Tensor& m, std::size_t r0, std::size_t r1) {
  Tensor out = Tensor::matrix(r1 - r0, m.cols());
  std::copy(m.row(r0).begin(), m.row(r0).begin() + static_cast<std::ptrdiff_t>((r1 - r0) * m.cols()),
            out.raw());
  return out;
}

Histogram range_hist(const std::vector<double>& v) {
  if (v.empty()) return Histogram::build(v, 0.0, 1.0);
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  double lo = *mn, hi = *mx;
  if (hi - lo < 1e-12 * std::max(1.0, std::abs(hi))) {
    lo -= 0.5;
    hi += 0.5;
  } else {
    hi += (hi - lo) * 1e-4;
  }
  return Histogram::build(v, lo, hi);
}

}  // namespace

Histogram Histogram::build(const std::vector<double>& values, double lo, double hi,
                           std::size_t bins) {
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.counts.assign(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    auto i = static_cast<std::int64_t>(std::floor((v - lo) / width));
    i = std::clamp<std::int64_t>(i, 0, static_cast<std::int64_t>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(i)];
  }
  return h;
}

double Histogram::edge(std::size_t i) const {
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(counts.size());
}

std::uint64_t Histogram::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

double condition_number(const Tensor& m) {
  if (std::min(m.rows(), m.cols()) < 2 || m.rank() > 2) {
    throw DimensionError("condition_number needs a matrix with both dimensions >= 2, got " +
                         to_string(m.shape()));
  }
  const std::vector<double> s = singular_values(m);
  const double smax = s.front(), smin = s.back();
  if (smax == 0.0 || smin < 1e-300 * smax) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<ConditionRow> per_layer_condition_report(const ModelParams& params,
                                                     const ModelConfig& cfg, bool renormalize) {
  std::vector<ConditionRow> rows;
  const std::size_t H = cfg.n_heads, dk = cfg.d_k();
  auto prep = [&](const Tensor& m, Axis axis) {
    return renormalize ? normalize_embedding_dim(m, axis) : m;
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& L = params.layers[l];
    for (auto [name, w] : {std::pair{"w_q", &L.w_q}, std::pair{"w_k", &L.w_k},
                           std::pair{"w_v", &L.w_v}}) {
      const Tensor m = prep(*w, Axis::kCols);
      std::vector<double> c;
      for (std::size_t h = 0; h < H; ++h) c.push_back(condition_number(column_block(m, h * dk, (h + 1) * dk)));
      rows.push_back({l, name, median(c)});
    }
    {
      const Tensor m = prep(L.w_o, Axis::kRows);
      std::vector<double> c;
      for (std::size_t h = 0; h < H; ++h) c.push_back(condition_number(row_block(m, h * dk, (h + 1) * dk)));
      rows.push_back({l, "w_o", median(c)});
    }
    rows.push_back({l, "w_u", condition_number(prep(L.w_u, Axis::kCols))});
    rows.push_back({l, "w_nu", condition_number(prep(L.w_nu, Axis::kCols))});
    rows.push_back({l, "w_o_mlp", condition_number(prep(L.w_o_mlp, Axis::kRows))});
  }
  return rows;
}

EmbeddingStats embedding_stats(const Tensor& e, std::uint64_t seed, std::size_t max_pairs) {
  const std::size_t V = e.rows(), d = e.cols();
  if (V < 2) throw DimensionError("embedding_stats needs at least two rows");
  EmbeddingStats st;
  st.seed = seed;

  double max_norm = 0.0;
  for (std::size_t r = 0; r < V; ++r) {
    st.norms.push_back(l2_norm(e.row(r)));
    max_norm = std::max(max_norm, st.norms.back());
  }
  st.norm_hist = Histogram::build(st.norms, 0.0, std::max(2.5, 1.0001 * max_norm));

  Tensor centered = e;
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < V; ++r) mean += e.at(r, c);
    mean /= static_cast<double>(V);
    for (std::size_t r = 0; r < V; ++r) centered.at(r, c) -= mean;
  }
  const std::vector<double> sv = singular_values(centered);
  st.eigenvalues.assign(d, 0.0);
  for (std::size_t i = 0; i < std::min(sv.size(), d); ++i) {
    st.eigenvalues[i] = sv[i] * sv[i] / static_cast<double>(V - 1);
  }
  st.median_eig = median(st.eigenvalues);
  st.degenerate = !(st.median_eig > 1e-300);
  st.eig_ratios.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    st.eig_ratios[i] = st.degenerate ? std::nan("") : st.eigenvalues[i] / st.median_eig;
  }

  std::vector<double> dots;
  const std::uint64_t all_pairs = static_cast<std::uint64_t>(V) * (V - 1) / 2;
  if (all_pairs <= max_pairs) {
    dots.reserve(all_pairs);
    for (std::size_t i = 0; i < V; ++i)
      for (std::size_t j = i + 1; j < V; ++j) dots.push_back(dot(e.row(i), e.row(j)));
  } else {
    st.subsampled = true;
    Rng rng(seed);
    dots.reserve(max_pairs);
    while (dots.size() < max_pairs) {
      const auto i = rng.uniform_index(V), j = rng.uniform_index(V);
      if (i != j) dots.push_back(dot(e.row(i), e.row(j)));
    }
  }
  st.pairs = dots.size();
  double max_abs = 0.0, sum = 0.0;
  for (double x : dots) {
    max_abs = std::max(max_abs, std::abs(x));
    sum += x;
  }
  st.mean_dot = sum / static_cast<double>(dots.size());
  const double m = std::max(1.0, 1.0001 * max_abs);
  st.dot_hist = Histogram::build(dots, -m, m);
  return st;
}

std::vector<ScalingSummary> learned_scalings_report(const ModelParams& params,
                                                    const ModelConfig& cfg) {
  if (cfg.variant != Variant::kNgpt) {
    throw ConfigError("learned scalings exist only for the ngpt variant, this model is " +
                      std::string(to_string(cfg.variant)));
  }
  std::vector<ScalingSummary> out;
  auto summarize = [&](const std::string& name, const std::vector<std::vector<double>>& per_layer) {
    ScalingSummary s;
    s.name = name;
    std::vector<double> all;
    for (const auto& v : per_layer) {
      double m = 0.0;
      for (double x : v) m += x;
      s.layer_means.push_back(m / static_cast<double>(v.size()));
      all.insert(all.end(), v.begin(), v.end());
    }
    double m = 0.0;
    for (double x : all) m += x;
    s.mean = all.empty() ? 0.0 : m / static_cast<double>(all.size());
    s.hist = range_hist(all);
    out.push_back(std::move(s));
  };
  std::vector<std::vector<double>> aa, am, qk, su, snu;
  for (const auto& L : params.layers) {
    aa.push_back(L.alpha_a.effective());
    am.push_back(L.alpha_m.effective());
    qk.push_back(L.s_qk.effective());
    su.push_back(L.s_u.effective());
    snu.push_back(L.s_nu.effective());
  }
  summarize("alpha_a", aa);
  summarize("alpha_m", am);
  summarize("s_qk", qk);
  summarize("s_u", su);
  summarize("s_nu", snu);
  summarize("s_z", {params.s_z.effective()});
  return out;
}

void write_condition_csv(const std::string& path, const std::vector<ConditionRow>& rows,
                         const std::vector<std::string>& comments) {
  CsvWriter w(path, {"layer", "matrix", "median_cond"}, comments);
  for (const auto& r : rows) w.row({std::to_string(r.layer), r.matrix, format_double(r.median_cond)});
}

void write_embedding_csvs(const std::string& dir, const ModelParams& params,
                          const ModelConfig& cfg, std::uint64_t seed) {
  std::vector<std::pair<std::string, const Tensor*>> tables{{"input", &params.e_in}};
  if (!cfg.tie_embeddings) tables.emplace_back("output", &params.e_out);
  std::vector<EmbeddingStats> stats;
  for (const auto& t : tables) stats.push_back(embedding_stats(*t.second, seed));
  const std::filesystem::path d(dir);

  std::vector<std::string> norm_comments{"embedding row norms, " +
                                         std::to_string(kHistogramBins) + " bins per table"};
  for (std::size_t i = 0; i < tables.size(); ++i) {
    double dev = 0.0;
    for (double n : stats[i].norms) dev = std::max(dev, std::abs(n - 1.0));
    norm_comments.push_back(tables[i].first + " max |norm - 1| = " + format_double(dev));
  }
  CsvWriter norms((d / "embed_norms.csv").string(), {"table", "bin_lo", "bin_hi", "count"},
                  norm_comments);
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const Histogram& h = stats[i].norm_hist;
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      norms.row({tables[i].first, format_double(h.edge(b)), format_double(h.edge(b + 1)),
                 std::to_string(h.counts[b])});
    }
  }

  std::vector<std::string> eig_comments{"eigenvalues of the mean-centered row covariance"};
  for (std::size_t i = 0; i < tables.size(); ++i) {
    eig_comments.push_back(tables[i].first + " median = " + format_double(stats[i].median_eig) +
                           (stats[i].degenerate ? " (degenerate: ratios undefined)" : ""));
  }
  CsvWriter eigs((d / "embed_eigs.csv").string(),
                 {"table", "index", "eigenvalue", "ratio_to_median"}, eig_comments);
  for (std::size_t i = 0; i < tables.size(); ++i) {
    for (std::size_t k = 0; k < stats[i].eigenvalues.size(); ++k) {
      eigs.row({tables[i].first, std::to_string(k), format_double(stats[i].eigenvalues[k]),
                format_double(stats[i].eig_ratios[k])});
    }
  }

  std::vector<std::string> dot_comments{"pairwise row dot products, seed = " +
                                        std::to_string(seed)};
  for (std::size_t i = 0; i < tables.size(); ++i) {
    dot_comments.push_back(tables[i].first + " pairs = " + std::to_string(stats[i].pairs) +
                           (stats[i].subsampled ? " (subsampled)" : " (all)") +
                           ", mean = " + format_double(stats[i].mean_dot));
  }
  CsvWriter dots((d / "embed_dots.csv").string(), {"table", "bin_lo", "bin_hi", "count"},
                 dot_comments);
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const Histogram& h = stats[i].dot_hist;
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      dots.row({tables[i].first, format_double(h.edge(b)), format_double(h.edge(b + 1)),
                std::to_string(h.counts[b])});
    }
  }
}

void write_scalings_csv(const std::string& path, const std::vector<ScalingSummary>& rows,
                        const std::vector<std::string>& comments) {
  std::vector<std::string> c = comments;
  c.push_back("effective values; layer = all rows carry the global mean or a histogram bin");
  CsvWriter w(path, {"name", "layer", "mean", "bin_lo", "bin_hi", "count"}, c);
  for (const auto& s : rows) {
    if (s.name != "s_z") {
      for (std::size_t l = 0; l < s.layer_means.size(); ++l) {
        w.row({s.name, std::to_string(l), format_double(s.layer_means[l]), "", "", ""});
      }
    }
    w.row({s.name, "all", format_double(s.mean), "", "", ""});
    for (std::size_t b = 0; b < s.hist.counts.size(); ++b) {
      w.row({s.name, "all", "", format_double(s.hist.edge(b)), format_double(s.hist.edge(b + 1)),
             std::to_string(s.hist.counts[b])});
    }
  }
}

}  // namespace ngpt
