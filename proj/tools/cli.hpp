#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ngpt/config.hpp"
#include "ngpt/corpus.hpp"

namespace ngpt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Entry point shared by the executable and in-process tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Ablation axes and the settings compared along each.
std::vector<std::string> ablation_axes();

struct AblationRun {
  std::string setting;
  double final_val_loss;
  double delta_pct;  // relative to the first run
};

/// Trains the base config and each variant along `axis` for `budget` steps
/// with the same seed and corpus.
std::vector<AblationRun> run_ablation(const RunConfig& base, const std::string& axis,
                                      std::int64_t budget, const Corpus& corpus, std::ostream& log);

/// "+0.12%" style.
std::string format_delta(double pct);

}  // namespace ngpt::cli
