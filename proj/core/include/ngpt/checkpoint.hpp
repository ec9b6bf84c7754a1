#pragma once

#include <cstdint>
#include <string>

#include "ngpt/config.hpp"
#include "ngpt/training.hpp"

namespace ngpt {

/// Binary layout:
///   "NGPT" | u32 version | u64 header length | JSON header | f32 payload
/// All integers and floats little-endian. The header holds the full run
/// config, step, RNG state and a tensor directory (name, dtype, shape,
/// byte offset into the payload). Tensors are stored in named_params()
/// order, followed by the Adam first and second moments.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const TrainState& state, const RunConfig& cfg);

struct LoadedCheckpoint {
  RunConfig config;
  TrainState state;
};

/// Throws CheckpointError with kind kBadMagic, kVersionMismatch,
/// kTruncated, kMalformed or kIo.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace ngpt
