#pragma once

#include <cstdint>
#include <string>

#include "fvlm/model.hpp"
#include "fvlm/train.hpp"

namespace fvlm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary little-endian layout: "VUKP" magic, u32 version, JSON model
/// config, per-parameter records (name, shape, f32 payload), optional
/// optimizer moments, FNV-1a64 trailer over everything before it.
void save_checkpoint(const std::string& path, const ModelParams& model,
                     const OptimizerState* state = nullptr);

struct LoadedCheckpoint {
    ModelParams model;
    bool has_state = false;
    OptimizerState state;
};

/// Verifies the trailer hash and layout before touching the payload;
/// corrupt files raise CorruptionError, future versions MigrationError.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace fvlm
