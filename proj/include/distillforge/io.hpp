#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/autodiff.hpp"
#include "distillforge/optimizer.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

// ---------------------------------------------------------------------------
// Checkpoint: <dir>/manifest.json + <dir>/weights.bin (little-endian raw,
// parameters concatenated in canonical store order).

void save_checkpoint(const std::string& dir, const ParameterStore& params,
                     const nlohmann::json& config_echo, long step);

struct CheckpointInfo {
    nlohmann::json config;
    long step = 0;
};

CheckpointInfo read_checkpoint_manifest(const std::string& dir);

/// Loads weights into an existing store; every manifest entry must match an
/// existing parameter's name, shape and dtype bit-exactly.
CheckpointInfo load_checkpoint(const std::string& dir, ParameterStore& params);

// Optimizer / loop state sitting next to the weights (train_state.json +
// moments.bin), enough to round-trip a TrainState bit-exactly.
struct TrainStateBlob {
    long step = 0;
    std::uint64_t rng_state = 0, rng_inc = 0;
    double avg_task = 0, avg_out = 0, avg_feat = 0, avg_total = 0;
};

void save_train_state(const std::string& dir, const TrainStateBlob& state, const AdamW& opt);
TrainStateBlob load_train_state(const std::string& dir, AdamW& opt);

// ---------------------------------------------------------------------------
// Tensor dump: <dir>/manifest.json + <dir>/data.bin. The manifest lists
// {name, stage, block_index, kind, shape, dtype, offset, byte_length} in
// write order; data.bin holds the raw little-endian values.

struct DumpEntry {
    std::string name;
    std::string stage;
    int block_index = 0;
    std::string kind;
    Tensor tensor;
};

void write_dump(const std::string& dir, const std::vector<DumpEntry>& entries);
std::vector<DumpEntry> read_dump(const std::string& dir);

// ---------------------------------------------------------------------------

/// Minimal deterministic PNG writer (8-bit RGB, stored deflate blocks).
void write_png_rgb(const std::string& path, const std::vector<std::uint8_t>& rgb, long width,
                   long height);

/// Affine [-1,1] -> [0,255] with clamping, image layout [3,H,W].
std::vector<std::uint8_t> image_to_rgb8(const Tensor& image);

}  // namespace distillforge
