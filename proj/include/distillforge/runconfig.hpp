#pragma once

#include <string>

#include <json.hpp>

#include "distillforge/compress.hpp"
#include "distillforge/config.hpp"
#include "distillforge/diffusion.hpp"
#include "distillforge/distill.hpp"

namespace distillforge {

struct ScheduleConfig {
    long T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

struct TrainConfig {
    long steps = 1000;
    long batch_size = 4;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    double cfg_drop_prob = 0.1;
    long checkpoint_every = 0;  // 0: only the final checkpoint
    double weight_decay = 0.0;
};

struct DataConfig {
    long n = 512;
    long h = 32;
    long w = 32;
    std::uint64_t seed = 7;
};

/// Everything one invocation needs. Sections are optional in the JSON and
/// default as above; present sections are parsed strictly (unknown keys are
/// rejected) and validated up front.
struct RunConfig {
    UNetConfig unet;
    bool has_unet = false;
    CompressionSpec compression;
    bool has_compression = false;
    std::string recipe = "koala-default";
    LayerMatchStrategy strategy = LayerMatchStrategy::SABottom;
    ScheduleConfig schedule;
    TrainConfig train;
    LossWeights loss_weights;
    FeatKdReduction reduction = FeatKdReduction::PairMean;
    DataConfig data;
    SamplerConfig sampler;
};

/// base_dir resolves a string-valued "unet" reference relative to the file
/// that contained it.
RunConfig run_config_from_json(const nlohmann::json& j, const std::string& base_dir);
RunConfig load_run_config(const std::string& path);

/// Fully resolved echo; reparsing it reproduces the exact run.
nlohmann::json run_config_echo(const RunConfig& cfg);

}  // namespace distillforge
