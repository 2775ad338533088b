#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "distillforge/autodiff.hpp"
#include "distillforge/config.hpp"

namespace distillforge {

enum class TapKind { SA, CA, FFN, Res, LF };
const char* tap_kind_name(TapKind k);
TapKind tap_kind_from_name(const std::string& name);

/// Capture point for an intermediate feature. block_index is the 1-based
/// index into the stage-flat sequence of transformer layers (SA/CA/FFN) or
/// residual blocks (Res), in execution order across pairs; LF uses 0.
struct FeatureTapSpec {
    StageId stage = StageId::MID;
    int block_index = 0;
    TapKind kind = TapKind::LF;
    bool capture_attn = false;  // SA only: also record the post-softmax map

    std::string to_string() const;
    bool operator==(const FeatureTapSpec& o) const {
        return stage == o.stage && block_index == o.block_index && kind == o.kind;
    }
};

struct TapRecord {
    FeatureTapSpec spec;
    NodePtr value;  // differentiable handle into the forward graph
    std::optional<Tensor> attn_probs;  // head-averaged [B,T,T], analysis only
    const Tensor& tensor() const { return value->value; }
};

// ---------------------------------------------------------------------------
// Structural plan. One walk of the config drives building, counting, forward
// and weight inheritance, so they cannot drift apart.

struct ElemPlan {
    enum Kind { kRes, kTx } kind = kRes;
    std::string prefix;
    int pair_index = 0;        // 1-based; MID res blocks are pairs 1 and 2
    long c_in = 0, c_out = 0;  // res
    long channels = 0, depth = 0;  // tx
};

struct StagePlan {
    StageId stage = StageId::DW1;
    std::vector<ElemPlan> elems;
    bool has_down = false, has_up = false;
    long resample_channels = 0;
    long out_channels = 0;
    long n_res = 0;
    long n_tx_layers = 0;  // stage-flat transformer layer count
};

struct UNetPlan {
    UNetConfig cfg;
    std::vector<StagePlan> stages;  // forward order
    const StagePlan* find_stage(StageId s) const;
};

UNetPlan plan_unet(const UNetConfig& cfg);

enum class ParamKind { Res, Tx, Other };

struct InitSpec {
    enum Kind { kUniformFanIn, kZeros, kOnes } kind = kZeros;
    long fan_in = 1;
};

/// Enumerates every parameter of the network in canonical (checkpoint) order.
void for_each_unet_param(
    const UNetPlan& plan,
    const std::function<void(const std::string& name, const std::vector<long>& shape,
                             StageId stage, ParamKind kind, const InitSpec& init)>& fn);

// ---------------------------------------------------------------------------

struct StageBudget {
    long res = 0, tx = 0, other = 0;
    long total() const { return res + tx + other; }
};

struct StageFractions {
    double res = 0, tx = 0, other = 0;
};

struct ParamBudget {
    long total = 0;
    std::map<StageId, StageBudget> per_stage;
    std::map<StageId, StageFractions> fractions;
};

/// Symbolic parameter count straight from the config; no tensors are
/// allocated, and the result equals the element sum of build_unet(cfg).
ParamBudget count_params(const UNetConfig& cfg);

// ---------------------------------------------------------------------------

struct UNetModel {
    UNetConfig config;
    UNetPlan plan;
    Dtype dtype = Dtype::F32;
    std::uint64_t seed = 0;
    long timestep_limit = 0;  // 0 = unchecked; set from the diffusion schedule
    ParameterStore params;
};

/// Deterministic build: every parameter's init stream is keyed on
/// (seed, parameter name), so identical (config, seed) give identical bits.
UNetModel build_unet(const UNetConfig& cfg, std::uint64_t seed, Dtype dtype = Dtype::F32);

void freeze(ParameterStore& params);

struct ForwardResult {
    NodePtr eps_pred;
    std::vector<TapRecord> records;  // in tap-spec order
};

/// Runs the denoiser. ctx is [B, L, context_dim] (required whenever the
/// model contains any transformer stack). Tap capture never perturbs the
/// main path: eps_pred is bit-identical with and without taps.
ForwardResult unet_forward(const UNetModel& m, const NodePtr& z_t,
                           const std::vector<long>& timesteps, const NodePtr& ctx,
                           const std::vector<FeatureTapSpec>& taps = {});

}  // namespace distillforge
