#pragma once

#include <string>
#include <vector>

#include "distillforge/distill.hpp"
#include "distillforge/io.hpp"
#include "distillforge/unet.hpp"

namespace distillforge {

/// Per-stage parameter budget with fractions of the total; delegates to
/// count_params so the two can never disagree.
ParamBudget param_distribution(const UNetConfig& cfg);

/// Transformer share of the lowest-resolution stages (DW-3 + MID + UP-1).
double lowest_level_tx_share(const ParamBudget& budget);

struct SimilarityCurve {
    StageId stage = StageId::MID;  // informational; set by callers that know it
    std::vector<double> values;    // cosine(layer l, layer l-1), l >= 2
    std::vector<double> index;     // x positions, optionally normalized to [0,1]
    bool zero_norm_warning = false;
};

/// Batch-averaged cosine similarity between consecutive layer outputs.
/// Zero-norm tensors contribute 0 and set the warning flag.
SimilarityCurve cross_layer_cosine(const std::vector<Tensor>& layer_outputs, bool normalize_index);

struct PcaResult {
    Tensor components;                       // [k, d], orthonormal rows
    std::vector<double> explained_variance;  // descending
    Tensor projections;                      // [n, k]
};

/// PCA of flattened attention rows: center columns, take the top-k right
/// singular directions (one-sided Jacobi SVD on the centered matrix).
/// Components are sign-fixed so their first nonzero entry is positive.
PcaResult attention_pca(const Tensor& attn_maps, long k);

/// Runs the model on a noised batch and writes every requested tap (plus
/// post-softmax SA maps where capture_attn is set) in the dump format.
void export_tap_dump(const Model& model, const Batch& batch, const DiffusionSchedule& schedule,
                     std::uint64_t seed, const std::vector<FeatureTapSpec>& taps,
                     const std::string& path);

std::string dump_entry_name(const FeatureTapSpec& spec);

}  // namespace distillforge
