#pragma once

#include <string>
#include <utility>
#include <vector>

#include "distillforge/unet.hpp"

namespace distillforge {

enum class LayerMatchStrategy { SABottom, SAInterleave, SAUp };
const char* strategy_name(LayerMatchStrategy s);
LayerMatchStrategy strategy_from_name(const std::string& name);

/// Block-removal flags plus per-level transformer depth targets.
struct CompressionSpec {
    bool remove_encoder_last_pair = false;
    bool remove_decoder_intermediate_pair = false;
    std::vector<long> target_tx_depths = {0, 0, 0};
    bool remove_mid = false;
};

std::string compression_spec_to_json(const CompressionSpec& spec);
CompressionSpec compression_spec_from_json(const std::string& json_text);
CompressionSpec load_compression_spec(const std::string& path);

/// Derives the student config: drops the last encoder pair and the
/// intermediate decoder pair when flagged, replaces transformer depths,
/// and clears the mid block when flagged. When the mid block is retained
/// its depth follows the lowest-level target. Channel widths, head_dim and
/// context_dim never change.
UNetConfig compress_config(const UNetConfig& teacher, const CompressionSpec& spec);

/// Teacher layer indices (1-based, strictly increasing, length d_student)
/// that a shallower student's layers mimic.
///   SA-bottom:     {1..d_s}
///   SA-up:         {d_t-d_s+1..d_t}
///   SA-interleave: odd indices from 1, truncated to d_s, backfilled with the
///                  largest unused indices, sorted ascending.
std::vector<int> plan_layer_match(int d_teacher, int d_student, LayerMatchStrategy strategy);

struct MatchPair {
    FeatureTapSpec student;
    FeatureTapSpec teacher;
};

struct MatchPlan {
    std::string name;
    std::vector<MatchPair> pairs;
};

std::string match_plan_to_json(const MatchPlan& plan);
MatchPlan match_plan_from_json(const std::string& json_text);
MatchPlan load_match_plan(const std::string& path);

/// Known recipes: koala-default, sa-only, lf-only, sa+res-dw1up3, sa+lf-all,
/// sa+res-all, all-features, and stage:<StageId> for single-stage SA.
MatchPlan plan_feature_match(const UNetConfig& teacher, const UNetConfig& student,
                             const std::string& recipe,
                             LayerMatchStrategy strategy = LayerMatchStrategy::SABottom);

struct WeightMap {
    std::vector<std::pair<std::string, std::string>> entries;  // (student, teacher)
    std::vector<std::string> unmatched_student;
};

/// Copies every structurally surviving teacher parameter into the student;
/// parameters whose shape changed (concat widths) or that have no teacher
/// counterpart keep their fresh seeded init and are listed unmatched.
WeightMap inherit_weights(const UNetModel& teacher, UNetModel& student,
                          LayerMatchStrategy strategy = LayerMatchStrategy::SABottom);

/// Applies a prebuilt map; throws on any shape mismatch, naming both sides.
void apply_weight_map(const WeightMap& map, const UNetModel& teacher, UNetModel& student);

}  // namespace distillforge
