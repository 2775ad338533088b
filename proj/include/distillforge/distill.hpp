#pragma once

#include <map>
#include <string>
#include <vector>

#include "distillforge/compress.hpp"
#include "distillforge/data.hpp"
#include "distillforge/diffusion.hpp"
#include "distillforge/optimizer.hpp"
#include "distillforge/unet.hpp"

namespace distillforge {

struct LossWeights {
    double w_task = 1.0;
    double w_out = 1.0;
    double w_feat = 1.0;
    std::map<std::size_t, double> per_pair_overrides;  // plan pair index -> weight

    double pair_weight(std::size_t i) const {
        auto it = per_pair_overrides.find(i);
        return it == per_pair_overrides.end() ? 1.0 : it->second;
    }
};

/// How the feature loss reduces each pair: mean-squared per pair (default)
/// or summed squares per pair (the sum-inside-the-norm reading).
enum class FeatKdReduction { PairMean, PairSum };

NodePtr task_loss(const NodePtr& eps_pred, const NodePtr& eps_true);
NodePtr out_kd_loss(const NodePtr& eps_teacher, const NodePtr& eps_student);
NodePtr feat_kd_loss(const std::vector<TapRecord>& records_teacher,
                     const std::vector<TapRecord>& records_student, const MatchPlan& plan,
                     const LossWeights& weights,
                     FeatKdReduction reduction = FeatKdReduction::PairMean);

/// Full trainable bundle: the U-Net plus the toy text embedder, sharing one
/// parameter store (and so one checkpoint).
struct Model {
    UNetModel unet;
    NodePtr text_table;
    long context_len = kCaptionLen;
};

Model build_model(const UNetConfig& cfg, std::uint64_t seed, Dtype dtype = Dtype::F32);
void freeze_model(Model& m);
/// Teacher-to-student init: U-Net weights via the structural map, text
/// embedder copied verbatim (its shape never changes under compression).
WeightMap inherit_model_weights(const Model& teacher, Model& student,
                                LayerMatchStrategy strategy = LayerMatchStrategy::SABottom);

struct Batch {
    Tensor x0;  // [B,3,H,W]
    std::vector<std::vector<long>> captions;
};

Batch make_batch(const std::vector<ShapeSample>& dataset, const std::vector<long>& indices);

struct StepMetrics {
    double l_task = 0, l_out = 0, l_feat = 0, total = 0;
};

struct TrainState {
    long step = 0;
    std::uint64_t rng_state = 0, rng_inc = 0;
    double avg_task = 0, avg_out = 0, avg_feat = 0, avg_total = 0;

    void observe(const StepMetrics& m);
};

struct DistillOptions {
    LossWeights weights;
    double cfg_drop_prob = 0.1;
    FeatKdReduction reduction = FeatKdReduction::PairMean;
};

/// One distillation update: noise the batch once, run the frozen teacher and
/// the student on it with the plan's taps, combine the three losses, and
/// apply one optimizer step to the student (U-Net and text embedder).
StepMetrics distill_step(const Model& teacher, Model& student, const Batch& batch,
                         const DiffusionSchedule& schedule, const MatchPlan& plan,
                         const DistillOptions& opts, AdamW& opt, Rng& rng);

/// One plain denoising update (task loss only); used to train teachers and
/// task-only baselines.
StepMetrics train_step(Model& model, const Batch& batch, const DiffusionSchedule& schedule,
                       AdamW& opt, Rng& rng, double cfg_drop_prob = 0.1);

/// Draws batch indices for a step (uniform with replacement, one stream).
std::vector<long> draw_batch_indices(Rng& rng, long dataset_size, long batch_size);

/// Held-out denoising MSE with fixed per-sample (t, eps) draws derived from
/// eval_seed; a paired, low-variance comparison metric.
double heldout_eps_mse(const Model& model, const std::vector<ShapeSample>& heldout,
                       const DiffusionSchedule& schedule, std::uint64_t eval_seed,
                       long batch_size = 16);

}  // namespace distillforge
