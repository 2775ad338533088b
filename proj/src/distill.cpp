#include "distillforge/distill.hpp"

#include <cmath>
#include <stdexcept>

#include "distillforge/ops.hpp"

namespace distillforge {

NodePtr task_loss(const NodePtr& eps_pred, const NodePtr& eps_true) {
    return ops::mse(eps_pred, eps_true);
}

NodePtr out_kd_loss(const NodePtr& eps_teacher, const NodePtr& eps_student) {
    if (eps_teacher->requires_grad)
        throw std::invalid_argument("out_kd_loss: teacher prediction must be detached");
    return ops::mse(eps_student, eps_teacher);
}

namespace {

const TapRecord* find_record(const std::vector<TapRecord>& records, const FeatureTapSpec& spec) {
    for (const auto& r : records)
        if (r.spec == spec) return &r;
    return nullptr;
}

}  // namespace

NodePtr feat_kd_loss(const std::vector<TapRecord>& records_teacher,
                     const std::vector<TapRecord>& records_student, const MatchPlan& plan,
                     const LossWeights& weights, FeatKdReduction reduction) {
    NodePtr total;
    for (std::size_t i = 0; i < plan.pairs.size(); ++i) {
        const auto& pair = plan.pairs[i];
        const TapRecord* tr = find_record(records_teacher, pair.teacher);
        if (!tr)
            throw std::invalid_argument("feat_kd_loss: missing teacher record for pair " +
                                        pair.teacher.to_string());
        const TapRecord* sr = find_record(records_student, pair.student);
        if (!sr)
            throw std::invalid_argument("feat_kd_loss: missing student record for pair " +
                                        pair.student.to_string());
        if (tr->value->requires_grad)
            throw std::invalid_argument("feat_kd_loss: teacher record must be detached for pair " +
                                        pair.teacher.to_string());
        NodePtr term = reduction == FeatKdReduction::PairMean
                           ? ops::mse(sr->value, tr->value)
                           : ops::mse_sum(sr->value, tr->value);
        double w = weights.pair_weight(i);
        if (w != 1.0) term = ops::scale(term, w);
        total = total ? ops::add(total, term) : term;
    }
    if (!total) {
        // Empty plans contribute a constant zero.
        Dtype dt = records_student.empty() ? Dtype::F32 : records_student.front().value->dtype();
        total = make_leaf(Tensor::zeros({1}, dt));
    }
    return total;
}

Model build_model(const UNetConfig& cfg, std::uint64_t seed, Dtype dtype) {
    Model m;
    m.unet = build_unet(cfg, seed, dtype);
    m.text_table = add_text_embedder(m.unet.params, cfg.context_dim, seed, dtype);
    m.context_len = kCaptionLen;
    return m;
}

void freeze_model(Model& m) { freeze(m.unet.params); }

WeightMap inherit_model_weights(const Model& teacher, Model& student,
                                LayerMatchStrategy strategy) {
    // inherit_weights walks the student store, which includes text.table;
    // its name maps to itself and the shapes agree, so it copies over too.
    return inherit_weights(teacher.unet, student.unet, strategy);
}

Batch make_batch(const std::vector<ShapeSample>& dataset, const std::vector<long>& indices) {
    if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
    const Tensor& first = dataset.at(static_cast<std::size_t>(indices[0])).image;
    long c = first.dim(0), h = first.dim(1), w = first.dim(2);
    Batch batch;
    batch.x0 = Tensor({static_cast<long>(indices.size()), c, h, w}, first.dtype());
    long per = c * h * w;
    for (std::size_t bi = 0; bi < indices.size(); ++bi) {
        const auto& sample = dataset.at(static_cast<std::size_t>(indices[bi]));
        for (long i = 0; i < per; ++i)
            batch.x0.set(static_cast<long>(bi) * per + i, sample.image.get(i));
        batch.captions.push_back(sample.caption_tokens);
    }
    return batch;
}

void TrainState::observe(const StepMetrics& m) {
    ++step;
    const double n = static_cast<double>(step);
    avg_task += (m.l_task - avg_task) / n;
    avg_out += (m.l_out - avg_out) / n;
    avg_feat += (m.l_feat - avg_feat) / n;
    avg_total += (m.total - avg_total) / n;
}

std::vector<long> draw_batch_indices(Rng& rng, long dataset_size, long batch_size) {
    std::vector<long> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    for (long i = 0; i < batch_size; ++i)
        out.push_back(static_cast<long>(rng.uniform_index(static_cast<std::uint64_t>(dataset_size))));
    return out;
}

namespace {

struct NoisedBatch {
    NodePtr z_t;
    NodePtr eps_true;
    std::vector<long> t;
    std::vector<std::vector<long>> captions;
};

// Draw order is fixed: timesteps, then noise, then caption drops.
NoisedBatch noise_batch(const Batch& batch, const DiffusionSchedule& schedule, Rng& rng,
                        double cfg_drop_prob, Dtype dtype) {
    NoisedBatch nb;
    const long b = batch.x0.dim(0);
    for (long i = 0; i < b; ++i)
        nb.t.push_back(static_cast<long>(rng.uniform_index(static_cast<std::uint64_t>(schedule.T))));
    Tensor eps(batch.x0.shape(), dtype);
    rng.fill_normal(eps);
    Tensor x0 = batch.x0.dtype() == dtype ? batch.x0 : batch.x0.cast(dtype);
    Tensor zt = q_sample(x0, nb.t, eps, schedule);
    nb.z_t = make_leaf(std::move(zt));
    nb.eps_true = make_leaf(std::move(eps));
    nb.captions = batch.captions;
    for (auto& row : nb.captions)
        if (rng.uniform() < cfg_drop_prob) row = null_tokens();
    return nb;
}

StepMetrics finish_metrics(const NodePtr& lt, const NodePtr& lo, const NodePtr& lf,
                           const NodePtr& total) {
    StepMetrics m;
    m.l_task = lt->value.get(0);
    m.l_out = lo ? lo->value.get(0) : 0.0;
    m.l_feat = lf ? lf->value.get(0) : 0.0;
    m.total = total->value.get(0);
    if (!std::isfinite(m.total))
        throw std::runtime_error("non-finite loss: task=" + std::to_string(m.l_task) +
                                 " out=" + std::to_string(m.l_out) +
                                 " feat=" + std::to_string(m.l_feat));
    return m;
}

}  // namespace

StepMetrics distill_step(const Model& teacher, Model& student, const Batch& batch,
                         const DiffusionSchedule& schedule, const MatchPlan& plan,
                         const DistillOptions& opts, AdamW& opt, Rng& rng) {
    NoisedBatch nb = noise_batch(batch, schedule, rng, opts.cfg_drop_prob, student.unet.dtype);

    std::vector<FeatureTapSpec> teacher_taps, student_taps;
    for (const auto& p : plan.pairs) {
        teacher_taps.push_back(p.teacher);
        student_taps.push_back(p.student);
    }

    auto teacher_ctx = embed_captions(teacher.text_table, nb.captions);
    auto teacher_out = unet_forward(teacher.unet, nb.z_t, nb.t, teacher_ctx, teacher_taps);

    auto student_ctx = embed_captions(student.text_table, nb.captions);
    auto student_out = unet_forward(student.unet, nb.z_t, nb.t, student_ctx, student_taps);

    auto l_task = task_loss(student_out.eps_pred, nb.eps_true);
    auto l_out = out_kd_loss(teacher_out.eps_pred, student_out.eps_pred);
    auto l_feat = feat_kd_loss(teacher_out.records, student_out.records, plan, opts.weights,
                               opts.reduction);
    auto total = ops::add(ops::add(ops::scale(l_task, opts.weights.w_task),
                                   ops::scale(l_out, opts.weights.w_out)),
                          ops::scale(l_feat, opts.weights.w_feat));

    StepMetrics metrics = finish_metrics(l_task, l_out, l_feat, total);
    backward(total);
    opt.step();
    opt.zero_grad();
    return metrics;
}

StepMetrics train_step(Model& model, const Batch& batch, const DiffusionSchedule& schedule,
                       AdamW& opt, Rng& rng, double cfg_drop_prob) {
    NoisedBatch nb = noise_batch(batch, schedule, rng, cfg_drop_prob, model.unet.dtype);
    auto ctx = embed_captions(model.text_table, nb.captions);
    auto out = unet_forward(model.unet, nb.z_t, nb.t, ctx);
    auto l_task = task_loss(out.eps_pred, nb.eps_true);

    StepMetrics metrics;
    metrics.l_task = l_task->value.get(0);
    metrics.total = metrics.l_task;
    if (!std::isfinite(metrics.total))
        throw std::runtime_error("non-finite task loss: " + std::to_string(metrics.l_task));
    backward(l_task);
    opt.step();
    opt.zero_grad();
    return metrics;
}

double heldout_eps_mse(const Model& model, const std::vector<ShapeSample>& heldout,
                       const DiffusionSchedule& schedule, std::uint64_t eval_seed,
                       long batch_size) {
    if (heldout.empty()) throw std::invalid_argument("heldout_eps_mse: empty set");
    Rng rng(eval_seed, 0xe7a1u);
    double acc = 0.0;
    long count = 0;
    for (std::size_t start = 0; start < heldout.size();
         start += static_cast<std::size_t>(batch_size)) {
        std::vector<long> idx;
        for (std::size_t i = start; i < std::min(heldout.size(), start + static_cast<std::size_t>(
                                                                             batch_size));
             ++i)
            idx.push_back(static_cast<long>(i));
        Batch batch = make_batch(heldout, idx);
        NoisedBatch nb = noise_batch(batch, schedule, rng, /*cfg_drop_prob=*/0.0,
                                     model.unet.dtype);
        auto ctx = embed_captions(model.text_table, nb.captions);
        auto out = unet_forward(model.unet, nb.z_t, nb.t, ctx);
        auto l = ops::mse(out.eps_pred, nb.eps_true);
        acc += l->value.get(0) * static_cast<double>(idx.size());
        count += static_cast<long>(idx.size());
    }
    return acc / static_cast<double>(count);
}

}  // namespace distillforge
