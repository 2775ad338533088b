#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "distillforge/analysis.hpp"
#include "distillforge/distill.hpp"
#include "distillforge/gradcheck.hpp"
#include "distillforge/ops.hpp"

using namespace distillforge;
namespace op = distillforge::ops;

namespace {

UNetConfig micro_config() {
    UNetConfig cfg;
    cfg.in_channels = 3;
    cfg.out_channels = 3;
    cfg.base_channels = 4;
    cfg.channel_mults = {1, 2, 4};
    cfg.tx_depths = {0, 1, 2};
    cfg.tx_pairs_encoder = 2;
    cfg.tx_pairs_decoder = 3;
    cfg.mid_enabled = true;
    cfg.mid_tx_depth = 2;
    cfg.head_dim = 4;
    cfg.context_dim = 8;
    cfg.time_embed_dim = 16;
    return cfg;
}

CompressionSpec micro_spec() {
    CompressionSpec spec;
    spec.remove_encoder_last_pair = true;
    spec.remove_decoder_intermediate_pair = true;
    spec.target_tx_depths = {0, 1, 1};
    return spec;
}

double mse_oracle(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (long i = 0; i < a.numel(); ++i) {
        double d = a.get(i) - b.get(i);
        acc += d * d;
    }
    return acc / static_cast<double>(a.numel());
}

double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-12});
}

}  // namespace

TEST_CASE("losses match brute-force scalar oracles over 100 random trials") {
    Rng rng(2718);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<long> shape = {1 + static_cast<long>(rng.uniform_index(3)),
                                   1 + static_cast<long>(rng.uniform_index(5)),
                                   1 + static_cast<long>(rng.uniform_index(4))};
        Tensor a(shape, Dtype::F32), b(shape, Dtype::F32);
        rng.fill_normal(a);
        rng.fill_normal(b);
        auto na = make_leaf(a), nb = make_leaf(b);

        CHECK(rel_err(task_loss(na, nb)->value.get(0), mse_oracle(a, b)) < 1e-6);
        CHECK(rel_err(out_kd_loss(nb, na)->value.get(0), mse_oracle(a, b)) < 1e-6);

        // Three-pair feature loss with one overridden weight.
        MatchPlan plan;
        std::vector<TapRecord> teacher_recs, student_recs;
        double expect = 0.0;
        LossWeights weights;
        weights.per_pair_overrides[1] = 0.25;
        for (int p = 0; p < 3; ++p) {
            FeatureTapSpec spec{StageId::MID, p + 1, TapKind::SA, false};
            plan.pairs.push_back({spec, spec});
            Tensor ft(shape, Dtype::F32), fs(shape, Dtype::F32);
            rng.fill_normal(ft);
            rng.fill_normal(fs);
            teacher_recs.push_back({spec, make_leaf(ft), std::nullopt});
            student_recs.push_back({spec, make_leaf(fs), std::nullopt});
            expect += weights.pair_weight(static_cast<std::size_t>(p)) * mse_oracle(ft, fs);
        }
        double got = feat_kd_loss(teacher_recs, student_recs, plan, weights)->value.get(0);
        CHECK(rel_err(got, expect) < 1e-6);
    }
}

TEST_CASE("loss conventions on fixed points") {
    Tensor ones = Tensor::full({2, 5}, 1.0);
    Tensor zeros({2, 5}, Dtype::F32);
    CHECK(task_loss(make_leaf(ones), make_leaf(ones))->value.get(0) == 0.0);
    CHECK(task_loss(make_leaf(zeros), make_leaf(ones))->value.get(0) == doctest::Approx(1.0));

    // One pair differing by a constant c gives c^2 under the mean convention.
    FeatureTapSpec spec{StageId::UP1, 1, TapKind::SA, false};
    MatchPlan plan;
    plan.pairs.push_back({spec, spec});
    const double c = 0.75;
    std::vector<TapRecord> tr = {{spec, make_leaf(Tensor::full({3, 4}, 0.5)), std::nullopt}};
    std::vector<TapRecord> sr = {{spec, make_leaf(Tensor::full({3, 4}, 0.5 + c)), std::nullopt}};
    CHECK(feat_kd_loss(tr, sr, plan, LossWeights{})->value.get(0) ==
          doctest::Approx(c * c).epsilon(1e-6));

    // PairSum multiplies the mean by the element count.
    CHECK(feat_kd_loss(tr, sr, plan, LossWeights{}, FeatKdReduction::PairSum)->value.get(0) ==
          doctest::Approx(12.0 * c * c).epsilon(1e-6));
}

TEST_CASE("feat_kd_loss reports the missing pair") {
    FeatureTapSpec spec{StageId::MID, 2, TapKind::SA, false};
    MatchPlan plan;
    plan.pairs.push_back({spec, spec});
    std::vector<TapRecord> have = {{spec, make_leaf(Tensor::zeros({2, 2})), std::nullopt}};
    std::vector<TapRecord> empty;
    CHECK_THROWS_WITH_AS(feat_kd_loss(empty, have, plan, LossWeights{}),
                         doctest::Contains("(MID, 2, SA)"), std::invalid_argument);
    CHECK_THROWS_AS(feat_kd_loss(have, empty, plan, LossWeights{}), std::invalid_argument);
}

TEST_CASE("out_kd_loss rejects an undetached teacher branch") {
    auto p = make_param("w", Tensor::full({2, 2}, 1.0), true);
    auto pred = op::scale(p, 2.0);
    CHECK_THROWS_AS(out_kd_loss(pred, pred), std::invalid_argument);
}

TEST_CASE("identity-compressed student starts with zero distillation losses") {
    auto cfg = micro_config();
    auto teacher = build_model(cfg, 7);
    auto student = build_model(cfg, 8);
    inherit_model_weights(teacher, student);
    freeze_model(teacher);

    auto plan = plan_feature_match(cfg, cfg, "koala-default");
    auto data = gen_dataset(8, 16, 16, 3);
    auto schedule = make_schedule(50, 1e-3, 0.03);
    AdamW opt(student.unet.params.trainable_params(), {});
    Rng rng(99);
    DistillOptions opts;

    Batch batch = make_batch(data, {0, 1});
    auto metrics = distill_step(teacher, student, batch, schedule, plan, opts, opt, rng);
    CHECK(metrics.l_out == 0.0);
    CHECK(metrics.l_feat == 0.0);
    CHECK(metrics.l_task > 0.0);
}

TEST_CASE("teacher parameters never move during distillation") {
    auto tcfg = micro_config();
    auto scfg = compress_config(tcfg, micro_spec());
    auto teacher = build_model(tcfg, 70);
    auto student = build_model(scfg, 71);
    inherit_model_weights(teacher, student);
    freeze_model(teacher);

    std::vector<Tensor> snapshot;
    for (const auto& p : teacher.unet.params.all()) snapshot.push_back(p->value);

    auto plan = plan_feature_match(tcfg, scfg, "koala-default");
    auto data = gen_dataset(8, 16, 16, 5);
    auto schedule = make_schedule(50, 1e-3, 0.03);
    AdamW opt(student.unet.params.trainable_params(), {});
    Rng rng(123);
    DistillOptions opts;
    for (int i = 0; i < 3; ++i) {
        Batch batch = make_batch(data, draw_batch_indices(rng, 8, 2));
        distill_step(teacher, student, batch, schedule, plan, opts, opt, rng);
    }
    const auto& params = teacher.unet.params.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(params[i]->value.bit_equal(snapshot[i]));
        CHECK_FALSE(params[i]->has_grad());
    }
}

TEST_CASE("reported components recombine into the total exactly") {
    auto tcfg = micro_config();
    auto scfg = compress_config(tcfg, micro_spec());
    auto teacher = build_model(tcfg, 80);
    auto student = build_model(scfg, 81);
    inherit_model_weights(teacher, student);
    freeze_model(teacher);

    auto plan = plan_feature_match(tcfg, scfg, "koala-default");
    auto data = gen_dataset(8, 16, 16, 6);
    auto schedule = make_schedule(50, 1e-3, 0.03);
    AdamW opt(student.unet.params.trainable_params(), {});
    Rng rng(321);
    DistillOptions opts;
    opts.weights.w_task = 0.7;
    opts.weights.w_out = 1.3;
    opts.weights.w_feat = 2.2;

    Batch batch = make_batch(data, {2, 5});
    auto m = distill_step(teacher, student, batch, schedule, plan, opts, opt, rng);

    // volatile blocks fused-multiply-add contraction, matching the op-by-op
    // float arithmetic of the loss graph.
    volatile float t = static_cast<float>(opts.weights.w_task) * static_cast<float>(m.l_task);
    volatile float o = static_cast<float>(opts.weights.w_out) * static_cast<float>(m.l_out);
    volatile float f = static_cast<float>(opts.weights.w_feat) * static_cast<float>(m.l_feat);
    volatile float to = t + o;
    float total = to + f;
    CHECK(static_cast<double>(total) == m.total);
}

TEST_CASE("weights (1,0,0) reduce to plain denoising training") {
    auto cfg = micro_config();
    auto teacher = build_model(cfg, 70);
    auto student = build_model(cfg, 71);
    inherit_model_weights(teacher, student);
    freeze_model(teacher);

    auto plan = plan_feature_match(cfg, cfg, "koala-default");
    auto data = gen_dataset(8, 16, 16, 5);
    auto schedule = make_schedule(50, 1e-3, 0.03);
    AdamW opt(student.unet.params.trainable_params(), {});
    Rng rng(5);
    DistillOptions opts;
    opts.weights.w_out = 0.0;
    opts.weights.w_feat = 0.0;
    Batch batch = make_batch(data, {0, 3});
    auto m = distill_step(teacher, student, batch, schedule, plan, opts, opt, rng);
    // Components are still reported even though they carry no weight.
    CHECK(m.total == doctest::Approx(m.l_task).epsilon(1e-7));
    CHECK(m.l_out >= 0.0);
    CHECK(m.l_feat >= 0.0);
}

TEST_CASE("task-only training equals distillation with weights (1,0,0) bit for bit") {
    auto tcfg = micro_config();
    auto scfg = compress_config(tcfg, micro_spec());
    auto teacher = build_model(tcfg, 60);
    freeze_model(teacher);

    auto a = build_model(scfg, 61);
    auto b = build_model(scfg, 61);
    inherit_model_weights(teacher, a);
    inherit_model_weights(teacher, b);

    auto plan = plan_feature_match(tcfg, scfg, "koala-default");
    auto data = gen_dataset(8, 16, 16, 5);
    auto schedule = make_schedule(50, 1e-3, 0.03);

    AdamW opt_a(a.unet.params.trainable_params(), {});
    AdamW opt_b(b.unet.params.trainable_params(), {});
    Rng rng_a(9, 0x7e57u), rng_b(9, 0x7e57u);
    DistillOptions opts;
    opts.weights.w_out = 0.0;
    opts.weights.w_feat = 0.0;

    for (int i = 0; i < 3; ++i) {
        Batch batch_a = make_batch(data, draw_batch_indices(rng_a, 8, 2));
        train_step(a, batch_a, schedule, opt_a, rng_a);
        Batch batch_b = make_batch(data, draw_batch_indices(rng_b, 8, 2));
        distill_step(teacher, b, batch_b, schedule, plan, opts, opt_b, rng_b);
    }
    for (std::size_t i = 0; i < a.unet.params.all().size(); ++i) {
        INFO(a.unet.params.all()[i]->name);
        CHECK(a.unet.params.all()[i]->value.bit_equal(b.unet.params.all()[i]->value));
    }
}

TEST_CASE("composite loss passes a float64 gradient check") {
    auto tcfg = micro_config();
    auto scfg = compress_config(tcfg, micro_spec());
    auto teacher = build_model(tcfg, 90, Dtype::F64);
    auto student = build_model(scfg, 91, Dtype::F64);
    inherit_model_weights(teacher, student);
    freeze_model(teacher);

    auto plan = plan_feature_match(tcfg, scfg, "koala-default");
    REQUIRE(plan.pairs.size() >= 3);

    auto data = gen_dataset(4, 16, 16, 17);
    Batch batch = make_batch(data, {0, 1});
    auto schedule = make_schedule(50, 1e-3, 0.03);

    // Fixed noising, drawn once; the loss closure is deterministic.
    Rng rng(2025);
    std::vector<long> t = {static_cast<long>(rng.uniform_index(50)),
                           static_cast<long>(rng.uniform_index(50))};
    Tensor eps({2, 3, 16, 16}, Dtype::F64);
    rng.fill_normal(eps);
    Tensor x0 = batch.x0.cast(Dtype::F64);
    Tensor zt = q_sample(x0, t, eps, schedule);

    std::vector<FeatureTapSpec> teacher_taps, student_taps;
    for (const auto& p : plan.pairs) {
        teacher_taps.push_back(p.teacher);
        student_taps.push_back(p.student);
    }

    auto build_loss = [&]() -> NodePtr {
        auto z = make_leaf(zt);
        auto eps_true = make_leaf(eps);
        auto tctx = embed_captions(teacher.text_table, batch.captions);
        auto tout = unet_forward(teacher.unet, z, t, tctx, teacher_taps);
        auto sctx = embed_captions(student.text_table, batch.captions);
        auto sout = unet_forward(student.unet, z, t, sctx, student_taps);
        auto lt = task_loss(sout.eps_pred, eps_true);
        auto lo = out_kd_loss(tout.eps_pred, sout.eps_pred);
        auto lf = feat_kd_loss(tout.records, sout.records, plan, LossWeights{});
        return op::add(op::add(lt, lo), lf);
    };

    std::vector<NodePtr> checked = {
        student.unet.params.get("conv_in.bias"),
        student.unet.params.get("time_mlp.fc1.bias"),
        student.unet.params.get("dw2.p1.tx.l1.ln1.weight"),
        student.unet.params.get("mid.tx.l1.sa.q.weight"),
        student.unet.params.get("mid.res1.temb.bias"),
        student.unet.params.get("up1.p2.res.conv2.bias"),
        student.unet.params.get("up2.p1.tx.l1.ff.w2.bias"),
        student.unet.params.get("out.norm.weight"),
        student.unet.params.get("text.table"),
    };
    auto report = grad_check(build_loss, checked, 1e-5, 1e-4);
    for (const auto& e : report.entries) {
        INFO(e.name, " rel_err=", e.max_rel_err, " analytic=", e.analytic, " numeric=", e.numeric);
        CHECK(e.max_rel_err < 1e-4);
    }
}

TEST_CASE("task-only training makes progress on the shapes data") {
    UNetConfig cfg = micro_config();
    auto model = build_model(cfg, 100);
    auto data = gen_dataset(64, 16, 16, 12);
    auto schedule = make_schedule(50, 1e-3, 0.03);
    AdamWConfig ocfg;
    ocfg.lr = 2e-3;
    AdamW opt(model.unet.params.trainable_params(), ocfg);
    Rng rng(55);

    double head = 0.0, tail = 0.0;
    const int steps = 500;
    for (int i = 0; i < steps; ++i) {
        Batch batch = make_batch(data, draw_batch_indices(rng, 64, 4));
        auto m = train_step(model, batch, schedule, opt, rng);
        if (i < 10) head += m.total;
        if (i >= steps - 10) tail += m.total;
    }
    CHECK(tail / 10.0 < head / 10.0);
}

TEST_CASE("zero steps leave the model untouched; training is seed-deterministic") {
    UNetConfig cfg = micro_config();
    auto a = build_model(cfg, 3);
    auto b = build_model(cfg, 3);
    for (std::size_t i = 0; i < a.unet.params.all().size(); ++i)
        CHECK(a.unet.params.all()[i]->value.bit_equal(b.unet.params.all()[i]->value));

    auto data = gen_dataset(16, 16, 16, 2);
    auto schedule = make_schedule(50, 1e-3, 0.03);
    auto run = [&](Model& m) {
        AdamW opt(m.unet.params.trainable_params(), {});
        Rng rng(44);
        for (int i = 0; i < 5; ++i) {
            Batch batch = make_batch(data, draw_batch_indices(rng, 16, 2));
            train_step(m, batch, schedule, opt, rng);
        }
    };
    run(a);
    run(b);
    for (std::size_t i = 0; i < a.unet.params.all().size(); ++i)
        CHECK(a.unet.params.all()[i]->value.bit_equal(b.unet.params.all()[i]->value));
}

TEST_CASE("heldout mse evaluation is paired and deterministic") {
    UNetConfig cfg = micro_config();
    auto model = build_model(cfg, 5);
    auto heldout = gen_dataset(12, 16, 16, 77);
    auto schedule = make_schedule(50, 1e-3, 0.03);
    double a = heldout_eps_mse(model, heldout, schedule, 11);
    double b = heldout_eps_mse(model, heldout, schedule, 11);
    CHECK(a == b);
    double c = heldout_eps_mse(model, heldout, schedule, 12);
    CHECK(a != c);
}
