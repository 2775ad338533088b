#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "distillforge/compress.hpp"
#include "distillforge/ops.hpp"
#include "distillforge/rng.hpp"

using namespace distillforge;

namespace {

UNetConfig sdxl_like() {
    UNetConfig cfg;
    cfg.in_channels = 4;
    cfg.out_channels = 4;
    cfg.base_channels = 320;
    cfg.channel_mults = {1, 2, 4};
    cfg.tx_depths = {0, 2, 10};
    cfg.tx_pairs_encoder = 2;
    cfg.tx_pairs_decoder = 3;
    cfg.mid_enabled = true;
    cfg.mid_tx_depth = 10;
    cfg.head_dim = 64;
    cfg.context_dim = 2048;
    cfg.time_embed_dim = 1280;
    return cfg;
}

UNetConfig toy_teacher() {
    UNetConfig cfg;
    cfg.in_channels = 3;
    cfg.out_channels = 3;
    cfg.base_channels = 8;
    cfg.channel_mults = {1, 2, 4};
    cfg.tx_depths = {0, 1, 2};
    cfg.tx_pairs_encoder = 2;
    cfg.tx_pairs_decoder = 3;
    cfg.mid_enabled = true;
    cfg.mid_tx_depth = 2;
    cfg.head_dim = 8;
    cfg.context_dim = 16;
    cfg.time_embed_dim = 32;
    return cfg;
}

CompressionSpec toy_spec() {
    CompressionSpec spec;
    spec.remove_encoder_last_pair = true;
    spec.remove_decoder_intermediate_pair = true;
    spec.target_tx_depths = {0, 1, 1};
    spec.remove_mid = false;
    return spec;
}

}  // namespace

TEST_CASE("compress_config reproduces the published depth vectors") {
    auto sdxl = sdxl_like();

    CompressionSpec to_1b;
    to_1b.remove_encoder_last_pair = true;
    to_1b.remove_decoder_intermediate_pair = true;
    to_1b.target_tx_depths = {0, 2, 6};
    to_1b.remove_mid = false;
    auto k1b = compress_config(sdxl, to_1b);
    CHECK(k1b.tx_depths == std::vector<long>{0, 2, 6});
    CHECK(k1b.tx_pairs_encoder == 1);
    CHECK(k1b.tx_pairs_decoder == 2);
    CHECK(k1b.mid_enabled);
    CHECK(k1b.mid_tx_depth == 6);

    CompressionSpec to_700m = to_1b;
    to_700m.target_tx_depths = {0, 2, 5};
    to_700m.remove_mid = true;
    auto k700 = compress_config(sdxl, to_700m);
    CHECK(k700.tx_depths == std::vector<long>{0, 2, 5});
    CHECK_FALSE(k700.mid_enabled);
    CHECK(k700.mid_tx_depth == 0);

    CHECK(count_params(k1b).total < count_params(sdxl).total);
    CHECK(count_params(k700).total < count_params(k1b).total);
}

TEST_CASE("identity spec returns the teacher config, idempotently") {
    auto teacher = sdxl_like();
    CompressionSpec ident;
    ident.target_tx_depths = teacher.tx_depths;
    auto once = compress_config(teacher, ident);
    CHECK(once == teacher);
    auto twice = compress_config(once, ident);
    CHECK(twice == teacher);
}

TEST_CASE("compress_config rejects bad targets") {
    auto teacher = sdxl_like();
    CompressionSpec spec;
    spec.target_tx_depths = {0, 2, 12};
    CHECK_THROWS_WITH_AS(compress_config(teacher, spec), doctest::Contains("exceeds"),
                         std::invalid_argument);
    spec.target_tx_depths = {0, 0, 6};
    CHECK_THROWS_AS(compress_config(teacher, spec), std::invalid_argument);
    spec.target_tx_depths = {0, 2, 6};
    spec.remove_encoder_last_pair = true;
    spec.remove_decoder_intermediate_pair = false;
    CHECK_THROWS_AS(compress_config(teacher, spec), std::invalid_argument);
}

TEST_CASE("plan_layer_match golden cases") {
    CHECK(plan_layer_match(10, 6, LayerMatchStrategy::SAInterleave) ==
          std::vector<int>{1, 3, 5, 7, 9, 10});
    CHECK(plan_layer_match(10, 5, LayerMatchStrategy::SAUp) == std::vector<int>{6, 7, 8, 9, 10});
    CHECK(plan_layer_match(10, 6, LayerMatchStrategy::SABottom) ==
          std::vector<int>{1, 2, 3, 4, 5, 6});
    for (auto strat : {LayerMatchStrategy::SABottom, LayerMatchStrategy::SAInterleave,
                       LayerMatchStrategy::SAUp})
        CHECK(plan_layer_match(7, 7, strat) == std::vector<int>{1, 2, 3, 4, 5, 6, 7});
    CHECK_THROWS_AS(plan_layer_match(4, 5, LayerMatchStrategy::SABottom), std::invalid_argument);
}

TEST_CASE("plan_layer_match invariants hold exhaustively up to depth 32") {
    for (int dt = 1; dt <= 32; ++dt) {
        for (int ds = 1; ds <= dt; ++ds) {
            for (auto strat : {LayerMatchStrategy::SABottom, LayerMatchStrategy::SAInterleave,
                               LayerMatchStrategy::SAUp}) {
                auto m = plan_layer_match(dt, ds, strat);
                REQUIRE(static_cast<int>(m.size()) == ds);
                for (std::size_t i = 0; i < m.size(); ++i) {
                    REQUIRE(m[i] >= 1);
                    REQUIRE(m[i] <= dt);
                    if (i) REQUIRE(m[i] > m[i - 1]);
                }
            }
            // Bottom and up are set-reverses of each other under i -> dt+1-i.
            auto bottom = plan_layer_match(dt, ds, LayerMatchStrategy::SABottom);
            auto up = plan_layer_match(dt, ds, LayerMatchStrategy::SAUp);
            std::set<int> reflected;
            for (int i : bottom) reflected.insert(dt + 1 - i);
            CHECK(std::set<int>(up.begin(), up.end()) == reflected);
        }
    }
}

TEST_CASE("koala-default plan maps MID layers bottom-first and adds corner LF") {
    auto teacher = sdxl_like();
    CompressionSpec to_1b;
    to_1b.remove_encoder_last_pair = true;
    to_1b.remove_decoder_intermediate_pair = true;
    to_1b.target_tx_depths = {0, 2, 6};
    auto student = compress_config(teacher, to_1b);

    auto plan = plan_feature_match(teacher, student, "koala-default");
    int mid_pairs = 0;
    bool lf_dw1 = false, lf_up3 = false;
    for (const auto& p : plan.pairs) {
        CHECK(p.student.kind == p.teacher.kind);
        CHECK(p.student.stage == p.teacher.stage);
        if (p.student.stage == StageId::MID && p.student.kind == TapKind::SA) {
            ++mid_pairs;
            CHECK(p.teacher.block_index == p.student.block_index);  // SA-bottom, one stack
            CHECK(p.student.block_index <= 6);
        }
        if (p.student.kind == TapKind::LF && p.student.stage == StageId::DW1) lf_dw1 = true;
        if (p.student.kind == TapKind::LF && p.student.stage == StageId::UP3) lf_up3 = true;
    }
    CHECK(mid_pairs == 6);
    CHECK(lf_dw1);
    CHECK(lf_up3);
}

TEST_CASE("lf-only emits exactly one LF pair per stage") {
    auto teacher = toy_teacher();
    auto student = compress_config(teacher, toy_spec());
    auto plan = plan_feature_match(teacher, student, "lf-only");
    CHECK(plan.pairs.size() == 7);
    for (const auto& p : plan.pairs) {
        CHECK(p.student.kind == TapKind::LF);
        CHECK(p.student.block_index == 0);
        CHECK(p.teacher.block_index == 0);
    }
}

TEST_CASE("sa-only on an uncompressed student matches taps one to one") {
    auto teacher = toy_teacher();
    auto plan = plan_feature_match(teacher, teacher, "sa-only");
    CHECK(!plan.pairs.empty());
    for (const auto& p : plan.pairs) {
        CHECK(p.student == p.teacher);
        CHECK(p.student.kind == TapKind::SA);
    }
}

TEST_CASE("single-stage recipes work and reject SA-free stages") {
    auto teacher = toy_teacher();
    auto student = compress_config(teacher, toy_spec());
    auto plan = plan_feature_match(teacher, student, "stage:UP-1");
    CHECK(!plan.pairs.empty());
    for (const auto& p : plan.pairs) CHECK(p.student.stage == StageId::UP1);

    CHECK_THROWS_WITH_AS(plan_feature_match(teacher, student, "stage:DW-1"),
                         doctest::Contains("cannot be distilled"), std::invalid_argument);
    CHECK_THROWS_AS(plan_feature_match(teacher, student, "nonsense"), std::invalid_argument);
}

TEST_CASE("every plan pair resolves to live taps in both models") {
    auto teacher_cfg = toy_teacher();
    auto student_cfg = compress_config(teacher_cfg, toy_spec());
    auto teacher = build_unet(teacher_cfg, 5);
    auto student = build_unet(student_cfg, 6);
    Rng rng(7);
    Tensor x({1, 3, 16, 16}, Dtype::F32);
    rng.fill_normal(x);
    Tensor ctx_t({1, 4, teacher_cfg.context_dim}, Dtype::F32);
    rng.fill_normal(ctx_t);
    auto xin = make_leaf(x);
    auto ctx = make_leaf(ctx_t);

    for (const std::string recipe : {"koala-default", "sa-only", "lf-only", "sa+res-dw1up3",
                                     "sa+lf-all", "sa+res-all", "all-features"}) {
        auto plan = plan_feature_match(teacher_cfg, student_cfg, recipe);
        std::vector<FeatureTapSpec> steacher, sstudent;
        for (const auto& p : plan.pairs) {
            steacher.push_back(p.teacher);
            sstudent.push_back(p.student);
        }
        auto tout = unet_forward(teacher, xin, {0}, ctx, steacher);
        auto sout = unet_forward(student, xin, {0}, ctx, sstudent);
        REQUIRE(tout.records.size() == plan.pairs.size());
        REQUIRE(sout.records.size() == plan.pairs.size());
        for (std::size_t i = 0; i < plan.pairs.size(); ++i) {
            INFO(recipe, " pair ", i);
            CHECK(tout.records[i].tensor().shape() == sout.records[i].tensor().shape());
        }
    }
}

TEST_CASE("match plan json round trip") {
    auto teacher = toy_teacher();
    auto student = compress_config(teacher, toy_spec());
    auto plan = plan_feature_match(teacher, student, "koala-default");
    auto text = match_plan_to_json(plan);
    auto back = match_plan_from_json(text);
    CHECK(back.name == plan.name);
    REQUIRE(back.pairs.size() == plan.pairs.size());
    for (std::size_t i = 0; i < plan.pairs.size(); ++i) {
        CHECK(back.pairs[i].student == plan.pairs[i].student);
        CHECK(back.pairs[i].teacher == plan.pairs[i].teacher);
    }
}

TEST_CASE("identity inheritance copies everything and reproduces the teacher") {
    auto cfg = toy_teacher();
    auto teacher = build_unet(cfg, 11);
    auto student = build_unet(cfg, 22);

    auto wm = inherit_weights(teacher, student);
    CHECK(wm.unmatched_student.empty());
    CHECK(wm.entries.size() == student.params.all().size());

    for (const auto& p : student.params.all())
        CHECK(p->value.bit_equal(teacher.params.get(p->name)->value));

    Rng rng(1);
    Tensor x({1, 3, 16, 16}, Dtype::F32);
    rng.fill_normal(x);
    Tensor c({1, 4, cfg.context_dim}, Dtype::F32);
    rng.fill_normal(c);
    auto xin = make_leaf(x);
    auto ctx = make_leaf(c);
    auto a = unet_forward(teacher, xin, {3}, ctx);
    auto b = unet_forward(student, xin, {3}, ctx);
    CHECK(a.eps_pred->value.bit_equal(b.eps_pred->value));
}

TEST_CASE("compressed inheritance follows the layer match strategy") {
    auto tcfg = toy_teacher();
    auto scfg = compress_config(tcfg, toy_spec());  // mid depth 2 -> 1
    auto teacher = build_unet(tcfg, 31);

    auto bottom = build_unet(scfg, 32);
    inherit_weights(teacher, bottom, LayerMatchStrategy::SABottom);
    CHECK(bottom.params.get("mid.tx.l1.sa.q.weight")
              ->value.bit_equal(teacher.params.get("mid.tx.l1.sa.q.weight")->value));

    auto up = build_unet(scfg, 33);
    inherit_weights(teacher, up, LayerMatchStrategy::SAUp);
    CHECK(up.params.get("mid.tx.l1.sa.q.weight")
              ->value.bit_equal(teacher.params.get("mid.tx.l2.sa.q.weight")->value));

    // Decoder keeps pairs 1 and 3 of a 3-pair teacher stage.
    CHECK(bottom.params.get("up2.p2.res.conv1.weight")
              ->value.bit_equal(teacher.params.get("up2.p3.res.conv1.weight")->value));
    CHECK(bottom.params.get("dw2.p1.res.conv1.weight")
              ->value.bit_equal(teacher.params.get("dw2.p1.res.conv1.weight")->value));
}

TEST_CASE("removing the mid block leaves no mid entries") {
    auto tcfg = toy_teacher();
    CompressionSpec spec = toy_spec();
    spec.remove_mid = true;
    auto scfg = compress_config(tcfg, spec);
    auto teacher = build_unet(tcfg, 41);
    auto student = build_unet(scfg, 42);
    auto wm = inherit_weights(teacher, student);
    for (const auto& [sname, tname] : wm.entries) {
        CHECK(sname.find("mid") == std::string::npos);
        CHECK(tname.find("mid") == std::string::npos);
    }
    CHECK(wm.unmatched_student.empty());
}

TEST_CASE("apply_weight_map rejects shape mismatches naming both parameters") {
    auto tcfg = toy_teacher();
    auto teacher = build_unet(tcfg, 51);
    auto student = build_unet(tcfg, 52);
    WeightMap bogus;
    bogus.entries.emplace_back("conv_in.weight", "out.conv.weight");
    CHECK_THROWS_WITH_AS(apply_weight_map(bogus, teacher, student),
                         doctest::Contains("conv_in.weight"), std::invalid_argument);
}

TEST_CASE("compression spec json round trip rejects unknown keys") {
    auto spec = toy_spec();
    auto text = compression_spec_to_json(spec);
    auto back = compression_spec_from_json(text);
    CHECK(back.remove_encoder_last_pair == spec.remove_encoder_last_pair);
    CHECK(back.target_tx_depths == spec.target_tx_depths);
    CHECK_THROWS_AS(compression_spec_from_json(R"({"remove_mid":true,"oops":1})"),
                    std::invalid_argument);
}
