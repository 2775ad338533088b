#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "distillforge/analysis.hpp"
#include "distillforge/distill.hpp"
#include "distillforge/io.hpp"

using namespace distillforge;
namespace fs = std::filesystem;

namespace {

UNetConfig tiny_config() {
    UNetConfig cfg;
    cfg.in_channels = 3;
    cfg.out_channels = 3;
    cfg.base_channels = 4;
    cfg.channel_mults = {1, 2, 4};
    cfg.tx_depths = {0, 1, 1};
    cfg.tx_pairs_encoder = 1;
    cfg.tx_pairs_decoder = 2;
    cfg.mid_enabled = true;
    cfg.mid_tx_depth = 1;
    cfg.head_dim = 4;
    cfg.context_dim = 8;
    cfg.time_embed_dim = 16;
    return cfg;
}

struct TempDir {
    fs::path path;
    TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("distillforge_test_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
    TempDir dir("ckpt");
    auto model = build_model(tiny_config(), 42);
    nlohmann::json echo;
    echo["unet"] = nlohmann::json::parse(unet_config_to_json(tiny_config()));
    save_checkpoint(dir.str(), model.unet.params, echo, 17);

    auto fresh = build_model(tiny_config(), 999);  // different seed, different bits
    bool differed = false;
    for (std::size_t i = 0; i < fresh.unet.params.all().size(); ++i)
        differed = differed ||
                   !fresh.unet.params.all()[i]->value.bit_equal(model.unet.params.all()[i]->value);
    REQUIRE(differed);

    auto info = load_checkpoint(dir.str(), fresh.unet.params);
    CHECK(info.step == 17);
    CHECK(info.config.at("unet").at("base_channels").get<long>() == 4);
    for (std::size_t i = 0; i < fresh.unet.params.all().size(); ++i)
        CHECK(fresh.unet.params.all()[i]->value.bit_equal(model.unet.params.all()[i]->value));
}

TEST_CASE("checkpoint loading rejects mismatched models") {
    TempDir dir("ckpt_mismatch");
    auto model = build_model(tiny_config(), 1);
    save_checkpoint(dir.str(), model.unet.params, nlohmann::json::object(), 0);

    UNetConfig other = tiny_config();
    other.base_channels = 8;
    other.head_dim = 8;
    auto wrong = build_model(other, 1);
    CHECK_THROWS_AS(load_checkpoint(dir.str(), wrong.unet.params), std::runtime_error);
}

TEST_CASE("train state round-trips bit-exactly") {
    TempDir dir("state");
    auto model = build_model(tiny_config(), 5);
    AdamW opt(model.unet.params.trainable_params(), {});
    auto data = gen_dataset(8, 16, 16, 4);
    auto schedule = make_schedule(20, 1e-3, 0.02);
    Rng rng(77);
    TrainState ts;
    for (int i = 0; i < 3; ++i) {
        Batch batch = make_batch(data, draw_batch_indices(rng, 8, 2));
        ts.observe(train_step(model, batch, schedule, opt, rng));
    }

    TrainStateBlob blob{ts.step, rng.state(), rng.inc(), ts.avg_task, ts.avg_out, ts.avg_feat,
                        ts.avg_total};
    save_train_state(dir.str(), blob, opt);

    AdamW fresh(model.unet.params.trainable_params(), {});
    auto back = load_train_state(dir.str(), fresh);
    CHECK(back.step == blob.step);
    CHECK(back.rng_state == blob.rng_state);
    CHECK(back.rng_inc == blob.rng_inc);
    CHECK(back.avg_task == blob.avg_task);
    CHECK(back.avg_total == blob.avg_total);
    CHECK(fresh.step_count() == opt.step_count());
    for (std::size_t i = 0; i < opt.slots().size(); ++i) {
        CHECK(fresh.slots()[i].m.bit_equal(opt.slots()[i].m));
        CHECK(fresh.slots()[i].v.bit_equal(opt.slots()[i].v));
    }
}

TEST_CASE("tensor dumps round-trip bit-exactly, including empty dumps") {
    TempDir dir("dump");
    Rng rng(3);
    std::vector<DumpEntry> entries;
    for (int i = 0; i < 3; ++i) {
        DumpEntry e;
        e.name = "tensor" + std::to_string(i);
        e.stage = "MID";
        e.block_index = i;
        e.kind = "SA";
        e.tensor = Tensor({2, 3 + i}, i == 1 ? Dtype::F64 : Dtype::F32);
        rng.fill_normal(e.tensor);
        entries.push_back(e);
    }
    write_dump(dir.str(), entries);
    auto back = read_dump(dir.str());
    REQUIRE(back.size() == entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        CHECK(back[i].name == entries[i].name);
        CHECK(back[i].kind == entries[i].kind);
        CHECK(back[i].tensor.bit_equal(entries[i].tensor));
    }

    TempDir empty("dump_empty");
    write_dump(empty.str(), {});
    CHECK(read_dump(empty.str()).empty());
}

TEST_CASE("exported attention maps keep row sums of one after re-reading") {
    TempDir dir("dump_attn");
    auto model = build_model(tiny_config(), 9);
    auto data = gen_dataset(4, 16, 16, 2);
    Batch batch = make_batch(data, {0, 1});
    auto schedule = make_schedule(20, 1e-3, 0.02);
    std::vector<FeatureTapSpec> taps = {{StageId::MID, 1, TapKind::SA, true},
                                        {StageId::UP3, 0, TapKind::LF, false}};
    export_tap_dump(model, batch, schedule, 5, taps, dir.str());

    auto entries = read_dump(dir.str());
    REQUIRE(entries.size() == 3);  // SA tensor, its attention map, LF tensor
    bool found_attn = false;
    for (const auto& e : entries) {
        if (e.kind != "SA-attn") continue;
        found_attn = true;
        REQUIRE(e.tensor.rank() == 3);
        long rows = e.tensor.dim(0) * e.tensor.dim(1);
        long t = e.tensor.dim(2);
        for (long r = 0; r < rows; ++r) {
            double sum = 0;
            for (long j = 0; j < t; ++j) sum += e.tensor.get(r * t + j);
            CHECK(std::fabs(sum - 1.0) < 1e-5);
        }
    }
    CHECK(found_attn);
}

TEST_CASE("png output is deterministic and well-formed") {
    TempDir dir("png");
    auto data = gen_dataset(1, 16, 16, 8);
    auto rgb = image_to_rgb8(data[0].image);
    std::string p1 = dir.str() + "/a.png", p2 = dir.str() + "/b.png";
    write_png_rgb(p1, rgb, 16, 16);
    write_png_rgb(p2, rgb, 16, 16);

    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    std::string a = slurp(p1), b = slurp(p2);
    CHECK(a == b);
    REQUIRE(a.size() > 8);
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    for (int i = 0; i < 8; ++i) CHECK(static_cast<unsigned char>(a[i]) == sig[i]);
    CHECK(a.find("IHDR") != std::string::npos);
    CHECK(a.find("IDAT") != std::string::npos);
    CHECK(a.find("IEND") != std::string::npos);
}

TEST_CASE("rgb8 conversion clamps and maps the range") {
    Tensor img({3, 1, 2}, Dtype::F32);
    img.set(0, -1.0);
    img.set(1, 1.0);
    img.set(2, 0.0);
    img.set(3, 2.0);   // clamps to 255
    img.set(4, -2.0);  // clamps to 0
    img.set(5, 1.0);
    auto rgb = image_to_rgb8(img);
    CHECK(rgb[0] == 0);     // (-1 -> 0), pixel 0 channel r
    CHECK(rgb[3] == 255);   // (1 -> 255), pixel 1 channel r
    CHECK(rgb[1] == 128);   // 0 -> 128 (round)
    CHECK(rgb[4] == 255);
    CHECK(rgb[2] == 0);
    CHECK(rgb[5] == 255);
}
