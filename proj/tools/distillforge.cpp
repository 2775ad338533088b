#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "distillforge/analysis.hpp"
#include "distillforge/runner.hpp"
#include "distillforge/thread_pool.hpp"

using namespace distillforge;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void print_resolved(const json& j) { std::cout << "resolved config: " << j.dump() << "\n"; }

std::string stage_key(StageId s) {
    std::string k = stage_prefix(s);
    return k;
}

int cmd_budget(const std::vector<std::string>& paths, const std::string& out_dir) {
    json resolved;
    resolved["configs"] = paths;
    print_resolved(resolved);

    struct Row {
        std::string name;
        ParamBudget budget;
    };
    std::vector<Row> rows;
    for (const auto& p : paths)
        rows.push_back({fs::path(p).stem().string(), count_params(load_unet_config(p))});

    std::printf("%-16s %14s %10s %12s\n", "config", "params", "ckpt(GB)", "vs-first");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        double gb = static_cast<double>(rows[i].budget.total) * 4.0 / (1024.0 * 1024.0 * 1024.0);
        if (i == 0) {
            std::printf("%-16s %14ld %10.2f %12s\n", rows[i].name.c_str(), rows[i].budget.total,
                        gb, "-");
        } else {
            double red = 100.0 * (1.0 - static_cast<double>(rows[i].budget.total) /
                                            static_cast<double>(rows[0].budget.total));
            std::printf("%-16s %14ld %10.2f %11.1f%%\n", rows[i].name.c_str(),
                        rows[i].budget.total, gb, red);
        }
    }
    if (rows.size() > 2) {
        std::printf("\npairwise reductions:\n");
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < rows.size(); ++j) {
                if (i == j || rows[j].budget.total > rows[i].budget.total) continue;
                double red = 100.0 * (1.0 - static_cast<double>(rows[j].budget.total) /
                                                static_cast<double>(rows[i].budget.total));
                std::printf("  %s vs %s: %.1f%%\n", rows[j].name.c_str(), rows[i].name.c_str(),
                            red);
            }
    }
    std::printf("\nper-stage breakdown (params):\n%-16s", "config");
    for (StageId s : kAllStages) std::printf(" %12s", stage_name(s));
    std::printf("\n");
    for (const auto& row : rows) {
        std::printf("%-16s", row.name.c_str());
        for (StageId s : kAllStages)
            std::printf(" %12ld", row.budget.per_stage.at(s).total());
        std::printf("\n");
    }

    fs::create_directories(out_dir);
    std::ofstream csv(out_dir + "/budget.csv");
    csv << "name,total_params,ckpt_bytes,reduction_vs_first_pct";
    for (StageId s : kAllStages) csv << "," << stage_key(s) << "_res," << stage_key(s) << "_tx,"
                                     << stage_key(s) << "_other";
    csv << "\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        double red = i == 0 ? 0.0
                            : 100.0 * (1.0 - static_cast<double>(rows[i].budget.total) /
                                                 static_cast<double>(rows[0].budget.total));
        csv << rows[i].name << "," << rows[i].budget.total << "," << rows[i].budget.total * 4 << ","
            << red;
        for (StageId s : kAllStages) {
            const auto& sb = rows[i].budget.per_stage.at(s);
            csv << "," << sb.res << "," << sb.tx << "," << sb.other;
        }
        csv << "\n";
    }
    std::cout << "wrote " << out_dir << "/budget.csv\n";
    return 0;
}

int cmd_plan(const std::string& teacher_path, const std::string& spec_path,
             const std::string& recipe, const std::string& strategy, const std::string& out) {
    UNetConfig teacher = load_unet_config(teacher_path);
    CompressionSpec spec = load_compression_spec(spec_path);
    json resolved;
    resolved["teacher"] = teacher_path;
    resolved["spec"] = json::parse(compression_spec_to_json(spec));
    resolved["recipe"] = recipe;
    resolved["strategy"] = strategy;
    print_resolved(resolved);

    UNetConfig student = compress_config(teacher, spec);
    MatchPlan plan = plan_feature_match(teacher, student, recipe, strategy_from_name(strategy));
    std::string text = match_plan_to_json(plan);
    if (out.empty()) {
        std::cout << text << "\n";
    } else {
        std::ofstream f(out);
        if (!f) throw std::runtime_error("cannot write " + out);
        f << text << "\n";
        std::cout << "wrote " << out << " (" << plan.pairs.size() << " pairs)\n";
    }
    return 0;
}

int cmd_analyze_params(const std::string& config_path, const std::string& out_dir) {
    UNetConfig cfg = load_unet_config(config_path);
    json resolved;
    resolved["config"] = config_path;
    print_resolved(resolved);

    ParamBudget budget = param_distribution(cfg);
    std::printf("%-8s %14s %14s %14s %10s\n", "stage", "res", "tx", "other", "fraction");
    for (StageId s : kAllStages) {
        const auto& sb = budget.per_stage.at(s);
        const auto& f = budget.fractions.at(s);
        std::printf("%-8s %14ld %14ld %14ld %9.2f%%\n", stage_name(s), sb.res, sb.tx, sb.other,
                    100.0 * (f.res + f.tx + f.other));
    }
    double share = lowest_level_tx_share(budget);
    std::printf("total %ld params; lowest-level transformer share %.1f%%\n", budget.total,
                100.0 * share);

    fs::create_directories(out_dir);
    std::ofstream csv(out_dir + "/params.csv");
    csv << "stage,res,tx,other,fraction\n";
    for (StageId s : kAllStages) {
        const auto& sb = budget.per_stage.at(s);
        const auto& f = budget.fractions.at(s);
        csv << stage_name(s) << "," << sb.res << "," << sb.tx << "," << sb.other << ","
            << (f.res + f.tx + f.other) << "\n";
    }
    csv << "lowest_level_tx_share," << share << ",,,\n";
    std::cout << "wrote " << out_dir << "/params.csv\n";
    return 0;
}

std::string dump_from_checkpoint(const std::string& ckpt, const std::string& out_dir,
                                 bool want_attn) {
    RunConfig rc;
    Model model = load_model_checkpoint(ckpt, &rc);
    auto schedule = make_schedule(rc.schedule.T, rc.schedule.beta_start, rc.schedule.beta_end);
    auto dataset = gen_dataset(std::min<long>(rc.data.n, 4), rc.data.h, rc.data.w, rc.data.seed);
    std::vector<long> idx;
    for (long i = 0; i < static_cast<long>(dataset.size()); ++i) idx.push_back(i);
    Batch batch = make_batch(dataset, idx);

    std::vector<FeatureTapSpec> taps;
    for (const auto& sp : model.unet.plan.stages) {
        for (int l = 1; l <= sp.n_tx_layers; ++l)
            taps.push_back({sp.stage, l, TapKind::SA, want_attn});
        taps.push_back({sp.stage, 0, TapKind::LF, false});
    }
    std::string dump_dir = out_dir + "/dump";
    export_tap_dump(model, batch, schedule, rc.data.seed, taps, dump_dir);
    return dump_dir;
}

int cmd_analyze_cosine(const std::string& dump_dir, const std::string& ckpt, bool normalize,
                       const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::string dump = dump_dir;
    if (dump.empty()) dump = dump_from_checkpoint(ckpt, out_dir, false);
    json resolved;
    resolved["dump"] = dump;
    resolved["normalize"] = normalize;
    print_resolved(resolved);

    auto entries = read_dump(dump);
    std::ofstream csv(out_dir + "/cosine.csv");
    csv << "stage,kind,index,x,cosine\n";
    int groups = 0;
    for (StageId s : kAllStages) {
        for (const std::string kind : {"SA", "CA", "FFN", "Res"}) {
            std::vector<std::pair<int, const DumpEntry*>> group;
            for (const auto& e : entries)
                if (e.stage == stage_name(s) && e.kind == kind) group.push_back({e.block_index, &e});
            if (group.size() < 2) continue;
            std::sort(group.begin(), group.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });
            std::vector<Tensor> layers;
            for (const auto& [i, e] : group) layers.push_back(e->tensor);
            auto curve = cross_layer_cosine(layers, normalize);
            ++groups;
            for (std::size_t i = 0; i < curve.values.size(); ++i)
                csv << stage_name(s) << "," << kind << "," << group[i + 1].first << ","
                    << curve.index[i] << "," << curve.values[i] << "\n";
            if (curve.zero_norm_warning)
                std::cerr << "warning: zero-norm features in " << stage_name(s) << "/" << kind
                          << "\n";
        }
    }
    if (groups == 0)
        std::cerr << "warning: no stage held two or more comparable feature entries\n";
    std::cout << "wrote " << out_dir << "/cosine.csv\n";
    return 0;
}

int cmd_analyze_pca(const std::string& dump_dir, const std::string& ckpt, long k, bool png,
                    const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::string dump = dump_dir;
    if (dump.empty()) dump = dump_from_checkpoint(ckpt, out_dir, true);
    json resolved;
    resolved["dump"] = dump;
    resolved["k"] = k;
    print_resolved(resolved);

    auto entries = read_dump(dump);
    int analyzed = 0;
    for (const auto& e : entries) {
        if (e.kind != "SA-attn" || e.tensor.rank() != 3) continue;
        long b = e.tensor.dim(0), t = e.tensor.dim(1), d = e.tensor.dim(2);
        Tensor rows = e.tensor.reshaped({b * t, d});
        long kk = std::min(k, std::min(b * t, d));
        auto pca = attention_pca(rows, kk);
        ++analyzed;

        std::string base = e.name;
        for (auto& ch : base)
            if (ch == '/' || ch == '.') ch = '_';
        std::ofstream vcsv(out_dir + "/pca-" + base + "-variance.csv");
        vcsv << "component,explained_variance\n";
        for (long c = 0; c < kk; ++c)
            vcsv << c << "," << pca.explained_variance[static_cast<std::size_t>(c)] << "\n";
        std::ofstream pcsv(out_dir + "/pca-" + base + "-projections.csv");
        pcsv << "row";
        for (long c = 0; c < kk; ++c) pcsv << ",p" << c;
        pcsv << "\n";
        for (long i = 0; i < b * t; ++i) {
            pcsv << i;
            for (long c = 0; c < kk; ++c) pcsv << "," << pca.projections.get(i * kk + c);
            pcsv << "\n";
        }

        if (png && kk >= 3) {
            long side = static_cast<long>(std::lround(std::sqrt(static_cast<double>(t))));
            if (side * side == t) {
                // First batch element, top-3 projections min-max mapped to RGB.
                std::vector<std::uint8_t> rgb(static_cast<std::size_t>(t * 3));
                for (long c = 0; c < 3; ++c) {
                    double lo = 1e300, hi = -1e300;
                    for (long i = 0; i < t; ++i) {
                        double v = pca.projections.get(i * kk + c);
                        lo = std::min(lo, v);
                        hi = std::max(hi, v);
                    }
                    double span = hi > lo ? hi - lo : 1.0;
                    for (long i = 0; i < t; ++i) {
                        double v = (pca.projections.get(i * kk + c) - lo) / span;
                        rgb[static_cast<std::size_t>(i * 3 + c)] =
                            static_cast<std::uint8_t>(std::lround(v * 255.0));
                    }
                }
                write_png_rgb(out_dir + "/pca-" + base + ".png", rgb, side, side);
            } else {
                std::cerr << "warning: " << e.name << " has non-square token count " << t
                          << ", skipping PNG\n";
            }
        }
    }
    if (analyzed == 0) {
        std::cerr << "error: dump contains no attention-map entries (kind SA-attn); "
                     "re-export with attention capture\n";
        return 1;
    }
    std::cout << "analyzed " << analyzed << " attention maps into " << out_dir << "\n";
    return 0;
}

int cmd_gen_data(long n, long h, long w, std::uint64_t seed, const std::string& out_dir) {
    json resolved;
    resolved["n"] = n;
    resolved["H"] = h;
    resolved["W"] = w;
    resolved["seed"] = seed;
    print_resolved(resolved);

    auto dataset = gen_dataset(n, h, w, seed);
    std::vector<DumpEntry> entries;
    char name[64];
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        std::snprintf(name, sizeof(name), "image/%06zu", i);
        DumpEntry img{name, "", static_cast<int>(i), "image", dataset[i].image};
        entries.push_back(img);
        std::snprintf(name, sizeof(name), "tokens/%06zu", i);
        Tensor tok({kCaptionLen}, Dtype::F32);
        for (long l = 0; l < kCaptionLen; ++l)
            tok.set(l, static_cast<double>(dataset[i].caption_tokens[static_cast<std::size_t>(l)]));
        DumpEntry te{name, "", static_cast<int>(i), "tokens", tok};
        entries.push_back(te);
    }
    write_dump(out_dir, entries);
    std::cout << "wrote " << dataset.size() << " samples to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale diffusion U-Net compression and distillation pipeline"};
    app.require_subcommand(1);

    // budget
    auto* budget = app.add_subcommand("budget", "parameter budgets for one or more configs");
    std::vector<std::string> budget_paths;
    std::string budget_out = ".";
    budget->add_option("configs", budget_paths, "UNet config JSON paths")->required();
    budget->add_option("--out", budget_out, "directory for budget.csv");

    // train-teacher
    auto* traint = app.add_subcommand("train-teacher", "train a denoising teacher from scratch");
    std::string tt_config, tt_out = "runs/teacher";
    long long tt_seed = -1, tt_steps = -1;
    traint->add_option("--config", tt_config, "run config JSON")->required();
    traint->add_option("--out", tt_out, "run directory");
    traint->add_option("--seed", tt_seed, "override train.seed");
    traint->add_option("--steps", tt_steps, "override train.steps");

    // distill
    auto* dist = app.add_subcommand("distill", "distill a teacher checkpoint into a student");
    std::string d_config, d_teacher, d_out = "runs/distill";
    long long d_seed = -1, d_steps = -1;
    dist->add_option("--config", d_config, "run config JSON")->required();
    dist->add_option("--teacher", d_teacher, "teacher checkpoint directory")->required();
    dist->add_option("--out", d_out, "run directory");
    dist->add_option("--seed", d_seed, "override train.seed");
    dist->add_option("--steps", d_steps, "override train.steps");

    // sample
    auto* sample = app.add_subcommand("sample", "generate images from a checkpoint");
    std::string s_ckpt, s_caption, s_out = "samples";
    long long s_steps = -1, s_seed = -1, s_count = 1;
    double s_cfg_scale = -1.0;
    sample->add_option("--checkpoint", s_ckpt, "checkpoint directory")->required();
    sample->add_option("--caption", s_caption, "caption like 'large red circle'; empty = unconditional");
    sample->add_option("--steps", s_steps, "denoising steps");
    sample->add_option("--cfg-scale", s_cfg_scale, "classifier-free guidance scale");
    sample->add_option("--seed", s_seed, "sampler seed");
    sample->add_option("--count", s_count, "number of images");
    sample->add_option("--out", s_out, "output directory");

    // plan
    auto* plan = app.add_subcommand("plan", "derive a student and its feature match plan");
    std::string p_teacher, p_spec, p_recipe = "koala-default", p_strategy = "SA-bottom", p_out;
    plan->add_option("--teacher", p_teacher, "teacher UNet config JSON")->required();
    plan->add_option("--spec", p_spec, "compression spec JSON")->required();
    plan->add_option("--recipe", p_recipe, "match recipe");
    plan->add_option("--strategy", p_strategy, "SA-bottom | SA-interleave | SA-up");
    plan->add_option("--out", p_out, "write plan JSON here instead of stdout");

    // analyze
    auto* analyze = app.add_subcommand("analyze", "analysis suite");
    analyze->require_subcommand(1);
    auto* aparams = analyze->add_subcommand("params", "parameter distribution of a config");
    std::string ap_config, ap_out = ".";
    aparams->add_option("--config", ap_config, "UNet config JSON")->required();
    aparams->add_option("--out", ap_out, "directory for params.csv");

    auto* acos = analyze->add_subcommand("cosine", "cross-layer cosine similarity curves");
    std::string ac_dump, ac_ckpt, ac_out = ".";
    bool ac_norm = false;
    acos->add_option("--dump", ac_dump, "feature dump directory");
    acos->add_option("--checkpoint", ac_ckpt, "checkpoint to dump features from");
    acos->add_flag("--normalize", ac_norm, "normalize layer indices to [0,1]");
    acos->add_option("--out", ac_out, "output directory");

    auto* apca = analyze->add_subcommand("pca", "PCA of self-attention maps");
    std::string apca_dump, apca_ckpt, apca_out = ".";
    long apca_k = 3;
    bool apca_png = false;
    apca->add_option("--dump", apca_dump, "feature dump directory");
    apca->add_option("--checkpoint", apca_ckpt, "checkpoint to dump features from");
    apca->add_option("--k", apca_k, "number of components");
    apca->add_flag("--png", apca_png, "render top-3 projections as PNG");
    apca->add_option("--out", apca_out, "output directory");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write the procedural shapes dataset cache");
    long g_n = 128, g_h = 32, g_w = 32;
    std::uint64_t g_seed = 7;
    std::string g_out = "data-cache";
    gen->add_option("--n", g_n, "sample count");
    gen->add_option("--height", g_h, "image height");
    gen->add_option("--width", g_w, "image width");
    gen->add_option("--seed", g_seed, "dataset seed");
    gen->add_option("--out", g_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
            return app.exit(e);
        app.exit(e);
        return 1;
    }

    try {
        (void)worker_threads();  // honor DISTILLFORGE_THREADS before any kernels run
        if (budget->parsed()) return cmd_budget(budget_paths, budget_out);
        if (traint->parsed()) {
            RunConfig cfg = load_run_config(tt_config);
            if (tt_seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(tt_seed);
            if (tt_steps >= 0) cfg.train.steps = tt_steps;
            print_resolved(run_config_echo(cfg));
            auto result = run_train_teacher(cfg, tt_out, std::cout);
            std::cout << "run dir: " << result.run_dir << "\nfinal checkpoint: "
                      << result.final_checkpoint << "\navg task loss " << result.state.avg_task
                      << "\n";
            return 0;
        }
        if (dist->parsed()) {
            RunConfig cfg = load_run_config(d_config);
            if (d_seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(d_seed);
            if (d_steps >= 0) cfg.train.steps = d_steps;
            print_resolved(run_config_echo(cfg));
            auto result = run_distill(cfg, d_teacher, d_out, std::cout);
            std::cout << "run dir: " << result.run_dir << "\nfinal checkpoint: "
                      << result.final_checkpoint << "\navg total loss " << result.state.avg_total
                      << "\n";
            return 0;
        }
        if (sample->parsed()) {
            json resolved;
            resolved["checkpoint"] = s_ckpt;
            resolved["caption"] = s_caption;
            resolved["steps"] = s_steps;
            resolved["cfg_scale"] = s_cfg_scale;
            resolved["seed"] = s_seed;
            resolved["count"] = s_count;
            print_resolved(resolved);
            SampleOverrides ov;
            ov.steps = s_steps;
            ov.cfg_scale = s_cfg_scale;
            ov.seed = s_seed;
            run_sample(s_ckpt, s_caption, ov, s_count, s_out, std::cout);
            return 0;
        }
        if (plan->parsed()) return cmd_plan(p_teacher, p_spec, p_recipe, p_strategy, p_out);
        if (aparams->parsed()) return cmd_analyze_params(ap_config, ap_out);
        if (acos->parsed()) {
            if (ac_dump.empty() == ac_ckpt.empty())
                throw std::invalid_argument("analyze cosine: give exactly one of --dump/--checkpoint");
            return cmd_analyze_cosine(ac_dump, ac_ckpt, ac_norm, ac_out);
        }
        if (apca->parsed()) {
            if (apca_dump.empty() == apca_ckpt.empty())
                throw std::invalid_argument("analyze pca: give exactly one of --dump/--checkpoint");
            return cmd_analyze_pca(apca_dump, apca_ckpt, apca_k, apca_png, apca_out);
        }
        if (gen->parsed()) return cmd_gen_data(g_n, g_h, g_w, g_seed, g_out);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
