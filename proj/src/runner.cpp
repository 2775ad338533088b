#include "distillforge/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "distillforge/analysis.hpp"
#include "distillforge/io.hpp"

namespace distillforge {

namespace fs = std::filesystem;
using nlohmann::json;

std::string resolve_run_dir(const std::string& requested) {
    fs::path base = requested;
    if (!fs::exists(base) || (fs::is_directory(base) && fs::is_empty(base))) return base.string();
    auto stamp = std::chrono::duration_cast<std::chrono::seconds>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count();
    fs::path candidate = base;
    candidate += "-" + std::to_string(stamp);
    int n = 1;
    while (fs::exists(candidate)) {
        candidate = base;
        candidate += "-" + std::to_string(stamp) + "-" + std::to_string(n++);
    }
    return candidate.string();
}

namespace {

std::string fmt_metric(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) : out_(path) {
        if (!out_) throw std::runtime_error("cannot write " + path);
        out_ << "step,l_task,l_out,l_feat,total\n";
    }
    void row(long step, const StepMetrics& m) {
        out_ << step << "," << fmt_metric(m.l_task) << "," << fmt_metric(m.l_out) << ","
             << fmt_metric(m.l_feat) << "," << fmt_metric(m.total) << "\n";
    }
    void flush() { out_.flush(); }

private:
    std::ofstream out_;
};

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

std::string checkpoint_dir(const std::string& run_dir, long step) {
    return run_dir + "/checkpoints/step-" + std::to_string(step);
}

void save_model_checkpoint(const std::string& dir, const Model& model, const json& config_echo,
                           long step, const TrainState& state, const AdamW& opt,
                           const Rng& rng) {
    save_checkpoint(dir, model.unet.params, config_echo, step);
    TrainStateBlob blob{state.step, rng.state(),    rng.inc(),      state.avg_task,
                        state.avg_out, state.avg_feat, state.avg_total};
    save_train_state(dir, blob, opt);
}

}  // namespace

RunResult run_train_teacher(const RunConfig& cfg, const std::string& out_dir, std::ostream& log) {
    if (!cfg.has_unet)
        throw std::invalid_argument("train-teacher: run config needs a 'unet' section");
    RunResult result;
    result.run_dir = resolve_run_dir(out_dir);
    fs::create_directories(result.run_dir);

    json echo = run_config_echo(cfg);
    write_json_file(result.run_dir + "/config.json", echo);

    auto dataset = gen_dataset(cfg.data.n, cfg.data.h, cfg.data.w, cfg.data.seed);
    auto schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end);
    Model model = build_model(cfg.unet, cfg.train.seed);
    model.unet.timestep_limit = schedule.T;

    AdamWConfig ocfg;
    ocfg.lr = cfg.train.lr;
    ocfg.weight_decay = cfg.train.weight_decay;
    AdamW opt(model.unet.params.trainable_params(), ocfg);
    Rng rng(cfg.train.seed, 0x7e57u);

    MetricsWriter metrics(result.run_dir + "/metrics.csv");
    TrainState state;
    for (long step = 1; step <= cfg.train.steps; ++step) {
        Batch batch = make_batch(dataset, draw_batch_indices(rng, cfg.data.n, cfg.train.batch_size));
        StepMetrics m = train_step(model, batch, schedule, opt, rng, cfg.train.cfg_drop_prob);
        state.observe(m);
        metrics.row(step, m);
        if (cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 &&
            step != cfg.train.steps)
            save_model_checkpoint(checkpoint_dir(result.run_dir, step), model, echo, step, state,
                                  opt, rng);
        if (step % 100 == 0 || step == cfg.train.steps)
            log << "step " << step << "/" << cfg.train.steps << " task " << m.l_task << "\n";
    }
    metrics.flush();
    result.final_checkpoint = checkpoint_dir(result.run_dir, cfg.train.steps);
    save_model_checkpoint(result.final_checkpoint, model, echo, cfg.train.steps, state, opt, rng);
    result.state = state;
    return result;
}

Model load_model_checkpoint(const std::string& ckpt_dir, RunConfig* out_cfg) {
    if (!fs::exists(fs::path(ckpt_dir) / "manifest.json"))
        throw std::invalid_argument("checkpoint not found: " + ckpt_dir);
    CheckpointInfo info = read_checkpoint_manifest(ckpt_dir);
    RunConfig rc = run_config_from_json(info.config, "");
    if (!rc.has_unet)
        throw std::invalid_argument(ckpt_dir + ": checkpoint config echo lacks a unet section");
    Model model = build_model(rc.unet, 0);
    load_checkpoint(ckpt_dir, model.unet.params);
    model.unet.timestep_limit = rc.schedule.T;
    if (out_cfg) *out_cfg = rc;
    return model;
}

RunResult run_distill(const RunConfig& cfg, const std::string& teacher_ckpt,
                      const std::string& out_dir, std::ostream& log) {
    RunResult result;
    result.run_dir = resolve_run_dir(out_dir);
    fs::create_directories(result.run_dir);

    RunConfig teacher_cfg;
    Model teacher = load_model_checkpoint(teacher_ckpt, &teacher_cfg);
    freeze_model(teacher);
    auto schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end);
    teacher.unet.timestep_limit = schedule.T;

    UNetConfig student_cfg = cfg.has_compression
                                 ? compress_config(teacher_cfg.unet, cfg.compression)
                                 : teacher_cfg.unet;
    Model student = build_model(student_cfg, cfg.train.seed);
    student.unet.timestep_limit = schedule.T;
    WeightMap wm = inherit_model_weights(teacher, student, cfg.strategy);
    log << "inherited " << wm.entries.size() << " parameters, " << wm.unmatched_student.size()
        << " freshly initialized\n";

    MatchPlan plan = plan_feature_match(teacher_cfg.unet, student_cfg, cfg.recipe, cfg.strategy);
    {
        std::ofstream pf(result.run_dir + "/plan.json");
        pf << match_plan_to_json(plan) << "\n";
    }

    json echo = run_config_echo(cfg);
    write_json_file(result.run_dir + "/config.json", echo);
    json ckpt_echo = echo;
    ckpt_echo["unet"] = json::parse(unet_config_to_json(student_cfg));

    auto dataset = gen_dataset(cfg.data.n, cfg.data.h, cfg.data.w, cfg.data.seed);
    AdamWConfig ocfg;
    ocfg.lr = cfg.train.lr;
    ocfg.weight_decay = cfg.train.weight_decay;
    AdamW opt(student.unet.params.trainable_params(), ocfg);
    Rng rng(cfg.train.seed, 0x7e57u);

    DistillOptions opts;
    opts.weights = cfg.loss_weights;
    opts.cfg_drop_prob = cfg.train.cfg_drop_prob;
    opts.reduction = cfg.reduction;

    MetricsWriter metrics(result.run_dir + "/metrics.csv");
    TrainState state;
    for (long step = 1; step <= cfg.train.steps; ++step) {
        Batch batch = make_batch(dataset, draw_batch_indices(rng, cfg.data.n, cfg.train.batch_size));
        StepMetrics m = distill_step(teacher, student, batch, schedule, plan, opts, opt, rng);
        state.observe(m);
        metrics.row(step, m);
        if (cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 &&
            step != cfg.train.steps)
            save_model_checkpoint(checkpoint_dir(result.run_dir, step), student, ckpt_echo, step,
                                  state, opt, rng);
        if (step % 100 == 0 || step == cfg.train.steps)
            log << "step " << step << "/" << cfg.train.steps << " total " << m.total << "\n";
    }
    metrics.flush();
    result.final_checkpoint = checkpoint_dir(result.run_dir, cfg.train.steps);
    save_model_checkpoint(result.final_checkpoint, student, ckpt_echo, cfg.train.steps, state, opt,
                          rng);
    result.state = state;
    return result;
}

std::vector<std::string> run_sample(const std::string& ckpt_dir, const std::string& caption,
                                    const SampleOverrides& overrides, long count,
                                    const std::string& out_dir, std::ostream& log) {
    RunConfig rc;
    Model model = load_model_checkpoint(ckpt_dir, &rc);
    auto schedule = make_schedule(rc.schedule.T, rc.schedule.beta_start, rc.schedule.beta_end);

    SamplerConfig scfg = rc.sampler;
    if (overrides.steps > 0) scfg.steps = overrides.steps;
    if (overrides.cfg_scale >= 0.0) scfg.cfg_scale = overrides.cfg_scale;
    if (overrides.seed >= 0) scfg.seed = static_cast<std::uint64_t>(overrides.seed);
    if (scfg.steps > schedule.T)
        throw std::invalid_argument("sample: steps exceed the schedule length");

    std::vector<std::vector<long>> cond_tokens = {
        caption.empty() ? null_tokens() : caption_tokens_for(parse_caption(caption))};
    std::vector<std::vector<long>> uncond_tokens = {null_tokens()};
    Tensor ctx = embed_captions(model.text_table, cond_tokens)->value;
    Tensor null_ctx = embed_captions(model.text_table, uncond_tokens)->value;

    DenoiserFn denoiser = [&](const Tensor& x_in, long t, const Tensor& context) {
        auto out = unet_forward(model.unet, make_leaf(x_in), {t}, make_leaf(context));
        return out.eps_pred->value;
    };

    fs::create_directories(out_dir);
    std::vector<std::string> paths;
    for (long i = 0; i < count; ++i) {
        SamplerConfig one = scfg;
        one.seed = scfg.seed + static_cast<std::uint64_t>(i);
        Tensor img = euler_sample(denoiser, schedule, one, ctx, null_ctx,
                                  {1, model.unet.config.in_channels, rc.data.h, rc.data.w});
        Tensor hwc = img.reshaped({model.unet.config.in_channels, rc.data.h, rc.data.w});
        std::string path = out_dir + "/sample-" + std::to_string(one.seed) + ".png";
        write_png_rgb(path, image_to_rgb8(hwc), rc.data.w, rc.data.h);
        paths.push_back(path);
        log << "wrote " << path << "\n";
    }
    return paths;
}

}  // namespace distillforge
