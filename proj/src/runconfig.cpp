#include "distillforge/runconfig.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace distillforge {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& j, const std::vector<std::string>& known,
                    const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || it.key() == k;
        if (!ok)
            throw std::invalid_argument("run config: unknown key '" + it.key() + "' in " + section);
    }
}

UNetConfig unet_from_field(const json& j, const std::string& base_dir) {
    if (j.is_string()) {
        fs::path p = j.get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
        return load_unet_config(p.string());
    }
    return unet_config_from_json(j.dump());
}

}  // namespace

RunConfig run_config_from_json(const json& j, const std::string& base_dir) {
    if (!j.is_object()) throw std::invalid_argument("run config: expected a JSON object");
    reject_unknown(j,
                   {"unet", "compression", "recipe", "strategy", "schedule", "train",
                    "loss_weights", "data", "sampler"},
                   "run config");
    RunConfig cfg;
    if (j.contains("unet")) {
        cfg.unet = unet_from_field(j.at("unet"), base_dir);
        cfg.has_unet = true;
    }
    if (j.contains("compression")) {
        cfg.compression = compression_spec_from_json(j.at("compression").dump());
        cfg.has_compression = true;
    }
    if (j.contains("recipe")) cfg.recipe = j.at("recipe").get<std::string>();
    if (j.contains("strategy")) cfg.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        reject_unknown(s, {"T", "beta_start", "beta_end"}, "schedule");
        if (s.contains("T")) cfg.schedule.T = s.at("T").get<long>();
        if (s.contains("beta_start")) cfg.schedule.beta_start = s.at("beta_start").get<double>();
        if (s.contains("beta_end")) cfg.schedule.beta_end = s.at("beta_end").get<double>();
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"steps", "batch_size", "lr", "seed", "cfg_drop_prob", "checkpoint_every",
                        "weight_decay"},
                       "train");
        if (t.contains("steps")) cfg.train.steps = t.at("steps").get<long>();
        if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<long>();
        if (t.contains("lr")) cfg.train.lr = t.at("lr").get<double>();
        if (t.contains("seed")) cfg.train.seed = t.at("seed").get<std::uint64_t>();
        if (t.contains("cfg_drop_prob")) cfg.train.cfg_drop_prob = t.at("cfg_drop_prob").get<double>();
        if (t.contains("checkpoint_every"))
            cfg.train.checkpoint_every = t.at("checkpoint_every").get<long>();
        if (t.contains("weight_decay")) cfg.train.weight_decay = t.at("weight_decay").get<double>();
    }
    if (j.contains("loss_weights")) {
        const json& w = j.at("loss_weights");
        reject_unknown(w, {"w_task", "w_out", "w_feat", "per_pair_overrides", "feat_kd_reduction"},
                       "loss_weights");
        if (w.contains("w_task")) cfg.loss_weights.w_task = w.at("w_task").get<double>();
        if (w.contains("w_out")) cfg.loss_weights.w_out = w.at("w_out").get<double>();
        if (w.contains("w_feat")) cfg.loss_weights.w_feat = w.at("w_feat").get<double>();
        if (w.contains("per_pair_overrides"))
            for (auto it = w.at("per_pair_overrides").begin();
                 it != w.at("per_pair_overrides").end(); ++it)
                cfg.loss_weights.per_pair_overrides[std::stoul(it.key())] = it.value().get<double>();
        if (w.contains("feat_kd_reduction")) {
            std::string r = w.at("feat_kd_reduction").get<std::string>();
            if (r == "pair-mean")
                cfg.reduction = FeatKdReduction::PairMean;
            else if (r == "pair-sum")
                cfg.reduction = FeatKdReduction::PairSum;
            else
                throw std::invalid_argument("run config: feat_kd_reduction must be pair-mean or pair-sum");
        }
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d, {"n", "H", "W", "seed"}, "data");
        if (d.contains("n")) cfg.data.n = d.at("n").get<long>();
        if (d.contains("H")) cfg.data.h = d.at("H").get<long>();
        if (d.contains("W")) cfg.data.w = d.at("W").get<long>();
        if (d.contains("seed")) cfg.data.seed = d.at("seed").get<std::uint64_t>();
    }
    if (j.contains("sampler")) {
        const json& s = j.at("sampler");
        reject_unknown(s, {"steps", "cfg_scale", "seed"}, "sampler");
        if (s.contains("steps")) cfg.sampler.steps = s.at("steps").get<long>();
        if (s.contains("cfg_scale")) cfg.sampler.cfg_scale = s.at("cfg_scale").get<double>();
        if (s.contains("seed")) cfg.sampler.seed = s.at("seed").get<std::uint64_t>();
    }

    // Validate everything up front.
    if (cfg.has_unet) cfg.unet.validate();
    if (cfg.schedule.T < 2 || !(0.0 < cfg.schedule.beta_start) ||
        !(cfg.schedule.beta_start < cfg.schedule.beta_end) || !(cfg.schedule.beta_end < 1.0))
        throw std::invalid_argument("run config: invalid schedule parameters");
    if (cfg.train.steps < 0 || cfg.train.batch_size < 1 || cfg.train.lr <= 0.0)
        throw std::invalid_argument("run config: invalid train parameters");
    if (cfg.train.cfg_drop_prob < 0.0 || cfg.train.cfg_drop_prob > 1.0)
        throw std::invalid_argument("run config: cfg_drop_prob must be in [0,1]");
    if (cfg.loss_weights.w_task < 0 || cfg.loss_weights.w_out < 0 || cfg.loss_weights.w_feat < 0)
        throw std::invalid_argument("run config: loss weights must be >= 0");
    if (cfg.data.n < 1 || cfg.data.h < 16 || cfg.data.w < 16)
        throw std::invalid_argument("run config: data needs n >= 1 and H, W >= 16");
    if (cfg.sampler.steps < 1 || cfg.sampler.steps > cfg.schedule.T)
        throw std::invalid_argument("run config: sampler steps must be in [1, T]");
    if (cfg.sampler.cfg_scale < 0.0)
        throw std::invalid_argument("run config: cfg_scale must be >= 0");
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open run config: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
    try {
        return run_config_from_json(j, fs::path(path).parent_path().string());
    } catch (const std::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

json run_config_echo(const RunConfig& cfg) {
    json j;
    if (cfg.has_unet) j["unet"] = json::parse(unet_config_to_json(cfg.unet));
    if (cfg.has_compression)
        j["compression"] = json::parse(compression_spec_to_json(cfg.compression));
    j["recipe"] = cfg.recipe;
    j["strategy"] = strategy_name(cfg.strategy);
    j["schedule"] = {{"T", cfg.schedule.T},
                     {"beta_start", cfg.schedule.beta_start},
                     {"beta_end", cfg.schedule.beta_end}};
    j["train"] = {{"steps", cfg.train.steps},
                  {"batch_size", cfg.train.batch_size},
                  {"lr", cfg.train.lr},
                  {"seed", cfg.train.seed},
                  {"cfg_drop_prob", cfg.train.cfg_drop_prob},
                  {"checkpoint_every", cfg.train.checkpoint_every},
                  {"weight_decay", cfg.train.weight_decay}};
    json overrides = json::object();
    for (const auto& [k, v] : cfg.loss_weights.per_pair_overrides) overrides[std::to_string(k)] = v;
    j["loss_weights"] = {{"w_task", cfg.loss_weights.w_task},
                         {"w_out", cfg.loss_weights.w_out},
                         {"w_feat", cfg.loss_weights.w_feat},
                         {"per_pair_overrides", overrides},
                         {"feat_kd_reduction", cfg.reduction == FeatKdReduction::PairMean
                                                   ? "pair-mean"
                                                   : "pair-sum"}};
    j["data"] = {{"n", cfg.data.n}, {"H", cfg.data.h}, {"W", cfg.data.w}, {"seed", cfg.data.seed}};
    j["sampler"] = {{"steps", cfg.sampler.steps},
                    {"cfg_scale", cfg.sampler.cfg_scale},
                    {"seed", cfg.sampler.seed}};
    return j;
}

}  // namespace distillforge
