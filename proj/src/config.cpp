#include "distillforge/config.hpp"

#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace distillforge {

using nlohmann::json;

const char* stage_name(StageId s) {
    switch (s) {
        case StageId::DW1: return "DW-1";
        case StageId::DW2: return "DW-2";
        case StageId::DW3: return "DW-3";
        case StageId::MID: return "MID";
        case StageId::UP1: return "UP-1";
        case StageId::UP2: return "UP-2";
        case StageId::UP3: return "UP-3";
    }
    return "?";
}

const char* stage_prefix(StageId s) {
    switch (s) {
        case StageId::DW1: return "dw1";
        case StageId::DW2: return "dw2";
        case StageId::DW3: return "dw3";
        case StageId::MID: return "mid";
        case StageId::UP1: return "up1";
        case StageId::UP2: return "up2";
        case StageId::UP3: return "up3";
    }
    return "?";
}

StageId stage_from_name(const std::string& name) {
    for (StageId s : kAllStages)
        if (name == stage_name(s) || name == stage_prefix(s)) return s;
    throw std::invalid_argument("unknown stage: " + name);
}

bool stage_is_encoder(StageId s) {
    return s == StageId::DW1 || s == StageId::DW2 || s == StageId::DW3;
}

bool stage_is_decoder(StageId s) {
    return s == StageId::UP1 || s == StageId::UP2 || s == StageId::UP3;
}

int stage_level(StageId s) {
    switch (s) {
        case StageId::DW1: return 0;
        case StageId::DW2: return 1;
        case StageId::DW3: return 2;
        case StageId::MID: return 2;
        case StageId::UP1: return 2;
        case StageId::UP2: return 1;
        case StageId::UP3: return 0;
    }
    return -1;
}

// At least two channels per group: a single-channel group right after the
// additive timestep injection would normalize the injected constant away,
// cutting the timestep conditioning (and its gradients) out of the model.
long norm_groups(long channels) {
    return std::max(1L, std::min(std::gcd(channels, 32L), channels / 2));
}

void UNetConfig::validate() const {
    if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("config: channels must be >= 1");
    if (base_channels < 1) throw std::invalid_argument("config: base_channels must be >= 1");
    if (channel_mults.size() != 3) throw std::invalid_argument("config: channel_mults must have length 3");
    if (tx_depths.size() != 3) throw std::invalid_argument("config: tx_depths must have length 3");
    for (long m : channel_mults)
        if (m < 1) throw std::invalid_argument("config: channel_mults entries must be >= 1");
    for (long d : tx_depths)
        if (d < 0) throw std::invalid_argument("config: tx_depths entries must be >= 0");
    if (tx_pairs_encoder < 1) throw std::invalid_argument("config: tx_pairs_encoder must be >= 1");
    if (tx_pairs_decoder < 1) throw std::invalid_argument("config: tx_pairs_decoder must be >= 1");
    if (tx_pairs_decoder != tx_pairs_encoder + 1)
        throw std::invalid_argument(
            "config: tx_pairs_decoder must equal tx_pairs_encoder + 1 so the skip "
            "stack balances");
    if (head_dim < 1) throw std::invalid_argument("config: head_dim must be >= 1");
    if (context_dim < 1) throw std::invalid_argument("config: context_dim must be >= 1");
    if (time_embed_dim < 8 || time_embed_dim % 8 != 0)
        throw std::invalid_argument("config: time_embed_dim must be a positive multiple of 8");
    if (!mid_enabled && mid_tx_depth != 0)
        throw std::invalid_argument("config: mid_tx_depth must be 0 when mid_enabled is false");
    if (mid_tx_depth < 0) throw std::invalid_argument("config: mid_tx_depth must be >= 0");

    const StageId enc[3] = {StageId::DW1, StageId::DW2, StageId::DW3};
    for (int level = 0; level < 3; ++level) {
        if (depth(level) > 0 && channels(level) % head_dim != 0)
            throw std::invalid_argument(std::string("config: stage ") + stage_name(enc[level]) +
                                        ": channels " + std::to_string(channels(level)) +
                                        " not divisible by head_dim " + std::to_string(head_dim));
    }
    if (mid_enabled && mid_tx_depth > 0 && channels(2) % head_dim != 0)
        throw std::invalid_argument(std::string("config: stage MID: channels ") +
                                    std::to_string(channels(2)) + " not divisible by head_dim " +
                                    std::to_string(head_dim));
}

std::string unet_config_to_json(const UNetConfig& cfg) {
    json j;
    j["in_channels"] = cfg.in_channels;
    j["out_channels"] = cfg.out_channels;
    j["base_channels"] = cfg.base_channels;
    j["channel_mults"] = cfg.channel_mults;
    j["tx_depths"] = cfg.tx_depths;
    j["tx_pairs_encoder"] = cfg.tx_pairs_encoder;
    j["tx_pairs_decoder"] = cfg.tx_pairs_decoder;
    j["mid_enabled"] = cfg.mid_enabled;
    j["mid_tx_depth"] = cfg.mid_tx_depth;
    j["head_dim"] = cfg.head_dim;
    j["context_dim"] = cfg.context_dim;
    j["time_embed_dim"] = cfg.time_embed_dim;
    return j.dump(2);
}

UNetConfig unet_config_from_json_obj(const json& j) {
    static const std::vector<std::string> kKnown = {
        "in_channels", "out_channels", "base_channels", "channel_mults",
        "tx_depths",   "tx_pairs_encoder", "tx_pairs_decoder", "mid_enabled",
        "mid_tx_depth", "head_dim", "context_dim", "time_embed_dim"};
    if (!j.is_object()) throw std::invalid_argument("unet config: expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const auto& k : kKnown) known = known || (it.key() == k);
        if (!known) throw std::invalid_argument("unet config: unknown key '" + it.key() + "'");
    }
    UNetConfig cfg;
    cfg.in_channels = j.at("in_channels").get<long>();
    cfg.out_channels = j.at("out_channels").get<long>();
    cfg.base_channels = j.at("base_channels").get<long>();
    cfg.channel_mults = j.at("channel_mults").get<std::vector<long>>();
    cfg.tx_depths = j.at("tx_depths").get<std::vector<long>>();
    cfg.tx_pairs_encoder = j.at("tx_pairs_encoder").get<long>();
    cfg.tx_pairs_decoder = j.at("tx_pairs_decoder").get<long>();
    cfg.mid_enabled = j.at("mid_enabled").get<bool>();
    cfg.mid_tx_depth = j.at("mid_tx_depth").get<long>();
    cfg.head_dim = j.at("head_dim").get<long>();
    cfg.context_dim = j.at("context_dim").get<long>();
    cfg.time_embed_dim = j.at("time_embed_dim").get<long>();
    cfg.validate();
    return cfg;
}

UNetConfig unet_config_from_json(const std::string& json_text) {
    return unet_config_from_json_obj(json::parse(json_text));
}

UNetConfig load_unet_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    json j;
    in >> j;
    try {
        return unet_config_from_json_obj(j);
    } catch (const std::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

void save_unet_config(const UNetConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config file: " + path);
    out << unet_config_to_json(cfg) << "\n";
}

}  // namespace distillforge
