#include "distillforge/compress.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

namespace distillforge {

using nlohmann::json;

const char* strategy_name(LayerMatchStrategy s) {
    switch (s) {
        case LayerMatchStrategy::SABottom: return "SA-bottom";
        case LayerMatchStrategy::SAInterleave: return "SA-interleave";
        case LayerMatchStrategy::SAUp: return "SA-up";
    }
    return "?";
}

LayerMatchStrategy strategy_from_name(const std::string& name) {
    if (name == "SA-bottom" || name == "sa-bottom") return LayerMatchStrategy::SABottom;
    if (name == "SA-interleave" || name == "sa-interleave") return LayerMatchStrategy::SAInterleave;
    if (name == "SA-up" || name == "sa-up") return LayerMatchStrategy::SAUp;
    throw std::invalid_argument("unknown layer match strategy: " + name);
}

std::string compression_spec_to_json(const CompressionSpec& spec) {
    json j;
    j["remove_encoder_last_pair"] = spec.remove_encoder_last_pair;
    j["remove_decoder_intermediate_pair"] = spec.remove_decoder_intermediate_pair;
    j["target_tx_depths"] = spec.target_tx_depths;
    j["remove_mid"] = spec.remove_mid;
    return j.dump(2);
}

CompressionSpec compression_spec_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    if (!j.is_object()) throw std::invalid_argument("compression spec: expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() != "remove_encoder_last_pair" &&
            it.key() != "remove_decoder_intermediate_pair" && it.key() != "target_tx_depths" &&
            it.key() != "remove_mid")
            throw std::invalid_argument("compression spec: unknown key '" + it.key() + "'");
    }
    CompressionSpec spec;
    spec.remove_encoder_last_pair = j.at("remove_encoder_last_pair").get<bool>();
    spec.remove_decoder_intermediate_pair = j.at("remove_decoder_intermediate_pair").get<bool>();
    spec.target_tx_depths = j.at("target_tx_depths").get<std::vector<long>>();
    spec.remove_mid = j.at("remove_mid").get<bool>();
    return spec;
}

CompressionSpec load_compression_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open compression spec: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return compression_spec_from_json(text);
    } catch (const std::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

UNetConfig compress_config(const UNetConfig& teacher, const CompressionSpec& spec) {
    teacher.validate();
    if (spec.target_tx_depths.size() != 3)
        throw std::invalid_argument("compression spec: target_tx_depths must have length 3");
    for (int level = 0; level < 3; ++level) {
        long target = spec.target_tx_depths[static_cast<std::size_t>(level)];
        long have = teacher.tx_depths[static_cast<std::size_t>(level)];
        if (target > have)
            throw std::invalid_argument("compression spec: target depth " + std::to_string(target) +
                                        " exceeds teacher depth " + std::to_string(have) +
                                        " at level " + std::to_string(level));
        if (target == 0 && have != 0)
            throw std::invalid_argument(
                "compression spec: target depth 0 only allowed where the teacher depth is 0 "
                "(level " + std::to_string(level) + ")");
    }
    UNetConfig student = teacher;
    student.tx_depths = spec.target_tx_depths;
    if (spec.remove_encoder_last_pair) {
        if (teacher.tx_pairs_encoder < 2)
            throw std::invalid_argument("compression spec: encoder has no pair to remove");
        student.tx_pairs_encoder -= 1;
    }
    if (spec.remove_decoder_intermediate_pair) {
        if (teacher.tx_pairs_decoder < 2)
            throw std::invalid_argument("compression spec: decoder has no pair to remove");
        student.tx_pairs_decoder -= 1;
    }
    if (spec.remove_mid) {
        student.mid_enabled = false;
        student.mid_tx_depth = 0;
    } else if (student.mid_enabled) {
        student.mid_tx_depth = std::min(teacher.mid_tx_depth, spec.target_tx_depths[2]);
    }
    student.validate();
    return student;
}

std::vector<int> plan_layer_match(int d_teacher, int d_student, LayerMatchStrategy strategy) {
    if (d_student < 1 || d_student > d_teacher)
        throw std::invalid_argument("plan_layer_match: need 1 <= d_student <= d_teacher, got " +
                                    std::to_string(d_student) + " > " + std::to_string(d_teacher));
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(d_student));
    switch (strategy) {
        case LayerMatchStrategy::SABottom:
            for (int i = 1; i <= d_student; ++i) out.push_back(i);
            break;
        case LayerMatchStrategy::SAUp:
            for (int i = d_teacher - d_student + 1; i <= d_teacher; ++i) out.push_back(i);
            break;
        case LayerMatchStrategy::SAInterleave: {
            std::set<int> chosen;
            for (int i = 1; i <= d_teacher && static_cast<int>(chosen.size()) < d_student; i += 2)
                chosen.insert(i);
            for (int i = d_teacher; static_cast<int>(chosen.size()) < d_student; --i)
                chosen.insert(i);
            out.assign(chosen.begin(), chosen.end());
            break;
        }
    }
    return out;
}

std::string match_plan_to_json(const MatchPlan& plan) {
    json j;
    j["name"] = plan.name;
    j["pairs"] = json::array();
    auto tap_to_json = [](const FeatureTapSpec& t) {
        json o;
        o["stage"] = stage_name(t.stage);
        o["block_index"] = t.block_index;
        o["kind"] = tap_kind_name(t.kind);
        return o;
    };
    for (const auto& p : plan.pairs) {
        json o;
        o["student"] = tap_to_json(p.student);
        o["teacher"] = tap_to_json(p.teacher);
        j["pairs"].push_back(o);
    }
    return j.dump(2);
}

MatchPlan match_plan_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    MatchPlan plan;
    plan.name = j.at("name").get<std::string>();
    auto tap_from_json = [](const json& o) {
        FeatureTapSpec t;
        t.stage = stage_from_name(o.at("stage").get<std::string>());
        t.block_index = o.at("block_index").get<int>();
        t.kind = tap_kind_from_name(o.at("kind").get<std::string>());
        return t;
    };
    for (const auto& o : j.at("pairs")) {
        MatchPair p;
        p.student = tap_from_json(o.at("student"));
        p.teacher = tap_from_json(o.at("teacher"));
        if (p.student.kind != p.teacher.kind || p.student.stage != p.teacher.stage)
            throw std::invalid_argument("match plan: pair must share stage and kind");
        plan.pairs.push_back(p);
    }
    return plan;
}

MatchPlan load_match_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open match plan: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return match_plan_from_json(text);
    } catch (const std::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

namespace {

/// 1-based teacher pair index for each student pair. Encoder removal drops
/// the last pair; decoder removal drops the intermediate one (pair 2 of 3).
std::vector<int> pair_survivors(int teacher_pairs, int student_pairs, bool decoder) {
    std::vector<int> out;
    if (student_pairs == teacher_pairs) {
        for (int i = 1; i <= teacher_pairs; ++i) out.push_back(i);
        return out;
    }
    if (student_pairs != teacher_pairs - 1)
        throw std::invalid_argument("pair mapping: student pairs " + std::to_string(student_pairs) +
                                    " not derivable from teacher pairs " +
                                    std::to_string(teacher_pairs));
    if (!decoder) {
        for (int i = 1; i <= student_pairs; ++i) out.push_back(i);
        return out;
    }
    int removed = teacher_pairs <= 2 ? teacher_pairs : (teacher_pairs + 1) / 2;
    for (int i = 1; i <= teacher_pairs; ++i)
        if (i != removed) out.push_back(i);
    return out;
}

void check_same_widths(const UNetConfig& teacher, const UNetConfig& student) {
    if (teacher.base_channels != student.base_channels ||
        teacher.channel_mults != student.channel_mults || teacher.head_dim != student.head_dim ||
        teacher.context_dim != student.context_dim ||
        teacher.in_channels != student.in_channels ||
        teacher.out_channels != student.out_channels ||
        teacher.time_embed_dim != student.time_embed_dim)
        throw std::invalid_argument("student must keep the teacher's channel widths");
}

/// Student parameter-name prefix -> teacher prefix, down to transformer-layer
/// granularity. Keys carry a trailing '.' so l1 never matches l10.
std::unordered_map<std::string, std::string> build_prefix_map(const UNetPlan& teacher,
                                                              const UNetPlan& student,
                                                              LayerMatchStrategy strategy) {
    std::unordered_map<std::string, std::string> map;
    for (const auto& ssp : student.stages) {
        const StagePlan* tsp = teacher.find_stage(ssp.stage);
        if (!tsp)
            throw std::invalid_argument(std::string("teacher has no stage ") +
                                        stage_name(ssp.stage));
        int t_pairs = 0, s_pairs = 0;
        for (const auto& e : tsp->elems) t_pairs = std::max(t_pairs, e.pair_index);
        for (const auto& e : ssp.elems) s_pairs = std::max(s_pairs, e.pair_index);
        const bool mid = ssp.stage == StageId::MID;
        std::vector<int> survivors;
        if (mid) {
            survivors = {1, 2};
        } else {
            survivors = pair_survivors(t_pairs, s_pairs, stage_is_decoder(ssp.stage));
        }
        for (const auto& e : ssp.elems) {
            int tq = survivors[static_cast<std::size_t>(e.pair_index - 1)];
            const ElemPlan* te = nullptr;
            for (const auto& cand : tsp->elems)
                if (cand.kind == e.kind && cand.pair_index == tq) te = &cand;
            if (!te)
                throw std::invalid_argument("no teacher counterpart for " + e.prefix);
            if (e.kind == ElemPlan::kRes) {
                map[e.prefix + "."] = te->prefix + ".";
            } else {
                auto match = plan_layer_match(static_cast<int>(te->depth),
                                              static_cast<int>(e.depth), strategy);
                for (long k = 1; k <= e.depth; ++k)
                    map[e.prefix + ".l" + std::to_string(k) + "."] =
                        te->prefix + ".l" + std::to_string(match[static_cast<std::size_t>(k - 1)]) +
                        ".";
                map[e.prefix + "."] = te->prefix + ".";  // norm_in / proj_in / proj_out
            }
        }
    }
    return map;
}

std::string map_name(const std::unordered_map<std::string, std::string>& prefix_map,
                     const std::string& name) {
    // Longest matching prefix wins (layer keys are longer than stack keys).
    std::size_t best_len = 0;
    const std::string* best = nullptr;
    for (const auto& [from, to] : prefix_map) {
        if (from.size() > best_len && name.size() > from.size() &&
            name.compare(0, from.size(), from) == 0) {
            best_len = from.size();
            best = &to;
        }
    }
    if (!best) return name;  // global parameters keep their names
    return *best + name.substr(best_len);
}

}  // namespace

WeightMap inherit_weights(const UNetModel& teacher, UNetModel& student,
                          LayerMatchStrategy strategy) {
    check_same_widths(teacher.config, student.config);
    auto prefix_map = build_prefix_map(teacher.plan, student.plan, strategy);
    WeightMap wm;
    for (const auto& p : student.params.all()) {
        std::string tname = map_name(prefix_map, p->name);
        NodePtr tp = teacher.params.find(tname);
        if (!tp || tp->value.shape() != p->value.shape()) {
            wm.unmatched_student.push_back(p->name);
            continue;
        }
        wm.entries.emplace_back(p->name, tname);
    }
    apply_weight_map(wm, teacher, student);
    return wm;
}

void apply_weight_map(const WeightMap& map, const UNetModel& teacher, UNetModel& student) {
    for (const auto& [sname, tname] : map.entries) {
        NodePtr sp = student.params.get(sname);
        NodePtr tp = teacher.params.get(tname);
        if (sp->value.shape() != tp->value.shape())
            throw std::invalid_argument("weight map: shape mismatch between student '" + sname +
                                        "' " + sp->value.shape_str() + " and teacher '" + tname +
                                        "' " + tp->value.shape_str());
        sp->value = tp->value.cast(student.dtype);
    }
}

// ---------------------------------------------------------------------------

namespace {

struct StackRef {
    StageId stage;
    int pair_index;        // student pair
    long depth;            // student stack depth
    long flat_base;        // student flat layer index base
    int teacher_pair;      // survivor pair in the teacher
    long teacher_depth;    // teacher stack depth
    long teacher_flat_base;
};

std::vector<StackRef> matched_stacks(const UNetPlan& teacher, const UNetPlan& student,
                                     StageId stage) {
    std::vector<StackRef> out;
    const StagePlan* ssp = student.find_stage(stage);
    const StagePlan* tsp = teacher.find_stage(stage);
    if (!ssp || !tsp || ssp->n_tx_layers == 0) return out;
    int t_pairs = 0, s_pairs = 0;
    for (const auto& e : tsp->elems) t_pairs = std::max(t_pairs, e.pair_index);
    for (const auto& e : ssp->elems) s_pairs = std::max(s_pairs, e.pair_index);
    std::vector<int> survivors = stage == StageId::MID
                                     ? std::vector<int>{1}
                                     : pair_survivors(t_pairs, s_pairs, stage_is_decoder(stage));
    long flat = 0;
    for (const auto& e : ssp->elems) {
        if (e.kind != ElemPlan::kTx) continue;
        StackRef ref;
        ref.stage = stage;
        ref.pair_index = e.pair_index;
        ref.depth = e.depth;
        ref.flat_base = flat;
        ref.teacher_pair = stage == StageId::MID
                               ? 1
                               : survivors[static_cast<std::size_t>(e.pair_index - 1)];
        const ElemPlan* te = nullptr;
        for (const auto& cand : tsp->elems)
            if (cand.kind == ElemPlan::kTx && cand.pair_index == ref.teacher_pair) te = &cand;
        if (!te) throw std::invalid_argument("teacher stack missing for a student stack");
        ref.teacher_depth = te->depth;
        // Teacher stacks at one stage share a depth, so flat offsets stack up.
        long tflat = 0;
        for (const auto& cand : tsp->elems) {
            if (cand.kind != ElemPlan::kTx) continue;
            if (cand.pair_index == ref.teacher_pair) break;
            tflat += cand.depth;
        }
        ref.teacher_flat_base = tflat;
        out.push_back(ref);
        flat += e.depth;
    }
    return out;
}

}  // namespace

MatchPlan plan_feature_match(const UNetConfig& teacher_cfg, const UNetConfig& student_cfg,
                             const std::string& recipe, LayerMatchStrategy strategy) {
    check_same_widths(teacher_cfg, student_cfg);
    UNetPlan teacher = plan_unet(teacher_cfg);
    UNetPlan student = plan_unet(student_cfg);
    MatchPlan plan;
    plan.name = recipe;

    auto add_sa_like = [&](StageId stage, TapKind kind) {
        for (const auto& ref : matched_stacks(teacher, student, stage)) {
            auto match = plan_layer_match(static_cast<int>(ref.teacher_depth),
                                          static_cast<int>(ref.depth), strategy);
            for (long k = 1; k <= ref.depth; ++k) {
                MatchPair p;
                p.student = {stage, static_cast<int>(ref.flat_base + k), kind, false};
                p.teacher = {stage,
                             static_cast<int>(ref.teacher_flat_base +
                                              match[static_cast<std::size_t>(k - 1)]),
                             kind, false};
                plan.pairs.push_back(p);
            }
        }
    };

    auto student_stages = [&]() {
        std::vector<StageId> out;
        for (const auto& sp : student.stages) out.push_back(sp.stage);
        return out;
    }();

    auto add_sa_all = [&] {
        for (StageId s : student_stages) add_sa_like(s, TapKind::SA);
    };
    auto add_lf = [&](const std::vector<StageId>& stages) {
        for (StageId s : stages) {
            if (!student.find_stage(s) || !teacher.find_stage(s)) continue;
            MatchPair p;
            p.student = {s, 0, TapKind::LF, false};
            p.teacher = {s, 0, TapKind::LF, false};
            plan.pairs.push_back(p);
        }
    };
    auto add_res = [&](const std::vector<StageId>& stages) {
        for (StageId s : stages) {
            const StagePlan* ssp = student.find_stage(s);
            const StagePlan* tsp = teacher.find_stage(s);
            if (!ssp || !tsp) continue;
            int t_pairs = 0, s_pairs = 0;
            for (const auto& e : tsp->elems) t_pairs = std::max(t_pairs, e.pair_index);
            for (const auto& e : ssp->elems) s_pairs = std::max(s_pairs, e.pair_index);
            std::vector<int> survivors = s == StageId::MID
                                             ? std::vector<int>{1, 2}
                                             : pair_survivors(t_pairs, s_pairs, stage_is_decoder(s));
            int idx = 0;
            for (const auto& e : ssp->elems) {
                if (e.kind != ElemPlan::kRes) continue;
                ++idx;
                MatchPair p;
                p.student = {s, idx, TapKind::Res, false};
                p.teacher = {s, survivors[static_cast<std::size_t>(e.pair_index - 1)], TapKind::Res,
                             false};
                plan.pairs.push_back(p);
            }
        }
    };

    const std::vector<StageId> corners = {StageId::DW1, StageId::UP3};
    if (recipe == "koala-default") {
        add_sa_all();
        add_lf(corners);
    } else if (recipe == "sa-only") {
        add_sa_all();
    } else if (recipe == "lf-only") {
        add_lf(student_stages);
    } else if (recipe == "sa+res-dw1up3") {
        add_sa_all();
        add_res(corners);
    } else if (recipe == "sa+lf-all") {
        add_sa_all();
        add_lf(student_stages);
    } else if (recipe == "sa+res-all") {
        add_sa_all();
        add_res(student_stages);
    } else if (recipe == "all-features") {
        for (StageId s : student_stages) {
            add_sa_like(s, TapKind::SA);
            add_sa_like(s, TapKind::CA);
            add_sa_like(s, TapKind::FFN);
        }
        add_res(student_stages);
        add_lf(student_stages);
    } else if (recipe.rfind("stage:", 0) == 0) {
        StageId s = stage_from_name(recipe.substr(6));
        const StagePlan* ssp = student.find_stage(s);
        if (!ssp || ssp->n_tx_layers == 0)
            throw std::invalid_argument("self-attention features cannot be distilled at this stage (" +
                                        std::string(stage_name(s)) + ")");
        add_sa_like(s, TapKind::SA);
    } else {
        throw std::invalid_argument(
            "unknown recipe '" + recipe +
            "'; expected koala-default, sa-only, lf-only, sa+res-dw1up3, sa+lf-all, sa+res-all, "
            "all-features, or stage:<StageId>");
    }
    return plan;
}

}  // namespace distillforge
