#include "distillforge/unet.hpp"

#include <cmath>
#include <stdexcept>

#include "distillforge/ops.hpp"
#include "distillforge/rng.hpp"

namespace distillforge {

const char* tap_kind_name(TapKind k) {
    switch (k) {
        case TapKind::SA: return "SA";
        case TapKind::CA: return "CA";
        case TapKind::FFN: return "FFN";
        case TapKind::Res: return "Res";
        case TapKind::LF: return "LF";
    }
    return "?";
}

TapKind tap_kind_from_name(const std::string& name) {
    if (name == "SA") return TapKind::SA;
    if (name == "CA") return TapKind::CA;
    if (name == "FFN") return TapKind::FFN;
    if (name == "Res") return TapKind::Res;
    if (name == "LF") return TapKind::LF;
    throw std::invalid_argument("unknown tap kind: " + name);
}

std::string FeatureTapSpec::to_string() const {
    return std::string("(") + stage_name(stage) + ", " + std::to_string(block_index) + ", " +
           tap_kind_name(kind) + ")";
}

const StagePlan* UNetPlan::find_stage(StageId s) const {
    for (const auto& sp : stages)
        if (sp.stage == s) return &sp;
    return nullptr;
}

UNetPlan plan_unet(const UNetConfig& cfg) {
    cfg.validate();
    UNetPlan plan;
    plan.cfg = cfg;

    std::vector<long> skip;
    long cur = cfg.channels(0);
    skip.push_back(cur);  // conv_in output

    const StageId enc[3] = {StageId::DW1, StageId::DW2, StageId::DW3};
    for (int level = 0; level < 3; ++level) {
        StagePlan sp;
        sp.stage = enc[level];
        const long cs = cfg.channels(level);
        const long depth = cfg.depth(level);
        for (long p = 1; p <= cfg.tx_pairs_encoder; ++p) {
            std::string base = std::string(stage_prefix(sp.stage)) + ".p" + std::to_string(p);
            ElemPlan res;
            res.kind = ElemPlan::kRes;
            res.prefix = base + ".res";
            res.pair_index = static_cast<int>(p);
            res.c_in = cur;
            res.c_out = cs;
            sp.elems.push_back(res);
            cur = cs;
            ++sp.n_res;
            if (depth > 0) {
                ElemPlan tx;
                tx.kind = ElemPlan::kTx;
                tx.prefix = base + ".tx";
                tx.pair_index = static_cast<int>(p);
                tx.channels = cs;
                tx.depth = depth;
                sp.elems.push_back(tx);
                sp.n_tx_layers += depth;
            }
            skip.push_back(cur);
        }
        if (level < 2) {
            sp.has_down = true;
            sp.resample_channels = cur;
            skip.push_back(cur);
        }
        sp.out_channels = cur;
        plan.stages.push_back(std::move(sp));
    }

    if (cfg.mid_enabled) {
        StagePlan sp;
        sp.stage = StageId::MID;
        const long cs = cfg.channels(2);
        ElemPlan r1{ElemPlan::kRes, "mid.res1", 1, cur, cs, 0, 0};
        sp.elems.push_back(r1);
        cur = cs;
        if (cfg.mid_tx_depth > 0) {
            ElemPlan tx{ElemPlan::kTx, "mid.tx", 1, 0, 0, cs, cfg.mid_tx_depth};
            sp.elems.push_back(tx);
            sp.n_tx_layers = cfg.mid_tx_depth;
        }
        ElemPlan r2{ElemPlan::kRes, "mid.res2", 2, cs, cs, 0, 0};
        sp.elems.push_back(r2);
        sp.n_res = 2;
        sp.out_channels = cs;
        plan.stages.push_back(std::move(sp));
    }

    const StageId dec[3] = {StageId::UP1, StageId::UP2, StageId::UP3};
    const int dec_level[3] = {2, 1, 0};
    for (int i = 0; i < 3; ++i) {
        const int level = dec_level[i];
        StagePlan sp;
        sp.stage = dec[i];
        const long cs = cfg.channels(level);
        const long depth = cfg.depth(level);
        for (long p = 1; p <= cfg.tx_pairs_decoder; ++p) {
            if (skip.empty()) throw std::logic_error("unet plan: skip stack underflow");
            long sk = skip.back();
            skip.pop_back();
            std::string base = std::string(stage_prefix(sp.stage)) + ".p" + std::to_string(p);
            ElemPlan res;
            res.kind = ElemPlan::kRes;
            res.prefix = base + ".res";
            res.pair_index = static_cast<int>(p);
            res.c_in = cur + sk;
            res.c_out = cs;
            sp.elems.push_back(res);
            cur = cs;
            ++sp.n_res;
            if (depth > 0) {
                ElemPlan tx;
                tx.kind = ElemPlan::kTx;
                tx.prefix = base + ".tx";
                tx.pair_index = static_cast<int>(p);
                tx.channels = cs;
                tx.depth = depth;
                sp.elems.push_back(tx);
                sp.n_tx_layers += depth;
            }
        }
        if (level > 0) {
            sp.has_up = true;
            sp.resample_channels = cur;
        }
        sp.out_channels = cur;
        plan.stages.push_back(std::move(sp));
    }
    if (!skip.empty()) throw std::logic_error("unet plan: skip stack not fully consumed");
    return plan;
}

namespace {

using EmitFn = std::function<void(const std::string&, const std::vector<long>&, StageId, ParamKind,
                                  const InitSpec&)>;

void emit_conv(const EmitFn& fn, const std::string& prefix, long c_out, long c_in, long k,
               StageId stage, ParamKind kind) {
    fn(prefix + ".weight", {c_out, c_in, k, k}, stage, kind,
       InitSpec{InitSpec::kUniformFanIn, c_in * k * k});
    fn(prefix + ".bias", {c_out}, stage, kind, InitSpec{InitSpec::kZeros, 1});
}

void emit_linear(const EmitFn& fn, const std::string& prefix, long out, long in, StageId stage,
                 ParamKind kind, bool bias = true) {
    fn(prefix + ".weight", {out, in}, stage, kind, InitSpec{InitSpec::kUniformFanIn, in});
    if (bias) fn(prefix + ".bias", {out}, stage, kind, InitSpec{InitSpec::kZeros, 1});
}

void emit_norm(const EmitFn& fn, const std::string& prefix, long c, StageId stage, ParamKind kind) {
    fn(prefix + ".weight", {c}, stage, kind, InitSpec{InitSpec::kOnes, 1});
    fn(prefix + ".bias", {c}, stage, kind, InitSpec{InitSpec::kZeros, 1});
}

void emit_res(const EmitFn& fn, const ElemPlan& e, long ted, StageId stage) {
    emit_norm(fn, e.prefix + ".norm1", e.c_in, stage, ParamKind::Res);
    emit_conv(fn, e.prefix + ".conv1", e.c_out, e.c_in, 3, stage, ParamKind::Res);
    emit_linear(fn, e.prefix + ".temb", e.c_out, ted, stage, ParamKind::Res);
    emit_norm(fn, e.prefix + ".norm2", e.c_out, stage, ParamKind::Res);
    emit_conv(fn, e.prefix + ".conv2", e.c_out, e.c_out, 3, stage, ParamKind::Res);
    if (e.c_in != e.c_out) emit_conv(fn, e.prefix + ".skip", e.c_out, e.c_in, 1, stage, ParamKind::Res);
}

void emit_tx(const EmitFn& fn, const ElemPlan& e, long ctx_dim, StageId stage) {
    const long c = e.channels;
    emit_norm(fn, e.prefix + ".norm_in", c, stage, ParamKind::Tx);
    emit_linear(fn, e.prefix + ".proj_in", c, c, stage, ParamKind::Tx);
    for (long j = 1; j <= e.depth; ++j) {
        std::string lp = e.prefix + ".l" + std::to_string(j);
        emit_norm(fn, lp + ".ln1", c, stage, ParamKind::Tx);
        emit_linear(fn, lp + ".sa.q", c, c, stage, ParamKind::Tx, false);
        emit_linear(fn, lp + ".sa.k", c, c, stage, ParamKind::Tx, false);
        emit_linear(fn, lp + ".sa.v", c, c, stage, ParamKind::Tx, false);
        emit_linear(fn, lp + ".sa.out", c, c, stage, ParamKind::Tx);
        emit_norm(fn, lp + ".ln2", c, stage, ParamKind::Tx);
        emit_linear(fn, lp + ".ca.q", c, c, stage, ParamKind::Tx, false);
        emit_linear(fn, lp + ".ca.k", c, ctx_dim, stage, ParamKind::Tx, false);
        emit_linear(fn, lp + ".ca.v", c, ctx_dim, stage, ParamKind::Tx, false);
        emit_linear(fn, lp + ".ca.out", c, c, stage, ParamKind::Tx);
        emit_norm(fn, lp + ".ln3", c, stage, ParamKind::Tx);
        // Gated feed-forward: the first projection produces value and gate
        // halves, each 4x the token width.
        emit_linear(fn, lp + ".ff.w1", 8 * c, c, stage, ParamKind::Tx);
        emit_linear(fn, lp + ".ff.w2", c, 4 * c, stage, ParamKind::Tx);
    }
    emit_linear(fn, e.prefix + ".proj_out", c, c, stage, ParamKind::Tx);
}

}  // namespace

void for_each_unet_param(const UNetPlan& plan, const EmitFn& fn) {
    const UNetConfig& cfg = plan.cfg;
    const long ted = cfg.time_embed_dim;
    emit_conv(fn, "conv_in", cfg.channels(0), cfg.in_channels, 3, StageId::DW1, ParamKind::Other);
    emit_linear(fn, "time_mlp.fc1", ted, ted / 4, StageId::DW1, ParamKind::Other);
    emit_linear(fn, "time_mlp.fc2", ted, ted, StageId::DW1, ParamKind::Other);
    for (const auto& sp : plan.stages) {
        for (const auto& e : sp.elems) {
            if (e.kind == ElemPlan::kRes)
                emit_res(fn, e, ted, sp.stage);
            else
                emit_tx(fn, e, cfg.context_dim, sp.stage);
        }
        if (sp.has_down)
            emit_conv(fn, std::string(stage_prefix(sp.stage)) + ".down.conv", sp.resample_channels,
                      sp.resample_channels, 3, sp.stage, ParamKind::Other);
        if (sp.has_up)
            emit_conv(fn, std::string(stage_prefix(sp.stage)) + ".up.conv", sp.resample_channels,
                      sp.resample_channels, 3, sp.stage, ParamKind::Other);
    }
    emit_norm(fn, "out.norm", cfg.channels(0), StageId::UP3, ParamKind::Other);
    emit_conv(fn, "out.conv", cfg.out_channels, cfg.channels(0), 3, StageId::UP3, ParamKind::Other);
}

ParamBudget count_params(const UNetConfig& cfg) {
    UNetPlan plan = plan_unet(cfg);
    ParamBudget budget;
    for (StageId s : kAllStages) budget.per_stage[s] = StageBudget{};
    for_each_unet_param(plan, [&](const std::string&, const std::vector<long>& shape, StageId stage,
                                  ParamKind kind, const InitSpec&) {
        long n = shape_numel(shape);
        budget.total += n;
        auto& sb = budget.per_stage[stage];
        if (kind == ParamKind::Res)
            sb.res += n;
        else if (kind == ParamKind::Tx)
            sb.tx += n;
        else
            sb.other += n;
    });
    for (StageId s : kAllStages) {
        const auto& sb = budget.per_stage[s];
        StageFractions f;
        if (budget.total > 0) {
            f.res = static_cast<double>(sb.res) / static_cast<double>(budget.total);
            f.tx = static_cast<double>(sb.tx) / static_cast<double>(budget.total);
            f.other = static_cast<double>(sb.other) / static_cast<double>(budget.total);
        }
        budget.fractions[s] = f;
    }
    return budget;
}

UNetModel build_unet(const UNetConfig& cfg, std::uint64_t seed, Dtype dtype) {
    UNetModel m;
    m.config = cfg;
    m.plan = plan_unet(cfg);
    m.dtype = dtype;
    m.seed = seed;
    for_each_unet_param(m.plan, [&](const std::string& name, const std::vector<long>& shape,
                                    StageId, ParamKind, const InitSpec& init) {
        Tensor t(shape, dtype);
        switch (init.kind) {
            case InitSpec::kZeros:
                break;
            case InitSpec::kOnes:
                t.fill(1.0);
                break;
            case InitSpec::kUniformFanIn: {
                double bound = 1.0 / std::sqrt(static_cast<double>(init.fan_in));
                Rng rng = named_rng(seed, name);
                rng.fill_uniform(t, -bound, bound);
                break;
            }
        }
        m.params.add(name, std::move(t), /*trainable=*/true);
    });
    return m;
}

void freeze(ParameterStore& params) {
    for (const auto& p : params.all()) {
        p->trainable = false;
        p->requires_grad = false;
    }
}

// ---------------------------------------------------------------------------
// Forward pass.

namespace {

struct CaptureTable {
    // (stage, kind, index) -> record slots
    std::map<std::tuple<int, int, int>, std::vector<std::size_t>> slots;
    std::vector<TapRecord>* records = nullptr;

    static std::tuple<int, int, int> key(StageId s, TapKind k, int index) {
        return {static_cast<int>(s), static_cast<int>(k), index};
    }

    bool wants(StageId s, TapKind k, int index) const {
        return slots.count(key(s, k, index)) > 0;
    }

    bool wants_attn(StageId s, int index) const {
        auto it = slots.find(key(s, TapKind::SA, index));
        if (it == slots.end()) return false;
        for (std::size_t slot : it->second)
            if ((*records)[slot].spec.capture_attn) return true;
        return false;
    }

    void store(StageId s, TapKind k, int index, const NodePtr& node) {
        auto it = slots.find(key(s, k, index));
        if (it == slots.end()) return;
        for (std::size_t slot : it->second) (*records)[slot].value = node;
    }

    void store_attn(StageId s, int index, Tensor probs) {
        auto it = slots.find(key(s, TapKind::SA, index));
        if (it == slots.end()) return;
        for (std::size_t slot : it->second)
            if ((*records)[slot].spec.capture_attn) (*records)[slot].attn_probs = probs;
    }
};

Tensor head_averaged_probs(const Tensor& probs, long batch, long heads) {
    // probs: [B*H, T, Tk] -> [B, T, Tk]
    long t = probs.dim(1), tk = probs.dim(2);
    Tensor out({batch, t, tk}, probs.dtype());
    dispatch_dtype(probs.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = probs.data<T>();
        T* dst = out.data<T>();
        const T inv = static_cast<T>(1.0 / static_cast<double>(heads));
        for (long b = 0; b < batch; ++b)
            for (long i = 0; i < t * tk; ++i) {
                double acc = 0.0;
                for (long h = 0; h < heads; ++h)
                    acc += static_cast<double>(src[(b * heads + h) * t * tk + i]);
                dst[b * t * tk + i] = static_cast<T>(acc) * inv;
            }
    });
    return out;
}

struct AttnResult {
    NodePtr out;
    NodePtr probs;
};

AttnResult attention(const ParameterStore& P, const std::string& prefix, const NodePtr& q_in,
                     const NodePtr& kv_in, long heads, long head_dim) {
    const long b = q_in->dim(0), t = q_in->dim(1), c = q_in->dim(2);
    const long tk = kv_in->dim(1);
    auto q = ops::linear(q_in, P.get(prefix + ".q.weight"), nullptr);
    auto k = ops::linear(kv_in, P.get(prefix + ".k.weight"), nullptr);
    auto v = ops::linear(kv_in, P.get(prefix + ".v.weight"), nullptr);
    auto split = [&](NodePtr x, long tx) {
        x = ops::reshape(x, {b, tx, heads, head_dim});
        x = ops::permute(x, {0, 2, 1, 3});
        return ops::reshape(x, {b * heads, tx, head_dim});
    };
    q = split(q, t);
    k = split(k, tk);
    v = split(v, tk);
    auto scores = ops::scale(ops::bmm(q, k, /*transpose_b=*/true),
                             1.0 / std::sqrt(static_cast<double>(head_dim)));
    auto probs = ops::softmax_lastdim(scores);
    auto mixed = ops::bmm(probs, v);
    mixed = ops::reshape(mixed, {b, heads, t, head_dim});
    mixed = ops::permute(mixed, {0, 2, 1, 3});
    mixed = ops::reshape(mixed, {b, t, c});
    auto out = ops::linear(mixed, P.get(prefix + ".out.weight"), P.get(prefix + ".out.bias"));
    return {out, probs};
}

}  // namespace

ForwardResult unet_forward(const UNetModel& m, const NodePtr& z_t,
                           const std::vector<long>& timesteps, const NodePtr& ctx,
                           const std::vector<FeatureTapSpec>& taps) {
    const UNetConfig& cfg = m.config;
    const ParameterStore& P = m.params;

    if (z_t->value.rank() != 4 || z_t->dim(1) != cfg.in_channels)
        throw std::invalid_argument("forward: input must be [B," + std::to_string(cfg.in_channels) +
                                    ",H,W], got " + z_t->value.shape_str());
    const long batch = z_t->dim(0);
    const long height = z_t->dim(2), width = z_t->dim(3);
    if (height % 4 != 0 || width % 4 != 0)
        throw std::invalid_argument("forward: spatial dims must be divisible by 4");
    if (static_cast<long>(timesteps.size()) != batch)
        throw std::invalid_argument("forward: timestep count must match batch");
    for (long t : timesteps) {
        if (t < 0 || (m.timestep_limit > 0 && t >= m.timestep_limit))
            throw std::out_of_range("forward: timestep " + std::to_string(t) +
                                    " out of schedule range [0," +
                                    std::to_string(m.timestep_limit) + ")");
    }
    bool model_has_tx = false;
    for (const auto& sp : m.plan.stages) model_has_tx = model_has_tx || sp.n_tx_layers > 0;
    if (model_has_tx) {
        if (!ctx || ctx->value.rank() != 3 || ctx->dim(0) != batch ||
            ctx->dim(2) != cfg.context_dim)
            throw std::invalid_argument("forward: context must be [B,L," +
                                        std::to_string(cfg.context_dim) + "]");
    }

    ForwardResult result;
    result.records.reserve(taps.size());
    CaptureTable captures;
    captures.records = &result.records;
    for (const auto& spec : taps) {
        const StagePlan* sp = m.plan.find_stage(spec.stage);
        if (!sp) throw std::invalid_argument("invalid tap " + spec.to_string() + ": stage not present");
        switch (spec.kind) {
            case TapKind::SA:
            case TapKind::CA:
            case TapKind::FFN:
                if (spec.block_index < 1 || spec.block_index > sp->n_tx_layers)
                    throw std::invalid_argument("invalid tap " + spec.to_string() +
                                                ": no transformer layer at this index (stage has " +
                                                std::to_string(sp->n_tx_layers) + ")");
                break;
            case TapKind::Res:
                if (spec.block_index < 1 || spec.block_index > sp->n_res)
                    throw std::invalid_argument("invalid tap " + spec.to_string() +
                                                ": no residual block at this index (stage has " +
                                                std::to_string(sp->n_res) + ")");
                break;
            case TapKind::LF:
                if (spec.block_index != 0)
                    throw std::invalid_argument("invalid tap " + spec.to_string() +
                                                ": LF taps use block_index 0");
                break;
        }
        std::size_t slot = result.records.size();
        result.records.push_back(TapRecord{spec, nullptr, std::nullopt});
        captures.slots[CaptureTable::key(spec.stage, spec.kind, spec.block_index)].push_back(slot);
    }

    // Timestep embedding: sinusoid of dim ted/4, then a two-layer MLP.
    const long ted = cfg.time_embed_dim;
    const long sd = ted / 4;
    const long half = sd / 2;
    Tensor sin_emb({batch, sd}, m.dtype);
    for (long b = 0; b < batch; ++b)
        for (long i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                   static_cast<double>(half));
            double v = static_cast<double>(timesteps[static_cast<std::size_t>(b)]) * freq;
            sin_emb.set(b * sd + i, std::sin(v));
            sin_emb.set(b * sd + half + i, std::cos(v));
        }
    auto temb = ops::linear(make_leaf(std::move(sin_emb)), P.get("time_mlp.fc1.weight"),
                            P.get("time_mlp.fc1.bias"));
    temb = ops::silu(temb);
    temb = ops::linear(temb, P.get("time_mlp.fc2.weight"), P.get("time_mlp.fc2.bias"));
    auto temb_act = ops::silu(temb);

    auto run_res = [&](const ElemPlan& e, NodePtr x) {
        auto h = ops::group_norm(x, P.get(e.prefix + ".norm1.weight"),
                                 P.get(e.prefix + ".norm1.bias"), norm_groups(e.c_in));
        h = ops::silu(h);
        h = ops::conv2d(h, P.get(e.prefix + ".conv1.weight"), P.get(e.prefix + ".conv1.bias"), 1, 1);
        auto tv = ops::linear(temb_act, P.get(e.prefix + ".temb.weight"),
                              P.get(e.prefix + ".temb.bias"));
        h = ops::add_per_sample_channels(h, tv);
        h = ops::group_norm(h, P.get(e.prefix + ".norm2.weight"), P.get(e.prefix + ".norm2.bias"),
                            norm_groups(e.c_out));
        h = ops::silu(h);
        h = ops::conv2d(h, P.get(e.prefix + ".conv2.weight"), P.get(e.prefix + ".conv2.bias"), 1, 1);
        NodePtr sk = x;
        if (e.c_in != e.c_out)
            sk = ops::conv2d(x, P.get(e.prefix + ".skip.weight"), P.get(e.prefix + ".skip.bias"), 1,
                             0);
        return ops::add(h, sk);
    };

    auto run_tx = [&](const ElemPlan& e, StageId stage, NodePtr x, int& layer_counter) {
        const long c = e.channels;
        const long heads = c / cfg.head_dim;
        const long hh = x->dim(2), ww = x->dim(3);
        const long tokens = hh * ww;
        auto residual = x;
        auto h = ops::group_norm(x, P.get(e.prefix + ".norm_in.weight"),
                                 P.get(e.prefix + ".norm_in.bias"), norm_groups(c));
        h = ops::reshape(h, {batch, c, tokens});
        h = ops::permute(h, {0, 2, 1});
        h = ops::linear(h, P.get(e.prefix + ".proj_in.weight"), P.get(e.prefix + ".proj_in.bias"));
        for (long j = 1; j <= e.depth; ++j) {
            ++layer_counter;
            std::string lp = e.prefix + ".l" + std::to_string(j);
            auto sa_in = ops::layer_norm(h, P.get(lp + ".ln1.weight"), P.get(lp + ".ln1.bias"));
            auto sa = attention(P, lp + ".sa", sa_in, sa_in, heads, cfg.head_dim);
            captures.store(stage, TapKind::SA, layer_counter, sa.out);
            if (captures.wants_attn(stage, layer_counter))
                captures.store_attn(stage, layer_counter,
                                    head_averaged_probs(sa.probs->value, batch, heads));
            h = ops::add(h, sa.out);

            auto ca_in = ops::layer_norm(h, P.get(lp + ".ln2.weight"), P.get(lp + ".ln2.bias"));
            auto ca = attention(P, lp + ".ca", ca_in, ctx, heads, cfg.head_dim);
            captures.store(stage, TapKind::CA, layer_counter, ca.out);
            h = ops::add(h, ca.out);

            auto ff_in = ops::layer_norm(h, P.get(lp + ".ln3.weight"), P.get(lp + ".ln3.bias"));
            auto u = ops::linear(ff_in, P.get(lp + ".ff.w1.weight"), P.get(lp + ".ff.w1.bias"));
            auto val = ops::slice_lastdim(u, 0, 4 * c);
            auto gate = ops::slice_lastdim(u, 4 * c, 4 * c);
            auto ff = ops::linear(ops::mul(val, ops::gelu(gate)), P.get(lp + ".ff.w2.weight"),
                                  P.get(lp + ".ff.w2.bias"));
            captures.store(stage, TapKind::FFN, layer_counter, ff);
            h = ops::add(h, ff);
        }
        h = ops::linear(h, P.get(e.prefix + ".proj_out.weight"), P.get(e.prefix + ".proj_out.bias"));
        h = ops::permute(h, {0, 2, 1});
        h = ops::reshape(h, {batch, c, hh, ww});
        return ops::add(residual, h);
    };

    std::vector<NodePtr> skips;
    auto x = ops::conv2d(z_t, P.get("conv_in.weight"), P.get("conv_in.bias"), 1, 1);
    skips.push_back(x);

    for (const auto& sp : m.plan.stages) {
        const bool encoder = stage_is_encoder(sp.stage);
        const bool decoder = stage_is_decoder(sp.stage);
        int layer_counter = 0;
        int res_counter = 0;
        for (std::size_t i = 0; i < sp.elems.size(); ++i) {
            const ElemPlan& e = sp.elems[i];
            if (e.kind == ElemPlan::kRes) {
                if (decoder) {
                    NodePtr sk = skips.back();
                    skips.pop_back();
                    x = ops::concat_channels(x, sk);
                }
                x = run_res(e, x);
                ++res_counter;
                captures.store(sp.stage, TapKind::Res, res_counter, x);
                bool pair_has_tx = i + 1 < sp.elems.size() &&
                                   sp.elems[i + 1].kind == ElemPlan::kTx &&
                                   sp.elems[i + 1].pair_index == e.pair_index;
                if (encoder && !pair_has_tx) skips.push_back(x);
            } else {
                x = run_tx(e, sp.stage, x, layer_counter);
                if (encoder) skips.push_back(x);
            }
        }
        captures.store(sp.stage, TapKind::LF, 0, x);
        if (sp.has_down) {
            x = ops::conv2d(x, P.get(std::string(stage_prefix(sp.stage)) + ".down.conv.weight"),
                            P.get(std::string(stage_prefix(sp.stage)) + ".down.conv.bias"), 2, 1);
            skips.push_back(x);
        }
        if (sp.has_up) {
            x = ops::upsample_nearest2x(x);
            x = ops::conv2d(x, P.get(std::string(stage_prefix(sp.stage)) + ".up.conv.weight"),
                            P.get(std::string(stage_prefix(sp.stage)) + ".up.conv.bias"), 1, 1);
        }
    }

    x = ops::group_norm(x, P.get("out.norm.weight"), P.get("out.norm.bias"),
                        norm_groups(cfg.channels(0)));
    x = ops::silu(x);
    result.eps_pred =
        ops::conv2d(x, P.get("out.conv.weight"), P.get("out.conv.bias"), 1, 1);

    for (const auto& rec : result.records)
        if (!rec.value) throw std::logic_error("tap " + rec.spec.to_string() + " was never reached");
    return result;
}

}  // namespace distillforge
