#include "distillforge/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace distillforge {

ParamBudget param_distribution(const UNetConfig& cfg) { return count_params(cfg); }

double lowest_level_tx_share(const ParamBudget& budget) {
    if (budget.total == 0) return 0.0;
    long tx = 0;
    for (StageId s : {StageId::DW3, StageId::MID, StageId::UP1}) {
        auto it = budget.per_stage.find(s);
        if (it != budget.per_stage.end()) tx += it->second.tx;
    }
    return static_cast<double>(tx) / static_cast<double>(budget.total);
}

SimilarityCurve cross_layer_cosine(const std::vector<Tensor>& layer_outputs,
                                   bool normalize_index) {
    if (layer_outputs.size() < 2)
        throw std::invalid_argument("cross_layer_cosine: need at least 2 layer outputs");
    const auto& shape = layer_outputs.front().shape();
    for (const auto& t : layer_outputs)
        if (t.shape() != shape)
            throw std::invalid_argument("cross_layer_cosine: layer outputs must share a shape");
    const long batch = shape.empty() ? 1 : shape[0];
    const long per = layer_outputs.front().numel() / batch;

    SimilarityCurve curve;
    const long layers = static_cast<long>(layer_outputs.size());
    for (long l = 1; l < layers; ++l) {
        const Tensor& a = layer_outputs[static_cast<std::size_t>(l)];
        const Tensor& b = layer_outputs[static_cast<std::size_t>(l - 1)];
        double acc = 0.0;
        for (long bi = 0; bi < batch; ++bi) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (long i = 0; i < per; ++i) {
                double va = a.get(bi * per + i), vb = b.get(bi * per + i);
                dot += va * vb;
                na += va * va;
                nb += vb * vb;
            }
            if (na == 0.0 || nb == 0.0) {
                curve.zero_norm_warning = true;
            } else {
                acc += dot / (std::sqrt(na) * std::sqrt(nb));
            }
        }
        curve.values.push_back(acc / static_cast<double>(batch));
        curve.index.push_back(normalize_index ? static_cast<double>(l) /
                                                    static_cast<double>(layers - 1)
                                              : static_cast<double>(l));
    }
    return curve;
}

PcaResult attention_pca(const Tensor& attn_maps, long k) {
    if (attn_maps.rank() != 2) throw std::invalid_argument("attention_pca: input must be [n,d]");
    const long n = attn_maps.dim(0), d = attn_maps.dim(1);
    if (n < 2) throw std::invalid_argument("attention_pca: need at least 2 rows");
    if (k < 1 || k > std::min(n, d))
        throw std::invalid_argument("attention_pca: need 1 <= k <= min(n,d)");

    // Centered data in double precision.
    std::vector<double> x(static_cast<std::size_t>(n * d));
    for (long j = 0; j < d; ++j) {
        double mean = 0.0;
        for (long i = 0; i < n; ++i) mean += attn_maps.get(i * d + j);
        mean /= static_cast<double>(n);
        for (long i = 0; i < n; ++i)
            x[static_cast<std::size_t>(i * d + j)] = attn_maps.get(i * d + j) - mean;
    }

    // One-sided Jacobi: orthogonalize the columns of X, accumulating the
    // right rotations into V. Afterwards X = U S with column norms S, and
    // the columns of V are the right singular vectors.
    std::vector<double> v(static_cast<std::size_t>(d * d), 0.0);
    for (long j = 0; j < d; ++j) v[static_cast<std::size_t>(j * d + j)] = 1.0;

    const double tol = 1e-14;
    for (int sweep = 0; sweep < 64; ++sweep) {
        bool rotated = false;
        for (long p = 0; p < d - 1; ++p) {
            for (long q = p + 1; q < d; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (long i = 0; i < n; ++i) {
                    double xp = x[static_cast<std::size_t>(i * d + p)];
                    double xq = x[static_cast<std::size_t>(i * d + q)];
                    app += xp * xp;
                    aqq += xq * xq;
                    apq += xp * xq;
                }
                if (std::fabs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
                rotated = true;
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                           (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double cs = 1.0 / std::sqrt(1.0 + t * t);
                double sn = cs * t;
                for (long i = 0; i < n; ++i) {
                    double xp = x[static_cast<std::size_t>(i * d + p)];
                    double xq = x[static_cast<std::size_t>(i * d + q)];
                    x[static_cast<std::size_t>(i * d + p)] = cs * xp - sn * xq;
                    x[static_cast<std::size_t>(i * d + q)] = sn * xp + cs * xq;
                }
                for (long i = 0; i < d; ++i) {
                    double vp = v[static_cast<std::size_t>(i * d + p)];
                    double vq = v[static_cast<std::size_t>(i * d + q)];
                    v[static_cast<std::size_t>(i * d + p)] = cs * vp - sn * vq;
                    v[static_cast<std::size_t>(i * d + q)] = sn * vp + cs * vq;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> var(static_cast<std::size_t>(d), 0.0);
    for (long j = 0; j < d; ++j) {
        double s2 = 0.0;
        for (long i = 0; i < n; ++i) {
            double xv = x[static_cast<std::size_t>(i * d + j)];
            s2 += xv * xv;
        }
        var[static_cast<std::size_t>(j)] = s2 / static_cast<double>(n - 1);
    }
    std::vector<long> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](long a, long b) { return var[static_cast<std::size_t>(a)] >
                                                  var[static_cast<std::size_t>(b)]; });

    PcaResult result;
    result.components = Tensor({k, d}, Dtype::F64);
    result.projections = Tensor({n, k}, Dtype::F64);
    for (long c = 0; c < k; ++c) {
        long j = order[static_cast<std::size_t>(c)];
        result.explained_variance.push_back(var[static_cast<std::size_t>(j)]);
        // Sign convention: first entry with magnitude > 1e-12 made positive.
        double flip = 1.0;
        for (long i = 0; i < d; ++i) {
            double vi = v[static_cast<std::size_t>(i * d + j)];
            if (std::fabs(vi) > 1e-12) {
                flip = vi > 0.0 ? 1.0 : -1.0;
                break;
            }
        }
        for (long i = 0; i < d; ++i)
            result.components.set(c * d + i, flip * v[static_cast<std::size_t>(i * d + j)]);
        for (long i = 0; i < n; ++i)
            result.projections.set(i * k + c, flip * x[static_cast<std::size_t>(i * d + j)]);
    }
    return result;
}

std::string dump_entry_name(const FeatureTapSpec& spec) {
    return std::string(stage_prefix(spec.stage)) + "." + tap_kind_name(spec.kind) + "." +
           std::to_string(spec.block_index);
}

void export_tap_dump(const Model& model, const Batch& batch, const DiffusionSchedule& schedule,
                     std::uint64_t seed, const std::vector<FeatureTapSpec>& taps,
                     const std::string& path) {
    Rng rng(seed, 0xd0b6u);
    const long b = batch.x0.dim(0);
    std::vector<long> t;
    for (long i = 0; i < b; ++i)
        t.push_back(static_cast<long>(rng.uniform_index(static_cast<std::uint64_t>(schedule.T))));
    Tensor eps(batch.x0.shape(), model.unet.dtype);
    rng.fill_normal(eps);
    Tensor x0 = batch.x0.dtype() == model.unet.dtype ? batch.x0 : batch.x0.cast(model.unet.dtype);
    auto z = make_leaf(q_sample(x0, t, eps, schedule));
    auto ctx = embed_captions(model.text_table, batch.captions);
    auto out = unet_forward(model.unet, z, t, ctx, taps);

    std::vector<DumpEntry> entries;
    for (const auto& rec : out.records) {
        DumpEntry e;
        e.name = dump_entry_name(rec.spec);
        e.stage = stage_name(rec.spec.stage);
        e.block_index = rec.spec.block_index;
        e.kind = tap_kind_name(rec.spec.kind);
        e.tensor = rec.tensor();
        entries.push_back(std::move(e));
        if (rec.attn_probs) {
            DumpEntry a;
            a.name = dump_entry_name(rec.spec) + ".attn";
            a.stage = stage_name(rec.spec.stage);
            a.block_index = rec.spec.block_index;
            a.kind = "SA-attn";
            a.tensor = *rec.attn_probs;
            entries.push_back(std::move(a));
        }
    }
    write_dump(path, entries);
}

}  // namespace distillforge
