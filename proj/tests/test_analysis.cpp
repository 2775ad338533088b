#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "distillforge/analysis.hpp"

using namespace distillforge;

namespace {

UNetConfig sdxl_reference() {
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

// Cyclic Jacobi eigendecomposition of a symmetric matrix; independent oracle
// for the SVD-based PCA implementation.
void jacobi_eig(std::vector<double> a, long d, std::vector<double>& vecs,
                std::vector<double>& vals) {
    vecs.assign(static_cast<std::size_t>(d * d), 0.0);
    for (long i = 0; i < d; ++i) vecs[static_cast<std::size_t>(i * d + i)] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (long p = 0; p < d; ++p)
            for (long q = p + 1; q < d; ++q) off += std::fabs(a[static_cast<std::size_t>(p * d + q)]);
        if (off < 1e-15) break;
        for (long p = 0; p < d - 1; ++p) {
            for (long q = p + 1; q < d; ++q) {
                double apq = a[static_cast<std::size_t>(p * d + q)];
                if (std::fabs(apq) < 1e-18) continue;
                double app = a[static_cast<std::size_t>(p * d + p)];
                double aqq = a[static_cast<std::size_t>(q * d + q)];
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1 + zeta * zeta));
                double c = 1.0 / std::sqrt(1 + t * t);
                double s = c * t;
                for (long i = 0; i < d; ++i) {
                    double aip = a[static_cast<std::size_t>(i * d + p)];
                    double aiq = a[static_cast<std::size_t>(i * d + q)];
                    a[static_cast<std::size_t>(i * d + p)] = c * aip - s * aiq;
                    a[static_cast<std::size_t>(i * d + q)] = s * aip + c * aiq;
                }
                for (long i = 0; i < d; ++i) {
                    double api = a[static_cast<std::size_t>(p * d + i)];
                    double aqi = a[static_cast<std::size_t>(q * d + i)];
                    a[static_cast<std::size_t>(p * d + i)] = c * api - s * aqi;
                    a[static_cast<std::size_t>(q * d + i)] = s * api + c * aqi;
                }
                for (long i = 0; i < d; ++i) {
                    double vip = vecs[static_cast<std::size_t>(i * d + p)];
                    double viq = vecs[static_cast<std::size_t>(i * d + q)];
                    vecs[static_cast<std::size_t>(i * d + p)] = c * vip - s * viq;
                    vecs[static_cast<std::size_t>(i * d + q)] = s * vip + c * viq;
                }
            }
        }
    }
    vals.resize(static_cast<std::size_t>(d));
    for (long i = 0; i < d; ++i) vals[static_cast<std::size_t>(i)] =
        a[static_cast<std::size_t>(i * d + i)];
}

}  // namespace

TEST_CASE("lowest-level transformer share sits at the published 83%") {
    auto budget = param_distribution(sdxl_reference());
    double share = lowest_level_tx_share(budget);
    CHECK(share > 0.80);
    CHECK(share < 0.86);

    double frac_sum = 0.0;
    for (const auto& [st, f] : budget.fractions) frac_sum += f.res + f.tx + f.other;
    CHECK(frac_sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("zero-depth configs have zero transformer fractions") {
    UNetConfig cfg = sdxl_reference();
    cfg.tx_depths = {0, 0, 0};
    cfg.mid_tx_depth = 0;
    cfg.base_channels = 8;
    cfg.head_dim = 8;
    cfg.context_dim = 8;
    cfg.time_embed_dim = 32;
    auto budget = param_distribution(cfg);
    for (const auto& [st, f] : budget.fractions) CHECK(f.tx == 0.0);
    long stage_sum = 0;
    for (const auto& [st, sb] : budget.per_stage) stage_sum += sb.total();
    CHECK(stage_sum == budget.total);
    CHECK(budget.total == count_params(cfg).total);
}

TEST_CASE("cosine curve fixed points") {
    Tensor a = Tensor::from_values({1, 4}, {1.0, 2.0, 3.0, 4.0}, Dtype::F64);
    Tensor b = Tensor::from_values({1, 4}, {2.0, 4.0, 6.0, 8.0}, Dtype::F64);  // same direction
    Tensor c = Tensor::from_values({1, 4}, {-2.0, 1.0, 0.0, 0.0}, Dtype::F64);  // orthogonal to a

    auto same = cross_layer_cosine({a, b}, false);
    REQUIRE(same.values.size() == 1);
    CHECK(same.values[0] == doctest::Approx(1.0).epsilon(1e-12));

    auto ortho = cross_layer_cosine({a, c}, false);
    CHECK(ortho.values[0] == doctest::Approx(0.0).epsilon(1e-12));

    // Positive scaling invariance.
    Tensor a2 = a;
    for (long i = 0; i < a2.numel(); ++i) a2.set(i, a2.get(i) * 37.5);
    auto scaled = cross_layer_cosine({a2, b}, false);
    CHECK(scaled.values[0] == doctest::Approx(same.values[0]).epsilon(1e-12));
}

TEST_CASE("cosine curve matches a scalar-loop oracle on random dumps") {
    Rng rng(31);
    std::vector<Tensor> layers;
    for (int l = 0; l < 3; ++l) {
        Tensor t({2, 5, 3}, Dtype::F64);
        rng.fill_normal(t);
        layers.push_back(t);
    }
    auto curve = cross_layer_cosine(layers, true);
    REQUIRE(curve.values.size() == 2);
    CHECK(curve.index == std::vector<double>{0.5, 1.0});

    for (int l = 1; l < 3; ++l) {
        double batch_acc = 0.0;
        for (long b = 0; b < 2; ++b) {
            double dot = 0, na = 0, nb = 0;
            for (long i = 0; i < 15; ++i) {
                double va = layers[static_cast<std::size_t>(l)].get(b * 15 + i);
                double vb = layers[static_cast<std::size_t>(l - 1)].get(b * 15 + i);
                dot += va * vb;
                na += va * va;
                nb += vb * vb;
            }
            batch_acc += dot / std::sqrt(na * nb);
        }
        CHECK(std::fabs(curve.values[static_cast<std::size_t>(l - 1)] - batch_acc / 2.0) < 1e-6);
    }
}

TEST_CASE("zero-norm layers yield 0 with a warning") {
    Tensor a = Tensor::zeros({1, 3}, Dtype::F64);
    Tensor b = Tensor::from_values({1, 3}, {1.0, 2.0, 3.0}, Dtype::F64);
    auto curve = cross_layer_cosine({a, b}, false);
    CHECK(curve.values[0] == 0.0);
    CHECK(curve.zero_norm_warning);
    CHECK_THROWS_AS(cross_layer_cosine({a}, false), std::invalid_argument);
}

TEST_CASE("rank-1 data concentrates all variance in the first component") {
    Rng rng(5);
    Tensor u({8, 1}, Dtype::F64), v({1, 6}, Dtype::F64);
    rng.fill_normal(u);
    rng.fill_normal(v);
    Tensor x({8, 6}, Dtype::F64);
    for (long i = 0; i < 8; ++i)
        for (long j = 0; j < 6; ++j) x.set(i * 6 + j, u.get(i) * v.get(j));
    auto pca = attention_pca(x, 3);
    double total = std::accumulate(pca.explained_variance.begin(), pca.explained_variance.end(), 0.0);
    CHECK(pca.explained_variance[0] / total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("pca matches a dense eigendecomposition oracle up to sign") {
    Rng rng(17);
    const long n = 20, d = 16, k = 3;
    Tensor x({n, d}, Dtype::F64);
    rng.fill_normal(x);
    auto pca = attention_pca(x, k);

    // Oracle: eigendecomposition of the covariance of the centered data.
    std::vector<double> cov(static_cast<std::size_t>(d * d), 0.0);
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (long j = 0; j < d; ++j) {
        for (long i = 0; i < n; ++i) mean[static_cast<std::size_t>(j)] += x.get(i * d + j);
        mean[static_cast<std::size_t>(j)] /= n;
    }
    for (long a = 0; a < d; ++a)
        for (long b = 0; b < d; ++b) {
            double acc = 0;
            for (long i = 0; i < n; ++i)
                acc += (x.get(i * d + a) - mean[static_cast<std::size_t>(a)]) *
                       (x.get(i * d + b) - mean[static_cast<std::size_t>(b)]);
            cov[static_cast<std::size_t>(a * d + b)] = acc / (n - 1);
        }
    std::vector<double> vecs, vals;
    jacobi_eig(cov, d, vecs, vals);
    std::vector<long> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](long a, long b) { return vals[static_cast<std::size_t>(a)] >
                                           vals[static_cast<std::size_t>(b)]; });

    for (long c = 0; c < k; ++c) {
        long j = order[static_cast<std::size_t>(c)];
        CHECK(std::fabs(pca.explained_variance[static_cast<std::size_t>(c)] -
                        vals[static_cast<std::size_t>(j)]) <
              1e-6 * std::max(1.0, std::fabs(vals[static_cast<std::size_t>(j)])));
        // Align oracle vector sign with the implementation convention.
        double flip = 0.0;
        for (long i = 0; i < d && flip == 0.0; ++i) {
            double vi = vecs[static_cast<std::size_t>(i * d + j)];
            if (std::fabs(vi) > 1e-12) flip = vi > 0 ? 1.0 : -1.0;
        }
        for (long i = 0; i < d; ++i)
            CHECK(std::fabs(pca.components.get(c * d + i) -
                            flip * vecs[static_cast<std::size_t>(i * d + j)]) < 1e-6);
    }
}

TEST_CASE("pca components are orthonormal and reconstruct the centered data") {
    Rng rng(23);
    const long n = 12, d = 6;
    Tensor x({n, d}, Dtype::F64);
    rng.fill_normal(x);
    auto pca = attention_pca(x, d);

    for (long a = 0; a < d; ++a)
        for (long b = 0; b < d; ++b) {
            double dot = 0;
            for (long i = 0; i < d; ++i) dot += pca.components.get(a * d + i) *
                                                pca.components.get(b * d + i);
            CHECK(std::fabs(dot - (a == b ? 1.0 : 0.0)) < 1e-6);
        }

    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (long j = 0; j < d; ++j) {
        for (long i = 0; i < n; ++i) mean[static_cast<std::size_t>(j)] += x.get(i * d + j);
        mean[static_cast<std::size_t>(j)] /= n;
    }
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < d; ++j) {
            double recon = 0;
            for (long c = 0; c < d; ++c)
                recon += pca.projections.get(i * d + c) * pca.components.get(c * d + j);
            CHECK(std::fabs(recon - (x.get(i * d + j) - mean[static_cast<std::size_t>(j)])) < 1e-5);
        }
}

TEST_CASE("pca handles isotropic and degenerate inputs") {
    Rng rng(29);
    Tensor iso({4000, 4}, Dtype::F64);
    rng.fill_normal(iso);
    auto pca = attention_pca(iso, 4);
    for (double ev : pca.explained_variance) CHECK(ev == doctest::Approx(1.0).epsilon(0.12));

    Tensor flat({5, 3}, Dtype::F64);
    flat.fill(0.37);
    auto degenerate = attention_pca(flat, 3);
    for (double ev : degenerate.explained_variance) CHECK(ev == doctest::Approx(0.0));
    for (long a = 0; a < 3; ++a)
        for (long b = 0; b < 3; ++b) {
            double dot = 0;
            for (long i = 0; i < 3; ++i)
                dot += degenerate.components.get(a * 3 + i) * degenerate.components.get(b * 3 + i);
            CHECK(std::fabs(dot - (a == b ? 1.0 : 0.0)) < 1e-6);
        }

    CHECK_THROWS_AS(attention_pca(flat, 4), std::invalid_argument);
    Tensor one({1, 3}, Dtype::F64);
    CHECK_THROWS_AS(attention_pca(one, 1), std::invalid_argument);
}
