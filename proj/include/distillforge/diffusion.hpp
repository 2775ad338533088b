#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "distillforge/rng.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

/// Discrete-time noising schedule. betas rise linearly; alpha_bars is the
/// running product of (1 - beta); sigmas[t] = sqrt((1-ab_t)/ab_t) is the
/// noise level ladder the Euler sampler walks down.
struct DiffusionSchedule {
    long T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    std::vector<double> sigmas;

    double sigma_max() const { return sigmas.back(); }
};

DiffusionSchedule make_schedule(long T, double beta_start, double beta_end);

/// x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps, per batch element.
Tensor q_sample(const Tensor& x0, const std::vector<long>& t, const Tensor& eps,
                const DiffusionSchedule& schedule);

/// eps_uncond + scale * (eps_cond - eps_uncond).
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale);

struct SamplerConfig {
    long steps = 50;
    double cfg_scale = 3.5;
    std::uint64_t seed = 0;
};

/// Denoiser contract: predicts eps from the pre-scaled input x/sqrt(sigma^2+1)
/// (exactly what the net saw as x_t during training), the discrete timestep
/// index, and a context (the conditional or the null one).
using DenoiserFn = std::function<Tensor(const Tensor& x_in, long t_index, const Tensor& ctx)>;

/// Deterministic Euler sampler over a descending sigma sub-ladder chosen by
/// evenly spaced timestep indices, terminated at sigma 0.
///
/// The walk lives in the x0-scale variable x = x0 + sigma * eps. At each
/// rung: feed x/sqrt(sigma^2+1) to the denoiser, combine predictions with
/// classifier-free guidance, take x0_hat = x - sigma*eps_hat, and step x by
/// (sigma_next - sigma) * (x - x0_hat) / sigma. The result is clamped to
/// [-1, 1].
Tensor euler_sample(const DenoiserFn& denoiser, const DiffusionSchedule& schedule,
                    const SamplerConfig& cfg, const Tensor& ctx, const Tensor& null_ctx,
                    const std::vector<long>& sample_shape, Dtype dtype = Dtype::F32);

/// The sigma rungs euler_sample visits (including the final 0) and the
/// discrete timestep passed to the denoiser at each of the `steps` rungs.
struct SigmaLadder {
    std::vector<double> sigmas;     // length steps + 1, strictly decreasing to 0
    std::vector<long> timesteps;    // length steps
};
SigmaLadder make_sigma_ladder(const DiffusionSchedule& schedule, long steps);

}  // namespace distillforge
