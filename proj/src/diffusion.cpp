#include "distillforge/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace distillforge {

DiffusionSchedule make_schedule(long T, double beta_start, double beta_end) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start < beta_end < 1");
    DiffusionSchedule s;
    s.T = T;
    s.betas.resize(static_cast<std::size_t>(T));
    s.alphas.resize(static_cast<std::size_t>(T));
    s.alpha_bars.resize(static_cast<std::size_t>(T));
    s.sigmas.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (long t = 0; t < T; ++t) {
        double beta = beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                       static_cast<double>(T - 1);
        s.betas[static_cast<std::size_t>(t)] = beta;
        s.alphas[static_cast<std::size_t>(t)] = 1.0 - beta;
        prod *= 1.0 - beta;
        s.alpha_bars[static_cast<std::size_t>(t)] = prod;
        s.sigmas[static_cast<std::size_t>(t)] = std::sqrt((1.0 - prod) / prod);
    }
    return s;
}

Tensor q_sample(const Tensor& x0, const std::vector<long>& t, const Tensor& eps,
                const DiffusionSchedule& schedule) {
    if (eps.shape() != x0.shape()) throw std::invalid_argument("q_sample: eps shape must match x0");
    if (x0.rank() < 1) throw std::invalid_argument("q_sample: x0 must be batched");
    long batch = x0.dim(0);
    if (static_cast<long>(t.size()) != batch)
        throw std::invalid_argument("q_sample: need one timestep per batch element");
    long per = x0.numel() / batch;
    Tensor out(x0.shape(), x0.dtype());
    for (long b = 0; b < batch; ++b) {
        long tb = t[static_cast<std::size_t>(b)];
        if (tb < 0 || tb >= schedule.T)
            throw std::out_of_range("q_sample: timestep " + std::to_string(tb) +
                                    " out of range [0," + std::to_string(schedule.T) + ")");
        double ab = schedule.alpha_bars[static_cast<std::size_t>(tb)];
        double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
        for (long i = 0; i < per; ++i) {
            long idx = b * per + i;
            out.set(idx, c0 * x0.get(idx) + c1 * eps.get(idx));
        }
    }
    return out;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale) {
    if (eps_uncond.shape() != eps_cond.shape() || eps_uncond.dtype() != eps_cond.dtype())
        throw std::invalid_argument("cfg_combine: shape/dtype mismatch");
    Tensor out(eps_uncond.shape(), eps_uncond.dtype());
    dispatch_dtype(eps_uncond.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T s = static_cast<T>(scale);
        const T* u = eps_uncond.data<T>();
        const T* c = eps_cond.data<T>();
        T* o = out.data<T>();
        for (long i = 0; i < out.numel(); ++i) o[i] = u[i] + s * (c[i] - u[i]);
    });
    return out;
}

SigmaLadder make_sigma_ladder(const DiffusionSchedule& schedule, long steps) {
    if (steps < 1 || steps > schedule.T)
        throw std::invalid_argument("sampler: need 1 <= steps <= T");
    SigmaLadder ladder;
    ladder.timesteps.resize(static_cast<std::size_t>(steps));
    for (long i = 0; i < steps; ++i) {
        long t;
        if (steps == 1) {
            t = schedule.T - 1;
        } else {
            double pos = static_cast<double>(schedule.T - 1) *
                         static_cast<double>(steps - 1 - i) / static_cast<double>(steps - 1);
            t = std::lround(pos);
        }
        ladder.timesteps[static_cast<std::size_t>(i)] = t;
        ladder.sigmas.push_back(schedule.sigmas[static_cast<std::size_t>(t)]);
    }
    ladder.sigmas.push_back(0.0);
    for (std::size_t i = 1; i < ladder.sigmas.size(); ++i)
        if (!(ladder.sigmas[i] < ladder.sigmas[i - 1]))
            throw std::logic_error("sampler: sigma ladder is not strictly decreasing");
    return ladder;
}

Tensor euler_sample(const DenoiserFn& denoiser, const DiffusionSchedule& schedule,
                    const SamplerConfig& cfg, const Tensor& ctx, const Tensor& null_ctx,
                    const std::vector<long>& sample_shape, Dtype dtype) {
    SigmaLadder ladder = make_sigma_ladder(schedule, cfg.steps);
    Rng rng(cfg.seed, 0xd1f5u);

    Tensor x(sample_shape, dtype);
    rng.fill_normal(x);
    {
        const double smax = ladder.sigmas.front();
        for (long i = 0; i < x.numel(); ++i) x.set(i, x.get(i) * smax);
    }

    for (long i = 0; i < cfg.steps; ++i) {
        const double sigma = ladder.sigmas[static_cast<std::size_t>(i)];
        const double sigma_next = ladder.sigmas[static_cast<std::size_t>(i + 1)];
        const long t_index = ladder.timesteps[static_cast<std::size_t>(i)];

        Tensor x_in(x.shape(), dtype);
        const double in_scale = 1.0 / std::sqrt(sigma * sigma + 1.0);
        for (long j = 0; j < x.numel(); ++j) x_in.set(j, x.get(j) * in_scale);

        Tensor eps_u = denoiser(x_in, t_index, null_ctx);
        Tensor eps_c = denoiser(x_in, t_index, ctx);
        Tensor eps = cfg_combine(eps_u, eps_c, cfg.cfg_scale);
        if (!eps.all_finite())
            throw std::runtime_error("euler_sample: non-finite prediction at step " +
                                     std::to_string(i));

        for (long j = 0; j < x.numel(); ++j) {
            const double xj = x.get(j);
            const double x0_hat = xj - sigma * eps.get(j);
            const double d = (xj - x0_hat) / sigma;
            x.set(j, xj + (sigma_next - sigma) * d);
        }
        if (!x.all_finite())
            throw std::runtime_error("euler_sample: non-finite state after step " +
                                     std::to_string(i));
    }

    for (long j = 0; j < x.numel(); ++j) {
        double v = x.get(j);
        x.set(j, v < -1.0 ? -1.0 : (v > 1.0 ? 1.0 : v));
    }
    return x;
}

}  // namespace distillforge
