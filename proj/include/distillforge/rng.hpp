#pragma once

#include <cstdint>
#include <string>

#include "distillforge/tensor.hpp"

namespace distillforge {

/// PCG32 generator with an explicit, serializable 128-bit state.
/// All sampling algorithms are fixed here (Box-Muller for normals), so a
/// given seed produces the same stream on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

    std::uint32_t next_u32();
    /// Uniform in [0, 1) with 24 bits of mantissa.
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n);
    /// Standard normal via Box-Muller (two uniforms per draw, no caching).
    double normal();

    void fill_normal(Tensor& t);
    void fill_uniform(Tensor& t, double lo, double hi);

    std::uint64_t state() const { return state_; }
    std::uint64_t inc() const { return inc_; }
    void restore(std::uint64_t state, std::uint64_t inc);

private:
    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(const std::string& s);

/// Independent stream derived from a global seed and a name, used for
/// per-parameter init so a parameter's fresh init never depends on which
/// other parameters exist.
Rng named_rng(std::uint64_t seed, const std::string& name);

}  // namespace distillforge
