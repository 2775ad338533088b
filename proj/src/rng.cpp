#include "distillforge/rng.hpp"

#include <cmath>

namespace distillforge {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += splitmix64(seed);
    next_u32();
}

std::uint32_t Rng::next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
}

double Rng::uniform() { return static_cast<double>(next_u32() >> 8) * (1.0 / 16777216.0); }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
    // Rejection sampling over 64 bits keeps the result exactly uniform.
    if (n == 0) return 0;
    std::uint64_t hi = next_u32();
    std::uint64_t lo = next_u32();
    std::uint64_t x = (hi << 32) | lo;
    std::uint64_t limit = ~0ULL - (~0ULL % n + 1) % n;
    while (x > limit) {
        hi = next_u32();
        lo = next_u32();
        x = (hi << 32) | lo;
    }
    return x % n;
}

double Rng::normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

void Rng::fill_normal(Tensor& t) {
    for (long i = 0; i < t.numel(); ++i) t.set(i, normal());
}

void Rng::fill_uniform(Tensor& t, double lo, double hi) {
    for (long i = 0; i < t.numel(); ++i) t.set(i, uniform(lo, hi));
}

void Rng::restore(std::uint64_t state, std::uint64_t inc) {
    state_ = state;
    inc_ = inc;
}

Rng named_rng(std::uint64_t seed, const std::string& name) {
    std::uint64_t h = fnv1a64(name);
    return Rng(splitmix64(seed ^ h), h);
}

}  // namespace distillforge
