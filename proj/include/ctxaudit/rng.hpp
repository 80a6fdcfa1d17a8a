#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "ctxaudit/hash.hpp"

namespace ctxaudit {

// splitmix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based generator: every draw is a pure function of
// (seed, stream label, key, draw index), so concurrent schedules and resumed
// runs sample identical values. No libstdc++ distributions are used; output
// is bit-identical across platforms.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::string_view stream, std::uint64_t key = 0)
        : base_(mix64(mix64(mix64(seed) ^ fnv1a64(stream)) ^ key)) {}

    std::uint64_t next_u64() { return mix64(base_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t uniform_below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Standard normal via Box-Muller; consumes exactly two uniforms.
    double gauss() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform(); // log(0) guard; probability 2^-53
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Exact binomial draw as a Bernoulli sum. O(n), fine at the cell sizes
    // used here (n <= a few thousand).
    long binomial(long n, double p) {
        long k = 0;
        for (long i = 0; i < n; ++i) k += bernoulli(p) ? 1 : 0;
        return k;
    }

private:
    std::uint64_t base_;
    std::uint64_t counter_ = 0;
};

} // namespace ctxaudit
