#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace mpt {

// Deterministic RNG wrapper. std::mt19937_64 output is specified by the
// standard, but the std distributions are not; all derived draws here use
// fixed integer-and-bits recipes so streams are identical across platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, n). Lemire multiply-shift; bias is negligible for the
    // small ranges used here and the mapping is fully deterministic.
    std::uint64_t uniform_int(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; always consumes exactly two uniforms.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Fisher-Yates permutation of {0..n-1}.
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = static_cast<int>(uniform_int(static_cast<std::uint64_t>(i) + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace mpt
