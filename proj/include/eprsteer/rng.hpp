#pragma once

#include <cmath>
#include <cstdint>

namespace eprsteer {

// Deterministic PRNG used everywhere randomness is needed.  xoshiro-style
// output is overkill here; splitmix64 passes BigCrush for our purposes and
// makes stream derivation (seed, stream-id) trivial, which is what the
// reproducibility contract actually needs.  We avoid std::<distribution>
// because libstdc++ does not pin their algorithms across versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    // Independent substream: hash (seed, stream) through two splitmix steps.
    Rng(std::uint64_t seed, std::uint64_t stream)
        : state_(mix(mix(seed + 0x9e3779b97f4a7c15ULL) ^ mix(stream))) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        return mix(z);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with cached second deviate.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    double exponential(double mean) {
        double u = 0.0;
        while (u == 0.0) u = uniform();
        return -mean * std::log(u);
    }

    // Knuth multiplication method; fine for the small means used here.
    int poisson(double mean) {
        double l = std::exp(-mean);
        int k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform();
        } while (p > l);
        return k - 1;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // Lemire-style rejection-free enough for n << 2^64.
        return next_u64() % n;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace eprsteer
