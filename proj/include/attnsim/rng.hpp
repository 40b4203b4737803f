#pragma once

#include <cmath>
#include <cstdint>

namespace attnsim {

// splitmix64: tiny, seedable, and identical on every platform. std::mt19937
// would also be reproducible, but the std distributions are not; sampling is
// done by hand below for bit-stable traces.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi] inclusive.
    long next_long(long lo, long hi) {
        return lo + static_cast<long>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    // Exponential with the given rate; used for Poisson arrival gaps.
    double next_exponential(double rate) {
        double u = next_double();
        return -std::log1p(-u) / rate;
    }

    double next_lognormal(double mu, double sigma) {
        // Box-Muller on two uniforms.
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
        return std::exp(mu + sigma * z);
    }

private:
    uint64_t state_;
};

}  // namespace attnsim
