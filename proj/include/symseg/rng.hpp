#pragma once

#include <cmath>
#include <cstdint>

namespace symseg {

/// splitmix64 generator. Small, fast, fully portable, and trivially
/// re-derivable from (seed, stream, index) tuples, which is what keeps every
/// stochastic stage of the pipeline reproducible regardless of thread count.
class Rng {
public:
    explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(seed) {}

    /// Independent stream derived from a parent seed and a stream tag.
    static Rng stream(uint64_t seed, uint64_t tag) {
        Rng mix(seed ^ (0xbf58476d1ce4e5b9ull * (tag + 1)));
        mix.next_u64();
        return Rng(mix.next_u64());
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Standard Gumbel: -log(-log(U)).
    double gumbel() {
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        double l = -std::log(u);
        if (l < 1e-300) l = 1e-300;
        return -std::log(l);
    }

private:
    uint64_t state_;
};

}  // namespace symseg
