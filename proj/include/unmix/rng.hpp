#pragma once

#include <cmath>
#include <cstdint>

namespace unmix {

// Deterministic splitmix64 generator. The standard <random> distributions are
// implementation-defined, so every draw here is derived from raw bits to keep
// generated datasets and parameter initializations identical across platforms
// and toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of entropy.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller; one spare value cached between calls.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 1e-300) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::uint64_t next_below(std::uint64_t bound) { return next_u64() % bound; }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable per-item substream derivation (used for per-sample dataset seeds).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    Rng r(master ^ (0x632be59bd9b4e019ULL + index * 0x9e3779b97f4a7c15ULL));
    return r.next_u64();
}

}  // namespace unmix
