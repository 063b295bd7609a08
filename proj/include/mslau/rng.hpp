#pragma once

#include <cmath>
#include <cstdint>

namespace mslau {

// Counter-based PRNG (SplitMix64 core). Each (seed, stream) pair yields an
// independent deterministic sequence, so parallel producers stay reproducible.
class Rng {
  public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) : state_(mix(mix(seed) ^ mix(stream ^ 0x9e3779b97f4a7c15ull))) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // uniform in [0, 1)
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // uniform in [lo, hi)
    double next_range(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // standard normal via Box-Muller (one value per call, cached pair discarded
    // to keep the stream position independent of call parity)
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // normal(0, std) truncated to +-2*std, the usual init scheme for projections
    double next_trunc_normal(double stddev) {
        for (;;) {
            double g = next_gaussian();
            if (std::fabs(g) <= 2.0) return g * stddev;
        }
    }

  private:
    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

}  // namespace mslau
