#pragma once

#include <cmath>
#include <cstdint>

namespace changedet {

/// Deterministic xoshiro256++ generator seeded through splitmix64.
/// The algorithm is fixed so identical seeds yield identical streams on
/// every platform, independent of the standard library.
class SeededRng {
public:
    explicit SeededRng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
        has_spare_ = false;
        spare_ = 0.0;
    }

    /// Independent generator for (seed, iteration, branch) triples; used to
    /// make every augmentation draw reproducible in isolation.
    static SeededRng substream(uint64_t seed, uint64_t iteration, uint64_t branch) {
        uint64_t x = seed;
        uint64_t a = splitmix64(x);
        x = a ^ (iteration + 0x9e3779b97f4a7c15ull);
        uint64_t b = splitmix64(x);
        x = b ^ (branch + 0x632be59bd9b4e019ull);
        SeededRng rng(0);
        rng.state_[0] = a;
        rng.state_[1] = b;
        rng.state_[2] = splitmix64(x);
        rng.state_[3] = splitmix64(x);
        if ((rng.state_[0] | rng.state_[1] | rng.state_[2] | rng.state_[3]) == 0)
            rng.state_[0] = 1;
        return rng;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Standard normal draw via Box-Muller; the second value of each pair is
    /// cached so consecutive calls consume the stream deterministically.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t state_[4];
    bool has_spare_;
    double spare_;
};

}  // namespace changedet
