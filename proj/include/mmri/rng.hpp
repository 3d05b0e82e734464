#pragma once

#include <cstdint>

namespace mmri {

// splitmix64; the canonical generator for every random draw in this project so
// streams reproduce bit-exactly across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1): high 53 bits / 2^53
    double uniform() { return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        if (n <= 1) return 0;
        int64_t v = static_cast<int64_t>(uniform() * static_cast<double>(n));
        return v < n ? v : n - 1;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // child stream for worker `index`, decorrelated from the base stream
    Rng split(uint64_t index) const {
        Rng mix(state_ ^ (0xA0761D6478BD642FULL * (index + 1)));
        mix.next_u64();
        return mix;
    }

private:
    uint64_t state_;
};

} // namespace mmri
