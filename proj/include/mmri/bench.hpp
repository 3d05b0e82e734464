#pragma once

#include <cstdint>
#include <vector>

namespace mmri::bench {

struct Timing {
    int64_t length = 0;
    double scan_ms = 0;
    double attention_ms = 0; // < 0 when the baseline was skipped for this length
};

struct BenchResult {
    std::vector<Timing> timings;
    double scan_fit_r2 = 0; // quality of the linear fit of scan time vs length
};

// Median-of-`runs` wall time of the linear-complexity selective scan against a
// naive O(L^2) pairwise-attention baseline (benchmark-only implementation).
// `attention_max_len` caps the lengths at which the baseline runs.
BenchResult bench_scan(const std::vector<int64_t>& lengths, int64_t d_inner = 32, int64_t d_state = 32, int runs = 5,
                       int64_t attention_max_len = 8192, uint64_t seed = 1);

// exposed for the L = 1 agreement check
void attention_baseline(const float* x, float* y, int64_t d, int64_t L);

} // namespace mmri::bench
