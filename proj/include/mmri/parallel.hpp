#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mmri {

inline void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

inline int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// Static partition over [0, n). Each index is processed by exactly one thread
// and every per-index computation is internally sequential, so results are
// bit-identical for any thread count.
template <typename F>
void parallel_for(int64_t n, F&& f, int64_t grain = 1) {
#ifdef _OPENMP
    if (n >= 2 * grain && omp_get_max_threads() > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) f(i);
        return;
    }
#else
    (void)grain;
#endif
    for (int64_t i = 0; i < n; ++i) f(i);
}

} // namespace mmri
