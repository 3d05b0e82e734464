#include "mmri/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "mmri/rng.hpp"
#include "mmri/scan.hpp"

namespace mmri::bench {

namespace {

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

struct ScanInputs {
    std::vector<float> u, delta, A, Bt, Ct, D, y;
};

ScanInputs make_inputs(int64_t dI, int64_t dS, int64_t L, uint64_t seed) {
    Rng rng(seed);
    ScanInputs in;
    in.u.resize(static_cast<size_t>(dI * L));
    in.delta.resize(static_cast<size_t>(dI * L));
    in.A.resize(static_cast<size_t>(dI * dS));
    in.Bt.resize(static_cast<size_t>(L * dS));
    in.Ct.resize(static_cast<size_t>(L * dS));
    in.D.resize(static_cast<size_t>(dI));
    in.y.resize(static_cast<size_t>(dI * L));
    for (auto& v : in.u) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : in.delta) v = static_cast<float>(rng.uniform(0.05, 0.5));
    for (auto& v : in.A) v = static_cast<float>(rng.uniform(-1.5, -0.1));
    for (auto& v : in.Bt) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : in.Ct) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : in.D) v = static_cast<float>(rng.uniform(-1, 1));
    return in;
}

double time_ms(const std::function<void()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

} // namespace

// q = k = v = x; scores scaled by 1/sqrt(d); one query row at a time
void attention_baseline(const float* x, float* y, int64_t d, int64_t L) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> scores(static_cast<size_t>(L));
    for (int64_t t = 0; t < L; ++t) {
        double mx = -1e300;
        for (int64_t s = 0; s < L; ++s) {
            double dot = 0;
            for (int64_t i = 0; i < d; ++i)
                dot += static_cast<double>(x[i * L + t]) * static_cast<double>(x[i * L + s]);
            scores[static_cast<size_t>(s)] = dot * inv_sqrt_d;
            mx = std::max(mx, scores[static_cast<size_t>(s)]);
        }
        double denom = 0;
        for (int64_t s = 0; s < L; ++s) {
            scores[static_cast<size_t>(s)] = std::exp(scores[static_cast<size_t>(s)] - mx);
            denom += scores[static_cast<size_t>(s)];
        }
        for (int64_t i = 0; i < d; ++i) {
            double acc = 0;
            for (int64_t s = 0; s < L; ++s) acc += scores[static_cast<size_t>(s)] * static_cast<double>(x[i * L + s]);
            y[i * L + t] = static_cast<float>(acc / denom);
        }
    }
}

BenchResult bench_scan(const std::vector<int64_t>& lengths, int64_t d_inner, int64_t d_state, int runs,
                       int64_t attention_max_len, uint64_t seed) {
    BenchResult res;
    for (int64_t L : lengths) {
        ScanInputs in = make_inputs(d_inner, d_state, L, seed + static_cast<uint64_t>(L));
        Timing tm;
        tm.length = L;
        std::vector<double> scan_times, attn_times;
        for (int r = 0; r < runs; ++r) {
            scan_times.push_back(time_ms([&]() {
                detail::selective_scan_fwd(in.u.data(), in.delta.data(), in.A.data(), in.Bt.data(), in.Ct.data(),
                                           in.D.data(), in.y.data(), d_inner, d_state, L, static_cast<float*>(nullptr));
            }));
        }
        tm.scan_ms = median(scan_times);
        if (L <= attention_max_len) {
            std::vector<float> ya(static_cast<size_t>(d_inner * L));
            for (int r = 0; r < runs; ++r)
                attn_times.push_back(time_ms([&]() { attention_baseline(in.u.data(), ya.data(), d_inner, L); }));
            tm.attention_ms = median(attn_times);
        } else {
            tm.attention_ms = -1;
        }
        res.timings.push_back(tm);
    }
    // least-squares fit scan_ms ~ a + b L
    const size_t n = res.timings.size();
    if (n >= 2) {
        double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
        for (const auto& t : res.timings) {
            const double x = static_cast<double>(t.length), y = t.scan_ms;
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
        }
        const double nn = static_cast<double>(n);
        const double cov = sxy - sx * sy / nn;
        const double vx = sxx - sx * sx / nn;
        const double vy = syy - sy * sy / nn;
        res.scan_fit_r2 = (vx > 0 && vy > 0) ? (cov * cov) / (vx * vy) : 1.0;
    }
    return res;
}

} // namespace mmri::bench
