#pragma once

#include "mmri/autodiff.hpp"
#include "mmri/parallel.hpp"

namespace mmri::ad {

// per-channel mean over all spatial voxels: (C, D, H, W) -> (C)
template <typename T>
Var<T> global_avg_pool3d(Tape<T>& tape, const Var<T>& x) {
    check(x->value.rank() == 4, "global_avg_pool3d: input must be (C, D, H, W)");
    const int64_t C = x->value.dim(0);
    const int64_t S = x->value.size() / C;
    Tensor<T> y({C});
    const T* xv = x->value.data();
    parallel_for(C, [&](int64_t c) {
        double acc = 0;
        const T* row = xv + c * S;
        for (int64_t i = 0; i < S; ++i) acc += static_cast<double>(row[i]);
        y[c] = static_cast<T>(acc / static_cast<double>(S));
    });
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out, C, S]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T* gy = out->grad.data();
            T* gx = x->grad.data();
            const T inv = T(1) / static_cast<T>(S);
            parallel_for(C, [&](int64_t c) {
                const T g = gy[c] * inv;
                T* row = gx + c * S;
                for (int64_t i = 0; i < S; ++i) row[i] += g;
            });
        });
    }
    return out;
}

namespace detail {

// per-axis sample map for trilinear interpolation with integer scale factor
// (half-pixel convention: src = (dst + 0.5) / scale - 0.5, edges clamped)
struct AxisMap {
    std::vector<int64_t> i0, i1;
    std::vector<double> w0;
};

inline AxisMap make_axis_map(int64_t n_in, int64_t scale) {
    AxisMap m;
    const int64_t n_out = n_in * scale;
    m.i0.resize(n_out);
    m.i1.resize(n_out);
    m.w0.resize(n_out);
    for (int64_t o = 0; o < n_out; ++o) {
        const double src = (static_cast<double>(o) + 0.5) / static_cast<double>(scale) - 0.5;
        double f = std::floor(src);
        int64_t i0 = static_cast<int64_t>(f);
        double frac = src - f;
        int64_t i1 = i0 + 1;
        if (i0 < 0) { i0 = 0; i1 = 0; frac = 0.0; }
        if (i1 > n_in - 1) { i1 = n_in - 1; if (i0 > n_in - 1) i0 = n_in - 1; }
        m.i0[o] = i0;
        m.i1[o] = i1;
        m.w0[o] = 1.0 - frac;
    }
    return m;
}

// outputs that read from input index i along one axis, with their weights
struct AxisReverse {
    std::vector<std::vector<std::pair<int64_t, double>>> contrib;
};

inline AxisReverse reverse_of(const AxisMap& m, int64_t n_in) {
    AxisReverse r;
    r.contrib.resize(static_cast<size_t>(n_in));
    for (int64_t o = 0; o < static_cast<int64_t>(m.i0.size()); ++o) {
        r.contrib[static_cast<size_t>(m.i0[o])].push_back({o, m.w0[o]});
        if (m.i1[o] != m.i0[o]) r.contrib[static_cast<size_t>(m.i1[o])].push_back({o, 1.0 - m.w0[o]});
        else if (m.w0[o] < 1.0) r.contrib[static_cast<size_t>(m.i0[o])].back().second = 1.0;
    }
    return r;
}

} // namespace detail

// non-learned trilinear upsampling by an integer factor per axis
template <typename T>
Var<T> upsample_trilinear(Tape<T>& tape, const Var<T>& x, int64_t scale) {
    check(x->value.rank() == 4, "upsample_trilinear: input must be (C, D, H, W)");
    check(scale >= 1, "upsample_trilinear: scale must be >= 1");
    const int64_t C = x->value.dim(0), D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const auto md = detail::make_axis_map(D, scale);
    const auto mh = detail::make_axis_map(H, scale);
    const auto mw = detail::make_axis_map(W, scale);
    const int64_t Do = D * scale, Ho = H * scale, Wo = W * scale;
    Tensor<T> y({C, Do, Ho, Wo});
    const T* xv = x->value.data();
    T* yv = y.data();
    parallel_for(C * Do, [&](int64_t job) {
        const int64_t c = job / Do;
        const int64_t od = job % Do;
        const int64_t d0 = md.i0[od], d1 = md.i1[od];
        const double wd0 = md.w0[od];
        for (int64_t oh = 0; oh < Ho; ++oh) {
            const int64_t h0 = mh.i0[oh], h1 = mh.i1[oh];
            const double wh0 = mh.w0[oh];
            const T* r00 = xv + ((c * D + d0) * H + h0) * W;
            const T* r01 = xv + ((c * D + d0) * H + h1) * W;
            const T* r10 = xv + ((c * D + d1) * H + h0) * W;
            const T* r11 = xv + ((c * D + d1) * H + h1) * W;
            T* orow = yv + ((c * Do + od) * Ho + oh) * Wo;
            for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t w0i = mw.i0[ow], w1i = mw.i1[ow];
                const double ww0 = mw.w0[ow], ww1 = 1.0 - ww0;
                const double v00 = ww0 * static_cast<double>(r00[w0i]) + ww1 * static_cast<double>(r00[w1i]);
                const double v01 = ww0 * static_cast<double>(r01[w0i]) + ww1 * static_cast<double>(r01[w1i]);
                const double v10 = ww0 * static_cast<double>(r10[w0i]) + ww1 * static_cast<double>(r10[w1i]);
                const double v11 = ww0 * static_cast<double>(r11[w0i]) + ww1 * static_cast<double>(r11[w1i]);
                orow[ow] = static_cast<T>(wd0 * (wh0 * v00 + (1.0 - wh0) * v01) +
                                          (1.0 - wd0) * (wh0 * v10 + (1.0 - wh0) * v11));
            }
        }
    });
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out, md, mh, mw, C, D, H, W, Do, Ho, Wo]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const auto rd = detail::reverse_of(md, D);
            const auto rh = detail::reverse_of(mh, H);
            const auto rw = detail::reverse_of(mw, W);
            const T* gy = out->grad.data();
            T* gx = x->grad.data();
            // gather form over input voxels
            parallel_for(C * D, [&](int64_t job) {
                const int64_t c = job / D;
                const int64_t id = job % D;
                for (int64_t ih = 0; ih < H; ++ih) {
                    T* gxrow = gx + ((c * D + id) * H + ih) * W;
                    for (const auto& [od, wd] : rd.contrib[static_cast<size_t>(id)]) {
                        for (const auto& [oh, wh] : rh.contrib[static_cast<size_t>(ih)]) {
                            const T* gyrow = gy + ((c * Do + od) * Ho + oh) * Wo;
                            const double wdh = wd * wh;
                            for (int64_t iw = 0; iw < W; ++iw) {
                                double acc = 0;
                                for (const auto& [ow, ww] : rw.contrib[static_cast<size_t>(iw)])
                                    acc += ww * static_cast<double>(gyrow[ow]);
                                gxrow[iw] += static_cast<T>(wdh * acc);
                            }
                        }
                    }
                }
            });
        });
    }
    return out;
}

} // namespace mmri::ad
