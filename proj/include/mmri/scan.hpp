#pragma once

#include <cmath>

#include "mmri/autodiff.hpp"
#include "mmri/parallel.hpp"

namespace mmri {

enum class ScanAxis { H, W, D, HW };
enum class ScanDir { Forward, Reverse };

struct ScanOrder {
    ScanAxis axis = ScanAxis::HW;
    ScanDir direction = ScanDir::Forward;
};

inline const char* to_string(ScanAxis a) {
    switch (a) {
        case ScanAxis::H: return "H";
        case ScanAxis::W: return "W";
        case ScanAxis::D: return "D";
        default: return "HW";
    }
}

// perm[t] = row-major spatial offset of sequence position t.
// H : h innermost, outer (d, w)
// W : w innermost, outer (h, d)
// D : d innermost, outer (h, w)
// HW: per depth slice row-major (h outer, w inner), slices along d
inline std::vector<int64_t> scan_permutation(ScanOrder order, int64_t D, int64_t H, int64_t W) {
    const int64_t L = D * H * W;
    std::vector<int64_t> perm(static_cast<size_t>(L));
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                const int64_t vol = (d * H + h) * W + w;
                int64_t t = 0;
                switch (order.axis) {
                    case ScanAxis::H: t = (d * W + w) * H + h; break;
                    case ScanAxis::W: t = (h * D + d) * W + w; break;
                    case ScanAxis::D: t = (h * W + w) * D + d; break;
                    case ScanAxis::HW: t = vol; break;
                }
                if (order.direction == ScanDir::Reverse) t = L - 1 - t;
                perm[static_cast<size_t>(t)] = vol;
            }
    return perm;
}

namespace ad {

// (C, D, H, W) -> (C, L) with L = D*H*W following the scan order
template <typename T>
Var<T> flatten_volume(Tape<T>& tape, const Var<T>& x, ScanOrder order) {
    check(x->value.rank() == 4, "flatten_volume: input must be (C, D, H, W)");
    const int64_t C = x->value.dim(0), D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int64_t L = D * H * W;
    auto perm = std::make_shared<std::vector<int64_t>>(scan_permutation(order, D, H, W));
    Tensor<T> y({C, L});
    const T* xv = x->value.data();
    T* yv = y.data();
    parallel_for(C, [&](int64_t c) {
        const T* src = xv + c * L;
        T* dst = yv + c * L;
        for (int64_t t = 0; t < L; ++t) dst[t] = src[(*perm)[static_cast<size_t>(t)]];
    });
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out, perm, C, L]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T* gy = out->grad.data();
            T* gx = x->grad.data();
            parallel_for(C, [&](int64_t c) {
                const T* g = gy + c * L;
                T* dst = gx + c * L;
                for (int64_t t = 0; t < L; ++t) dst[(*perm)[static_cast<size_t>(t)]] += g[t];
            });
        });
    }
    return out;
}

// inverse of flatten_volume for the same order
template <typename T>
Var<T> unflatten_volume(Tape<T>& tape, const Var<T>& x, ScanOrder order, int64_t D, int64_t H, int64_t W) {
    check(x->value.rank() == 2, "unflatten_volume: input must be (C, L)");
    const int64_t C = x->value.dim(0);
    const int64_t L = D * H * W;
    check(x->value.dim(1) == L, "unflatten_volume: sequence length " + std::to_string(x->value.dim(1)) +
                                    " does not match extents " + std::to_string(L));
    auto perm = std::make_shared<std::vector<int64_t>>(scan_permutation(order, D, H, W));
    Tensor<T> y({C, D, H, W});
    const T* xv = x->value.data();
    T* yv = y.data();
    parallel_for(C, [&](int64_t c) {
        const T* src = xv + c * L;
        T* dst = yv + c * L;
        for (int64_t t = 0; t < L; ++t) dst[(*perm)[static_cast<size_t>(t)]] = src[t];
    });
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out, perm, C, L]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T* gy = out->grad.data();
            T* gx = x->grad.data();
            parallel_for(C, [&](int64_t c) {
                const T* g = gy + c * L;
                T* dst = gx + c * L;
                for (int64_t t = 0; t < L; ++t) dst[t] += g[(*perm)[static_cast<size_t>(t)]];
            });
        });
    }
    return out;
}

} // namespace ad

namespace detail {

// Selective-scan recurrence, one independent recurrence per channel row:
//   h_t = exp(dt_t * A) .* h_{t-1} + (dt_t * B_t) * x_t
//   y_t = C_t . h_t + D .* x_t
// B/C are passed time-major ([L, dS]). When h_hist is non-null the full state
// trajectory is stored for the backward pass.
template <typename T>
void selective_scan_fwd(const T* u, const T* delta, const T* A, const T* Bt, const T* Ct, const T* Dskip, T* y,
                        int64_t dI, int64_t dS, int64_t L, T* h_hist) {
    parallel_for(dI, [&](int64_t i) {
        std::vector<T> h(static_cast<size_t>(dS), T(0));
        const T* urow = u + i * L;
        const T* drow = delta + i * L;
        const T* Arow = A + i * dS;
        const T di = Dskip ? Dskip[i] : T(0);
        T* yrow = y + i * L;
        T* hist = h_hist ? h_hist + i * L * dS : nullptr;
        for (int64_t t = 0; t < L; ++t) {
            const T dt = drow[t];
            const T xt = urow[t];
            const T* B_t = Bt + t * dS;
            const T* C_t = Ct + t * dS;
            const T dbx = dt * xt;
            double acc = 0;
            for (int64_t n = 0; n < dS; ++n) {
                const T a = std::exp(dt * Arow[n]);
                h[static_cast<size_t>(n)] = a * h[static_cast<size_t>(n)] + dbx * B_t[n];
                acc += static_cast<double>(C_t[n]) * static_cast<double>(h[static_cast<size_t>(n)]);
            }
            yrow[t] = static_cast<T>(acc) + di * xt;
            if (hist) std::copy(h.begin(), h.end(), hist + t * dS);
        }
    });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
    const int64_t R = x.dim(0), Cc = x.dim(1);
    Tensor<T> y({Cc, R});
    for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < Cc; ++c) y[c * R + r] = x[r * Cc + c];
    return y;
}

} // namespace detail

namespace ad {

// u, delta: [dI, L]; A: [dI, dS] (negative entries); B, C: [dS, L]; Dskip: [dI]
template <typename T>
Var<T> selective_scan(Tape<T>& tape, const Var<T>& u, const Var<T>& delta, const Var<T>& A, const Var<T>& B,
                      const Var<T>& C, const Var<T>& Dskip) {
    check(u->value.rank() == 2, "selective_scan: u must be [d_inner, L]");
    const int64_t dI = u->value.dim(0);
    const int64_t L = u->value.dim(1);
    check(L >= 1, "selective_scan: empty sequence");
    check_same_shape(delta->value, u->value, "selective_scan(delta)");
    check(A->value.rank() == 2 && A->value.dim(0) == dI, "selective_scan: A must be [d_inner, d_state]");
    const int64_t dS = A->value.dim(1);
    check(B->value.rank() == 2 && B->value.dim(0) == dS && B->value.dim(1) == L, "selective_scan: B must be [d_state, L]");
    check_same_shape(C->value, B->value, "selective_scan(C)");
    check(Dskip->value.size() == dI, "selective_scan: D_skip must be [d_inner]");

    auto Bt = std::make_shared<Tensor<T>>(mmri::detail::transpose2d(B->value));
    auto Ct = std::make_shared<Tensor<T>>(mmri::detail::transpose2d(C->value));
    bool rg = u->requires_grad || delta->requires_grad || A->requires_grad || B->requires_grad ||
              C->requires_grad || Dskip->requires_grad;
    const bool want_hist = tape.recording() && rg;
    std::shared_ptr<Tensor<T>> h_hist;
    if (want_hist) h_hist = std::make_shared<Tensor<T>>(Shape{dI, L, dS});

    Tensor<T> y({dI, L});
    mmri::detail::selective_scan_fwd(u->value.data(), delta->value.data(), A->value.data(), Bt->data(), Ct->data(),
                               Dskip->value.data(), y.data(), dI, dS, L, want_hist ? h_hist->data() : nullptr);
    auto out = tape.output(std::move(y), rg);
    if (tape.track(out)) {
        tape.record(out, [u, delta, A, B, C, Dskip, out, Bt, Ct, h_hist, dI, dS, L]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            const T* uv = u->value.data();
            const T* dv = delta->value.data();
            const T* Av = A->value.data();
            const T* Btv = Bt->data();
            const T* Ctv = Ct->data();
            const T* Dv = Dskip->value.data();
            const T* hh = h_hist->data();

            // total state gradients G_t are kept for the time-major B/C reductions
            Tensor<T> Gcache({dI, L, dS});
            Tensor<T> gu_loc({dI, L}), gdelta_loc({dI, L}), gA_loc({dI, dS}), gD_loc({dI});
            T* Gc = Gcache.data();
            parallel_for(dI, [&](int64_t i) {
                const T* urow = uv + i * L;
                const T* drow = dv + i * L;
                const T* Arow = Av + i * dS;
                const T* gyrow = gy + i * L;
                const T* hrow = hh + i * L * dS;
                T* Grow = Gc + i * L * dS;
                T* gurow = gu_loc.data() + i * L;
                T* gdrow = gdelta_loc.data() + i * L;
                T* gArow = gA_loc.data() + i * dS;
                std::vector<T> gh(static_cast<size_t>(dS), T(0));
                double gDacc = 0;
                for (int64_t t = L - 1; t >= 0; --t) {
                    const T dt = drow[t];
                    const T xt = urow[t];
                    const T g = gyrow[t];
                    const T* B_t = Btv + t * dS;
                    const T* C_t = Ctv + t * dS;
                    const T* h_prev = t > 0 ? hrow + (t - 1) * dS : nullptr;
                    T* G_t = Grow + t * dS;
                    double gdt = 0, gxt = 0;
                    for (int64_t n = 0; n < dS; ++n) {
                        // state gradient including this step's output term
                        const T Gn = gh[static_cast<size_t>(n)] + g * C_t[n];
                        G_t[n] = Gn;
                        const T hp = h_prev ? h_prev[n] : T(0);
                        const T a = std::exp(dt * Arow[n]);
                        gdt += static_cast<double>(Gn) * (static_cast<double>(hp) * static_cast<double>(a) * static_cast<double>(Arow[n]) +
                                                          static_cast<double>(B_t[n]) * static_cast<double>(xt));
                        gxt += static_cast<double>(Gn) * static_cast<double>(dt) * static_cast<double>(B_t[n]);
                        gArow[n] += static_cast<T>(static_cast<double>(Gn) * static_cast<double>(hp) *
                                                   static_cast<double>(a) * static_cast<double>(dt));
                        // propagate to h_{t-1}
                        gh[static_cast<size_t>(n)] = Gn * a;
                    }
                    gdrow[t] = static_cast<T>(gdt);
                    gurow[t] = static_cast<T>(gxt) + g * Dv[i];
                    gDacc += static_cast<double>(g) * static_cast<double>(xt);
                }
                gD_loc[i] = static_cast<T>(gDacc);
            });

            if (u->requires_grad) {
                u->ensure_grad();
                T* dst = u->grad.data();
                parallel_for(u->value.size(), [&](int64_t k) { dst[k] += gu_loc[k]; }, 8192);
            }
            if (delta->requires_grad) {
                delta->ensure_grad();
                T* dst = delta->grad.data();
                parallel_for(delta->value.size(), [&](int64_t k) { dst[k] += gdelta_loc[k]; }, 8192);
            }
            if (A->requires_grad) {
                A->ensure_grad();
                T* dst = A->grad.data();
                for (int64_t k = 0; k < A->value.size(); ++k) dst[k] += gA_loc[k];
            }
            if (Dskip->requires_grad) {
                Dskip->ensure_grad();
                T* dst = Dskip->grad.data();
                for (int64_t i = 0; i < dI; ++i) dst[i] += gD_loc[i];
            }
            if (B->requires_grad || C->requires_grad) {
                if (B->requires_grad) B->ensure_grad();
                if (C->requires_grad) C->ensure_grad();
                T* gB = B->requires_grad ? B->grad.data() : nullptr;
                T* gCd = C->requires_grad ? C->grad.data() : nullptr;
                parallel_for(L, [&](int64_t t) {
                    for (int64_t n = 0; n < dS; ++n) {
                        double accB = 0, accC = 0;
                        for (int64_t i = 0; i < dI; ++i) {
                            const T dt = dv[i * L + t];
                            const T xt = uv[i * L + t];
                            accB += static_cast<double>(Gc[(i * L + t) * dS + n]) * static_cast<double>(dt) *
                                    static_cast<double>(xt);
                            accC += static_cast<double>(gy[i * L + t]) * static_cast<double>(hh[(i * L + t) * dS + n]);
                        }
                        if (gB) gB[n * L + t] += static_cast<T>(accB);
                        if (gCd) gCd[n * L + t] += static_cast<T>(accC);
                    }
                });
            }
        });
    }
    return out;
}

} // namespace ad
} // namespace mmri
