#pragma once

#include "mmri/autodiff.hpp"
#include "mmri/parallel.hpp"

namespace mmri {

template <typename T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;
    bool initialized = false;
};

namespace ad {

// Batch normalization over a (C, D, H, W) tensor: train mode normalizes with
// per-channel statistics over all spatial positions and updates the running
// stats in place (momentum 0.1); eval mode normalizes with the running stats.
template <typename T>
Var<T> batch_norm3d(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    RunningStats<T>* stats, bool training, T eps = T(1e-5), T momentum = T(0.1)) {
    check(x->value.rank() == 4, "batch_norm3d: input must be (C, D, H, W)");
    const int64_t C = x->value.dim(0);
    const int64_t S = x->value.size() / C;
    check(gamma->value.size() == C && beta->value.size() == C, "batch_norm3d: affine extent mismatch");
    if (!training) {
        check(stats != nullptr && stats->initialized, "batch_norm3d: eval mode requires initialized running stats");
    }

    Tensor<T> mean({C}), inv_std({C});
    if (training) {
        Tensor<T> var({C});
        parallel_for(C, [&](int64_t c) {
            const T* row = x->value.data() + c * S;
            double m = 0;
            for (int64_t i = 0; i < S; ++i) m += static_cast<double>(row[i]);
            m /= static_cast<double>(S);
            double v = 0;
            for (int64_t i = 0; i < S; ++i) {
                const double d = static_cast<double>(row[i]) - m;
                v += d * d;
            }
            v /= static_cast<double>(S);
            mean[c] = static_cast<T>(m);
            var[c] = static_cast<T>(v);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
        });
        if (stats) {
            if (!stats->initialized) {
                stats->mean = mean;
                stats->var = var;
                stats->initialized = true;
            } else {
                for (int64_t c = 0; c < C; ++c) {
                    stats->mean[c] = (T(1) - momentum) * stats->mean[c] + momentum * mean[c];
                    stats->var[c] = (T(1) - momentum) * stats->var[c] + momentum * var[c];
                }
            }
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean[c] = stats->mean[c];
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats->var[c]) + static_cast<double>(eps)));
        }
    }

    Tensor<T> y(x->value.shape());
    {
        const T* xv = x->value.data();
        T* yv = y.data();
        const T* gv = gamma->value.data();
        const T* bv = beta->value.data();
        parallel_for(C, [&](int64_t c) {
            const T m = mean[c], is = inv_std[c], g = gv[c], b = bv[c];
            const T* row = xv + c * S;
            T* orow = yv + c * S;
            for (int64_t i = 0; i < S; ++i) orow[i] = (row[i] - m) * is * g + b;
        });
    }
    bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
    auto out = tape.output(std::move(y), rg);
    if (tape.track(out)) {
        auto mean_sp = std::make_shared<Tensor<T>>(std::move(mean));
        auto istd_sp = std::make_shared<Tensor<T>>(std::move(inv_std));
        tape.record(out, [x, gamma, beta, out, mean_sp, istd_sp, C, S, training]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            const T* xv = x->value.data();
            const T* gv = gamma->value.data();
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            T* ggam = gamma->requires_grad ? gamma->grad.data() : nullptr;
            T* gbet = beta->requires_grad ? beta->grad.data() : nullptr;
            T* gx = x->requires_grad ? x->grad.data() : nullptr;
            parallel_for(C, [&](int64_t c) {
                const T m = (*mean_sp)[c], is = (*istd_sp)[c];
                const T* xrow = xv + c * S;
                const T* grow = gy + c * S;
                double sum_gy = 0, sum_gy_xhat = 0;
                for (int64_t i = 0; i < S; ++i) {
                    const double xh = (static_cast<double>(xrow[i]) - static_cast<double>(m)) * static_cast<double>(is);
                    sum_gy += static_cast<double>(grow[i]);
                    sum_gy_xhat += static_cast<double>(grow[i]) * xh;
                }
                if (ggam) ggam[c] += static_cast<T>(sum_gy_xhat);
                if (gbet) gbet[c] += static_cast<T>(sum_gy);
                if (gx) {
                    T* gxrow = gx + c * S;
                    const double g = static_cast<double>(gv[c]);
                    if (training) {
                        const double mg = sum_gy / static_cast<double>(S);
                        const double mgx = sum_gy_xhat / static_cast<double>(S);
                        for (int64_t i = 0; i < S; ++i) {
                            const double xh =
                                (static_cast<double>(xrow[i]) - static_cast<double>(m)) * static_cast<double>(is);
                            gxrow[i] += static_cast<T>(g * static_cast<double>(is) *
                                                       (static_cast<double>(grow[i]) - mg - xh * mgx));
                        }
                    } else {
                        for (int64_t i = 0; i < S; ++i)
                            gxrow[i] += static_cast<T>(g * static_cast<double>(is) * static_cast<double>(grow[i]));
                    }
                }
            });
        });
    }
    return out;
}

namespace detail {

// shared layer-norm kernel over lanes of n elements at stride `inner`
template <typename T>
Var<T> layer_norm_lanes(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int64_t outer,
                        int64_t n, int64_t inner, T eps) {
    check(gamma->value.size() == n && beta->value.size() == n, "layer_norm: affine extent mismatch");
    Tensor<T> y(x->value.shape());
    Tensor<T> mean({outer * inner}), inv_std({outer * inner});
    const T* xv = x->value.data();
    T* yv = y.data();
    const T* gv = gamma->value.data();
    const T* bv = beta->value.data();
    parallel_for(outer * inner, [&](int64_t lane) {
        const int64_t o = lane / inner;
        const int64_t in = lane % inner;
        const int64_t base = o * n * inner + in;
        double m = 0;
        for (int64_t j = 0; j < n; ++j) m += static_cast<double>(xv[base + j * inner]);
        m /= static_cast<double>(n);
        double v = 0;
        for (int64_t j = 0; j < n; ++j) {
            const double d = static_cast<double>(xv[base + j * inner]) - m;
            v += d * d;
        }
        v /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(v + static_cast<double>(eps));
        mean[lane] = static_cast<T>(m);
        inv_std[lane] = static_cast<T>(is);
        for (int64_t j = 0; j < n; ++j) {
            const int64_t k = base + j * inner;
            yv[k] = static_cast<T>((static_cast<double>(xv[k]) - m) * is) * gv[j] + bv[j];
        }
    });
    bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
    auto out = tape.output(std::move(y), rg);
    if (tape.track(out)) {
        auto mean_sp = std::make_shared<Tensor<T>>(std::move(mean));
        auto istd_sp = std::make_shared<Tensor<T>>(std::move(inv_std));
        tape.record(out, [x, gamma, beta, out, mean_sp, istd_sp, outer, n, inner]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            const T* xv2 = x->value.data();
            const T* gv2 = gamma->value.data();
            if (x->requires_grad) x->ensure_grad();
            T* gx = x->requires_grad ? x->grad.data() : nullptr;
            // gamma/beta reductions cross lanes; accumulate serially for determinism
            if (gamma->requires_grad || beta->requires_grad) {
                if (gamma->requires_grad) gamma->ensure_grad();
                if (beta->requires_grad) beta->ensure_grad();
                T* ggam = gamma->requires_grad ? gamma->grad.data() : nullptr;
                T* gbet = beta->requires_grad ? beta->grad.data() : nullptr;
                for (int64_t lane = 0; lane < outer * inner; ++lane) {
                    const int64_t o = lane / inner;
                    const int64_t in = lane % inner;
                    const int64_t base = o * n * inner + in;
                    const double m = static_cast<double>((*mean_sp)[lane]);
                    const double is = static_cast<double>((*istd_sp)[lane]);
                    for (int64_t j = 0; j < n; ++j) {
                        const int64_t k = base + j * inner;
                        const double xh = (static_cast<double>(xv2[k]) - m) * is;
                        if (ggam) ggam[j] += static_cast<T>(static_cast<double>(gy[k]) * xh);
                        if (gbet) gbet[j] += gy[k];
                    }
                }
            }
            if (gx) {
                parallel_for(outer * inner, [&](int64_t lane) {
                    const int64_t o = lane / inner;
                    const int64_t in = lane % inner;
                    const int64_t base = o * n * inner + in;
                    const double m = static_cast<double>((*mean_sp)[lane]);
                    const double is = static_cast<double>((*istd_sp)[lane]);
                    double sum_g = 0, sum_gx = 0;
                    for (int64_t j = 0; j < n; ++j) {
                        const int64_t k = base + j * inner;
                        const double gyg = static_cast<double>(gy[k]) * static_cast<double>(gv2[j]);
                        const double xh = (static_cast<double>(xv2[k]) - m) * is;
                        sum_g += gyg;
                        sum_gx += gyg * xh;
                    }
                    const double mg = sum_g / static_cast<double>(n);
                    const double mgx = sum_gx / static_cast<double>(n);
                    for (int64_t j = 0; j < n; ++j) {
                        const int64_t k = base + j * inner;
                        const double gyg = static_cast<double>(gy[k]) * static_cast<double>(gv2[j]);
                        const double xh = (static_cast<double>(xv2[k]) - m) * is;
                        gx[k] += static_cast<T>(is * (gyg - mg - xh * mgx));
                    }
                });
            }
        });
    }
    return out;
}

} // namespace detail

// layer norm over the trailing `normalized_extent` elements of each row
template <typename T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, int64_t normalized_extent, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5)) {
    check(normalized_extent > 0 && x->value.size() % normalized_extent == 0,
          "layer_norm: input size " + std::to_string(x->value.size()) + " not divisible by normalized extent " +
              std::to_string(normalized_extent));
    const int64_t outer = x->value.size() / normalized_extent;
    return detail::layer_norm_lanes(tape, x, gamma, beta, outer, normalized_extent, 1, eps);
}

// layer norm across the channel axis (axis 0) at every spatial position
template <typename T>
Var<T> layer_norm_channel(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    check(x->value.rank() >= 1, "layer_norm_channel: bad rank");
    const int64_t C = x->value.dim(0);
    const int64_t S = x->value.size() / C;
    return detail::layer_norm_lanes(tape, x, gamma, beta, 1, C, S, eps);
}

} // namespace ad
} // namespace mmri
