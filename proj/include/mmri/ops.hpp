#pragma once

#include <cmath>
#include <cstring>

#include "mmri/autodiff.hpp"
#include "mmri/parallel.hpp"
#include "mmri/rng.hpp"

namespace mmri::ad {

namespace detail {

template <typename T, typename F, typename DF>
Var<T> unary_ew(Tape<T>& tape, const Var<T>& x, F fwd, DF dfn) {
    Tensor<T> y(x->value.shape());
    const T* xv = x->value.data();
    T* yv = y.data();
    const int64_t n = y.size();
    parallel_for(n, [&](int64_t i) { yv[i] = fwd(xv[i]); }, 4096);
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out, dfn]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T* xv2 = x->value.data();
            const T* yv2 = out->value.data();
            const T* gy = out->grad.data();
            T* gx = x->grad.data();
            const int64_t m = out->value.size();
            parallel_for(m, [&](int64_t i) { gx[i] += gy[i] * dfn(xv2[i], yv2[i]); }, 4096);
        });
    }
    return out;
}

} // namespace detail

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
    return detail::unary_ew(
        tape, x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
    return detail::unary_ew(
        tape, x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(Tape<T>& tape, const Var<T>& x) {
    return detail::unary_ew(
        tape, x, [](T v) { return v / (T(1) + std::exp(-v)); },
        [](T v, T) {
            const T s = T(1) / (T(1) + std::exp(-v));
            return s * (T(1) + v * (T(1) - s));
        });
}

template <typename T>
Var<T> softplus(Tape<T>& tape, const Var<T>& x) {
    return detail::unary_ew(
        tape, x,
        [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
        [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Var<T> exp(Tape<T>& tape, const Var<T>& x) {
    return detail::unary_ew(tape, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> neg(Tape<T>& tape, const Var<T>& x) {
    return detail::unary_ew(tape, x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T a) {
    return detail::unary_ew(tape, x, [a](T v) { return a * v; }, [a](T, T) { return a; });
}

namespace detail {

template <typename T, typename F, typename DA, typename DB>
Var<T> binary_ew(Tape<T>& tape, const Var<T>& a, const Var<T>& b, F fwd, DA da, DB db, const char* name) {
    check_same_shape(a->value, b->value, name);
    Tensor<T> y(a->value.shape());
    const T* av = a->value.data();
    const T* bv = b->value.data();
    T* yv = y.data();
    parallel_for(y.size(), [&](int64_t i) { yv[i] = fwd(av[i], bv[i]); }, 4096);
    auto out = tape.output(std::move(y), a->requires_grad || b->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [a, b, out, da, db]() {
            if (!out->has_grad) return;
            const T* av2 = a->value.data();
            const T* bv2 = b->value.data();
            const T* gy = out->grad.data();
            const int64_t m = out->value.size();
            if (a->requires_grad) {
                a->ensure_grad();
                T* ga = a->grad.data();
                parallel_for(m, [&](int64_t i) { ga[i] += gy[i] * da(av2[i], bv2[i]); }, 4096);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                T* gb = b->grad.data();
                parallel_for(m, [&](int64_t i) { gb[i] += gy[i] * db(av2[i], bv2[i]); }, 4096);
            }
        });
    }
    return out;
}

} // namespace detail

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    return detail::binary_ew(
        tape, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); }, "add");
}

template <typename T>
Var<T> sub(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    return detail::binary_ew(
        tape, a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); }, "sub");
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    return detail::binary_ew(
        tape, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; }, "mul");
}

// y = sum of all elements, as a 1-element tensor
template <typename T>
Var<T> sum_all(Tape<T>& tape, const Var<T>& x) {
    double acc = 0;
    const T* xv = x->value.data();
    for (int64_t i = 0; i < x->value.size(); ++i) acc += static_cast<double>(xv[i]);
    auto out = tape.output(Tensor<T>::scalar(static_cast<T>(acc)), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T g = out->grad[0];
            T* gx = x->grad.data();
            parallel_for(x->value.size(), [&](int64_t i) { gx[i] += g; }, 4096);
        });
    }
    return out;
}

template <typename T>
Var<T> mean_all(Tape<T>& tape, const Var<T>& x) {
    auto s = sum_all(tape, x);
    return scale(tape, s, T(1) / static_cast<T>(x->value.size()));
}

// y[o] = W[o,i] x[i] + b[o]; x is rank-1
template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    check(x->value.rank() == 1, "linear: input must be rank-1, got " + shape_str(x->value.shape()));
    check(w->value.rank() == 2, "linear: weight must be rank-2");
    const int64_t in = x->value.dim(0);
    const int64_t outn = w->value.dim(0);
    check(w->value.dim(1) == in,
          "linear: weight in-extent " + std::to_string(w->value.dim(1)) + " vs input " + std::to_string(in));
    if (b) check(b->value.size() == outn, "linear: bias extent mismatch");
    Tensor<T> y({outn});
    const T* xv = x->value.data();
    const T* wv = w->value.data();
    for (int64_t o = 0; o < outn; ++o) {
        double acc = b ? static_cast<double>(b->value[o]) : 0.0;
        const T* wrow = wv + o * in;
        for (int64_t i = 0; i < in; ++i) acc += static_cast<double>(wrow[i]) * static_cast<double>(xv[i]);
        y[o] = static_cast<T>(acc);
    }
    bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    auto out = tape.output(std::move(y), rg);
    if (tape.track(out)) {
        tape.record(out, [x, w, b, out, in, outn]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            const T* xv2 = x->value.data();
            const T* wv2 = w->value.data();
            if (x->requires_grad) {
                x->ensure_grad();
                T* gx = x->grad.data();
                for (int64_t i = 0; i < in; ++i) {
                    double acc = 0;
                    for (int64_t o = 0; o < outn; ++o) acc += static_cast<double>(wv2[o * in + i]) * static_cast<double>(gy[o]);
                    gx[i] += static_cast<T>(acc);
                }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                T* gw = w->grad.data();
                for (int64_t o = 0; o < outn; ++o)
                    for (int64_t i = 0; i < in; ++i) gw[o * in + i] += gy[o] * xv2[i];
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                T* gb = b->grad.data();
                for (int64_t o = 0; o < outn; ++o) gb[o] += gy[o];
            }
        });
    }
    return out;
}

// Y = W X (+ b per column); X: [in, L], W: [out, in], Y: [out, L].
// Applies the same linear map at every sequence position.
template <typename T>
Var<T> linear_seq(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    check(x->value.rank() == 2, "linear_seq: input must be [channels, length]");
    const int64_t in = x->value.dim(0);
    const int64_t L = x->value.dim(1);
    const int64_t outn = w->value.dim(0);
    check(w->value.rank() == 2 && w->value.dim(1) == in, "linear_seq: weight shape mismatch");
    if (b) check(b->value.size() == outn, "linear_seq: bias extent mismatch");
    Tensor<T> y({outn, L});
    const T* xv = x->value.data();
    const T* wv = w->value.data();
    T* yv = y.data();
    parallel_for(outn, [&](int64_t o) {
        T* yrow = yv + o * L;
        const T bias = b ? b->value[o] : T(0);
        for (int64_t t = 0; t < L; ++t) yrow[t] = bias;
        const T* wrow = wv + o * in;
        for (int64_t i = 0; i < in; ++i) {
            const T wo = wrow[i];
            const T* xrow = xv + i * L;
            for (int64_t t = 0; t < L; ++t) yrow[t] += wo * xrow[t];
        }
    });
    bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    auto out = tape.output(std::move(y), rg);
    if (tape.track(out)) {
        tape.record(out, [x, w, b, out, in, L, outn]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            const T* xv2 = x->value.data();
            const T* wv2 = w->value.data();
            if (x->requires_grad) {
                x->ensure_grad();
                T* gx = x->grad.data();
                parallel_for(in, [&](int64_t i) {
                    T* gxrow = gx + i * L;
                    for (int64_t o = 0; o < outn; ++o) {
                        const T wo = wv2[o * in + i];
                        const T* gyrow = gy + o * L;
                        for (int64_t t = 0; t < L; ++t) gxrow[t] += wo * gyrow[t];
                    }
                });
            }
            if (w->requires_grad) {
                w->ensure_grad();
                T* gw = w->grad.data();
                parallel_for(outn, [&](int64_t o) {
                    const T* gyrow = gy + o * L;
                    for (int64_t i = 0; i < in; ++i) {
                        const T* xrow = xv2 + i * L;
                        double acc = 0;
                        for (int64_t t = 0; t < L; ++t) acc += static_cast<double>(gyrow[t]) * static_cast<double>(xrow[t]);
                        gw[o * in + i] += static_cast<T>(acc);
                    }
                });
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                T* gb = b->grad.data();
                for (int64_t o = 0; o < outn; ++o) {
                    double acc = 0;
                    const T* gyrow = gy + o * L;
                    for (int64_t t = 0; t < L; ++t) acc += static_cast<double>(gyrow[t]);
                    gb[o] += static_cast<T>(acc);
                }
            }
        });
    }
    return out;
}

// softmax along one axis; lanes are (outer, inner) slices
template <typename T>
Var<T> softmax(Tape<T>& tape, const Var<T>& x, int axis) {
    const auto& sh = x->value.shape();
    check(axis >= 0 && axis < static_cast<int>(sh.size()), "softmax: axis out of range");
    int64_t outer = 1, inner = 1;
    const int64_t n = sh[axis];
    for (int i = 0; i < axis; ++i) outer *= sh[i];
    for (size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    Tensor<T> y(sh);
    const T* xv = x->value.data();
    T* yv = y.data();
    parallel_for(outer * inner, [&](int64_t lane) {
        const int64_t o = lane / inner;
        const int64_t in = lane % inner;
        const int64_t base = o * n * inner + in;
        T mx = xv[base];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
        double denom = 0;
        for (int64_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(xv[base + j * inner] - mx));
        for (int64_t j = 0; j < n; ++j)
            yv[base + j * inner] = static_cast<T>(std::exp(static_cast<double>(xv[base + j * inner] - mx)) / denom);
    });
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out, outer, inner, n]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T* yv2 = out->value.data();
            const T* gy = out->grad.data();
            T* gx = x->grad.data();
            parallel_for(outer * inner, [&](int64_t lane) {
                const int64_t o = lane / inner;
                const int64_t in = lane % inner;
                const int64_t base = o * n * inner + in;
                double dot = 0;
                for (int64_t j = 0; j < n; ++j) {
                    const int64_t k = base + j * inner;
                    dot += static_cast<double>(gy[k]) * static_cast<double>(yv2[k]);
                }
                for (int64_t j = 0; j < n; ++j) {
                    const int64_t k = base + j * inner;
                    gx[k] += yv2[k] * (gy[k] - static_cast<T>(dot));
                }
            });
        });
    }
    return out;
}

// y[c, s] = x[c, s] * g[c] for any trailing spatial layout
template <typename T>
Var<T> channel_scale(Tape<T>& tape, const Var<T>& x, const Var<T>& g) {
    check(x->value.rank() >= 1, "channel_scale: bad input rank");
    const int64_t C = x->value.dim(0);
    check(g->value.size() == C, "channel_scale: gate extent " + std::to_string(g->value.size()) +
                                    " vs channels " + std::to_string(C));
    const int64_t S = x->value.size() / C;
    Tensor<T> y(x->value.shape());
    const T* xv = x->value.data();
    const T* gv = g->value.data();
    T* yv = y.data();
    parallel_for(C, [&](int64_t c) {
        const T gc = gv[c];
        for (int64_t s = 0; s < S; ++s) yv[c * S + s] = xv[c * S + s] * gc;
    });
    auto out = tape.output(std::move(y), x->requires_grad || g->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, g, out, C, S]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            const T* xv2 = x->value.data();
            const T* gv2 = g->value.data();
            if (x->requires_grad) {
                x->ensure_grad();
                T* gx = x->grad.data();
                parallel_for(C, [&](int64_t c) {
                    const T gc = gv2[c];
                    for (int64_t s = 0; s < S; ++s) gx[c * S + s] += gy[c * S + s] * gc;
                });
            }
            if (g->requires_grad) {
                g->ensure_grad();
                T* gg = g->grad.data();
                parallel_for(C, [&](int64_t c) {
                    double acc = 0;
                    for (int64_t s = 0; s < S; ++s)
                        acc += static_cast<double>(gy[c * S + s]) * static_cast<double>(xv2[c * S + s]);
                    gg[c] += static_cast<T>(acc);
                });
            }
        });
    }
    return out;
}

// y = x * s where s is a 1-element tensor node
template <typename T>
Var<T> scale_by_scalar(Tape<T>& tape, const Var<T>& x, const Var<T>& s) {
    check(s->value.size() == 1, "scale_by_scalar: scale must be a 1-element tensor");
    Tensor<T> y(x->value.shape());
    const T sv = s->value[0];
    const T* xv = x->value.data();
    T* yv = y.data();
    parallel_for(y.size(), [&](int64_t i) { yv[i] = xv[i] * sv; }, 8192);
    auto out = tape.output(std::move(y), x->requires_grad || s->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, s, out]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            if (x->requires_grad) {
                x->ensure_grad();
                const T sv2 = s->value[0];
                T* gx = x->grad.data();
                parallel_for(out->value.size(), [&](int64_t i) { gx[i] += gy[i] * sv2; }, 8192);
            }
            if (s->requires_grad) {
                s->ensure_grad();
                const T* xv2 = x->value.data();
                double acc = 0;
                for (int64_t i = 0; i < out->value.size(); ++i)
                    acc += static_cast<double>(gy[i]) * static_cast<double>(xv2[i]);
                s->grad[0] += static_cast<T>(acc);
            }
        });
    }
    return out;
}

// concatenate along axis 0
template <typename T>
Var<T> concat0(Tape<T>& tape, const std::vector<Var<T>>& xs) {
    check(!xs.empty(), "concat0: empty input list");
    Shape rest(xs[0]->value.shape().begin() + 1, xs[0]->value.shape().end());
    int64_t c_total = 0;
    bool rg = false;
    for (const auto& x : xs) {
        Shape r(x->value.shape().begin() + 1, x->value.shape().end());
        check(r == rest, "concat0: trailing shape mismatch");
        c_total += x->value.dim(0);
        rg = rg || x->requires_grad;
    }
    Shape osh = {c_total};
    osh.insert(osh.end(), rest.begin(), rest.end());
    Tensor<T> y(osh);
    int64_t off = 0;
    for (const auto& x : xs) {
        std::memcpy(y.data() + off, x->value.data(), static_cast<size_t>(x->value.size()) * sizeof(T));
        off += x->value.size();
    }
    auto out = tape.output(std::move(y), rg);
    if (tape.track(out)) {
        tape.record(out, [xs, out]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            int64_t off2 = 0;
            for (const auto& x : xs) {
                if (x->requires_grad) {
                    x->ensure_grad();
                    T* gx = x->grad.data();
                    const int64_t m = x->value.size();
                    parallel_for(m, [&](int64_t i) { gx[i] += gy[off2 + i]; }, 8192);
                }
                off2 += x->value.size();
            }
        });
    }
    return out;
}

// slice channels [c0, c1) along axis 0
template <typename T>
Var<T> slice0(Tape<T>& tape, const Var<T>& x, int64_t c0, int64_t c1) {
    const int64_t C = x->value.dim(0);
    check(c0 >= 0 && c0 < c1 && c1 <= C, "slice0: bad channel range");
    const int64_t S = x->value.size() / C;
    Shape osh = x->value.shape();
    osh[0] = c1 - c0;
    Tensor<T> y(osh);
    std::memcpy(y.data(), x->value.data() + c0 * S, static_cast<size_t>(y.size()) * sizeof(T));
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out, c0, S]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T* gy = out->grad.data();
            T* gx = x->grad.data() + c0 * S;
            parallel_for(out->value.size(), [&](int64_t i) { gx[i] += gy[i]; }, 8192);
        });
    }
    return out;
}

// reshape (same element count, same memory order)
template <typename T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape sh) {
    check(numel(sh) == x->value.size(), "reshape: element count mismatch");
    Tensor<T> y(sh, std::vector<T>(x->value.data(), x->value.data() + x->value.size()));
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [x, out]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T* gy = out->grad.data();
            T* gx = x->grad.data();
            parallel_for(out->value.size(), [&](int64_t i) { gx[i] += gy[i]; }, 8192);
        });
    }
    return out;
}

// Inverted dropout. The mask is drawn sequentially from `rng` in element order
// so the stream is independent of thread count.
template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, double p, Rng& rng, bool training) {
    check(p >= 0.0 && p < 1.0, "dropout: p must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) {
        Tensor<T> y = x->value;
        auto out = tape.output(std::move(y), x->requires_grad);
        if (tape.track(out)) {
            tape.record(out, [x, out]() {
                if (!out->has_grad) return;
                x->ensure_grad();
                const T* gy = out->grad.data();
                T* gx = x->grad.data();
                parallel_for(out->value.size(), [&](int64_t i) { gx[i] += gy[i]; }, 8192);
            });
        }
        return out;
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> mask(x->value.shape());
    T* mv = mask.data();
    for (int64_t i = 0; i < mask.size(); ++i) mv[i] = rng.uniform() >= p ? keep_scale : T(0);
    Tensor<T> y(x->value.shape());
    const T* xv = x->value.data();
    T* yv = y.data();
    parallel_for(y.size(), [&](int64_t i) { yv[i] = xv[i] * mv[i]; }, 8192);
    auto out = tape.output(std::move(y), x->requires_grad);
    if (tape.track(out)) {
        auto mask_sp = std::make_shared<Tensor<T>>(std::move(mask));
        tape.record(out, [x, out, mask_sp]() {
            if (!out->has_grad) return;
            x->ensure_grad();
            const T* gy = out->grad.data();
            const T* mv2 = mask_sp->data();
            T* gx = x->grad.data();
            parallel_for(out->value.size(), [&](int64_t i) { gx[i] += gy[i] * mv2[i]; }, 8192);
        });
    }
    return out;
}

} // namespace mmri::ad
