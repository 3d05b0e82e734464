#pragma once

#include <array>

#include "mmri/autodiff.hpp"
#include "mmri/ops.hpp"
#include "mmri/parallel.hpp"

namespace mmri {

struct ConvSpec {
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    std::array<int64_t, 3> kernel{1, 1, 1};
    std::array<int64_t, 3> stride{1, 1, 1};
    std::array<int64_t, 3> padding{0, 0, 0};
    std::array<int64_t, 3> dilation{1, 1, 1};
    int64_t groups = 1;
    bool has_bias = true;
};

namespace detail {
inline const char* axis_name(int a) { return a == 0 ? "depth" : (a == 1 ? "height" : "width"); }
}

inline void validate_conv_spec(const ConvSpec& s) {
    check(s.in_channels > 0 && s.out_channels > 0, "conv: channel counts must be positive");
    check(s.groups > 0 && s.in_channels % s.groups == 0 && s.out_channels % s.groups == 0,
          "conv: groups " + std::to_string(s.groups) + " must divide in_channels " +
              std::to_string(s.in_channels) + " and out_channels " + std::to_string(s.out_channels));
    for (int a = 0; a < 3; ++a) {
        check(s.kernel[a] > 0 && s.stride[a] > 0 && s.dilation[a] > 0 && s.padding[a] >= 0,
              std::string("conv: bad spec on ") + detail::axis_name(a) + " axis");
    }
}

// floor((in + 2 pad - dil (k - 1) - 1) / stride) + 1, per axis
inline std::array<int64_t, 3> conv_out_extents(const ConvSpec& s, const std::array<int64_t, 3>& in_sp) {
    std::array<int64_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
        const int64_t span = in_sp[a] + 2 * s.padding[a] - s.dilation[a] * (s.kernel[a] - 1) - 1;
        out[a] = span / s.stride[a] + 1;
        check(span >= 0 && out[a] >= 1, "conv3d: non-positive output extent on " + std::string(detail::axis_name(a)) +
                                            " axis (input " + std::to_string(in_sp[a]) + ")");
    }
    return out;
}

// (in - 1) stride - 2 pad + dil (k - 1) + 1, per axis
inline std::array<int64_t, 3> conv_transpose_out_extents(const ConvSpec& s, const std::array<int64_t, 3>& in_sp) {
    std::array<int64_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
        out[a] = (in_sp[a] - 1) * s.stride[a] - 2 * s.padding[a] + s.dilation[a] * (s.kernel[a] - 1) + 1;
        check(out[a] >= 1, "conv_transpose3d: non-positive output extent on " + std::string(detail::axis_name(a)) + " axis");
    }
    return out;
}

namespace detail {

// Direct cross-correlation, gather form: each output element is one
// sequential accumulation, so parallel execution is bit-deterministic.
template <typename T>
void conv3d_fwd(const T* x, const T* w, const T* bias, T* y, int64_t Cin, int64_t Cout, int64_t groups,
                const std::array<int64_t, 3>& K, const std::array<int64_t, 3>& S, const std::array<int64_t, 3>& P,
                const std::array<int64_t, 3>& DL, const std::array<int64_t, 3>& in_sp,
                const std::array<int64_t, 3>& out_sp) {
    const int64_t D = in_sp[0], H = in_sp[1], W = in_sp[2];
    const int64_t Do = out_sp[0], Ho = out_sp[1], Wo = out_sp[2];
    const int64_t cpg_in = Cin / groups, cpg_out = Cout / groups;
    const int64_t ksz = K[0] * K[1] * K[2];
    parallel_for(Cout * Do, [&](int64_t job) {
        const int64_t oc = job / Do;
        const int64_t od = job % Do;
        const int64_t ic0 = (oc / cpg_out) * cpg_in;
        for (int64_t oh = 0; oh < Ho; ++oh) {
            T* orow = y + ((oc * Do + od) * Ho + oh) * Wo;
            const T b = bias ? bias[oc] : T(0);
            for (int64_t ow = 0; ow < Wo; ++ow) orow[ow] = b;
            for (int64_t ici = 0; ici < cpg_in; ++ici) {
                const int64_t ic = ic0 + ici;
                for (int64_t kd = 0; kd < K[0]; ++kd) {
                    const int64_t id = od * S[0] - P[0] + kd * DL[0];
                    if (id < 0 || id >= D) continue;
                    for (int64_t kh = 0; kh < K[1]; ++kh) {
                        const int64_t ih = oh * S[1] - P[1] + kh * DL[1];
                        if (ih < 0 || ih >= H) continue;
                        const T* xrow = x + ((ic * D + id) * H + ih) * W;
                        const T* wrow = w + ((oc * cpg_in + ici) * ksz + (kd * K[1] + kh) * K[2]);
                        for (int64_t kw = 0; kw < K[2]; ++kw) {
                            const int64_t off = kw * DL[2] - P[2];
                            int64_t lo = off >= 0 ? 0 : (-off + S[2] - 1) / S[2];
                            int64_t hi = off > W - 1 ? 0 : (W - 1 - off) / S[2] + 1;
                            if (hi > Wo) hi = Wo;
                            const T wv = wrow[kw];
                            if (S[2] == 1) {
                                const T* xr = xrow + off;
#pragma omp simd
                                for (int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xr[ow];
                            } else {
                                for (int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xrow[ow * S[2] + off];
                            }
                        }
                    }
                }
            }
        }
    });
}

// Transposed convolution, gather form per output row. `out_sp` is passed in
// explicitly so the same kernel serves both the forward op and conv3d's
// input-gradient (which may need a larger target than the closed formula).
template <typename T>
void conv_transpose3d_fwd(const T* x, const T* w, const T* bias, T* y, int64_t Cin, int64_t Cout, int64_t groups,
                          const std::array<int64_t, 3>& K, const std::array<int64_t, 3>& S,
                          const std::array<int64_t, 3>& P, const std::array<int64_t, 3>& DL,
                          const std::array<int64_t, 3>& in_sp, const std::array<int64_t, 3>& out_sp) {
    const int64_t D = in_sp[0], H = in_sp[1], W = in_sp[2];
    const int64_t Zd = out_sp[0], Zh = out_sp[1], Zw = out_sp[2];
    const int64_t cpg_in = Cin / groups, cpg_out = Cout / groups;
    const int64_t ksz = K[0] * K[1] * K[2];
    parallel_for(Cout * Zd, [&](int64_t job) {
        const int64_t oc = job / Zd;
        const int64_t zd = job % Zd;
        const int64_t gr = oc / cpg_out;
        const int64_t oci = oc % cpg_out;
        const int64_t ic0 = gr * cpg_in;
        for (int64_t zh = 0; zh < Zh; ++zh) {
            T* zrow = y + ((oc * Zd + zd) * Zh + zh) * Zw;
            const T b = bias ? bias[oc] : T(0);
            for (int64_t zw = 0; zw < Zw; ++zw) zrow[zw] = b;
            for (int64_t ici = 0; ici < cpg_in; ++ici) {
                const int64_t ic = ic0 + ici;
                for (int64_t kd = 0; kd < K[0]; ++kd) {
                    const int64_t nd = zd + P[0] - kd * DL[0];
                    if (nd < 0 || nd % S[0] != 0) continue;
                    const int64_t td = nd / S[0];
                    if (td >= D) continue;
                    for (int64_t kh = 0; kh < K[1]; ++kh) {
                        const int64_t nh = zh + P[1] - kh * DL[1];
                        if (nh < 0 || nh % S[1] != 0) continue;
                        const int64_t th = nh / S[1];
                        if (th >= H) continue;
                        const T* xrow = x + ((ic * D + td) * H + th) * W;
                        const T* wrow = w + ((ic * cpg_out + oci) * ksz + (kd * K[1] + kh) * K[2]);
                        for (int64_t kw = 0; kw < K[2]; ++kw) {
                            const int64_t off = kw * DL[2] - P[2];
                            // zw = tw * S + off over valid tw
                            int64_t t_lo = off >= 0 ? 0 : (-off + S[2] - 1) / S[2];
                            int64_t t_hi = (Zw - 1 - off) >= 0 ? (Zw - 1 - off) / S[2] + 1 : 0;
                            if (t_hi > W) t_hi = W;
                            const T wv = wrow[kw];
                            if (S[2] == 1) {
                                T* zr = zrow + off;
#pragma omp simd
                                for (int64_t tw = t_lo; tw < t_hi; ++tw) zr[tw] += wv * xrow[tw];
                            } else {
                                for (int64_t tw = t_lo; tw < t_hi; ++tw) zrow[tw * S[2] + off] += wv * xrow[tw];
                            }
                        }
                    }
                }
            }
        }
    });
}

// weight gradient of conv3d: gw[oc][ici][k] = sum_out gy[oc][o] x[ic][o*S - P + k*DL]
// (also serves conv_transpose3d's weight gradient with x/gy roles swapped)
template <typename T>
void conv3d_grad_weight(const T* x, const T* gy, T* gw, int64_t Cin, int64_t Cout, int64_t groups,
                        const std::array<int64_t, 3>& K, const std::array<int64_t, 3>& S,
                        const std::array<int64_t, 3>& P, const std::array<int64_t, 3>& DL,
                        const std::array<int64_t, 3>& in_sp, const std::array<int64_t, 3>& out_sp) {
    const int64_t D = in_sp[0], H = in_sp[1], W = in_sp[2];
    const int64_t Do = out_sp[0], Ho = out_sp[1], Wo = out_sp[2];
    const int64_t cpg_in = Cin / groups, cpg_out = Cout / groups;
    const int64_t ksz = K[0] * K[1] * K[2];
    parallel_for(Cout * cpg_in, [&](int64_t job) {
        const int64_t oc = job / cpg_in;
        const int64_t ici = job % cpg_in;
        const int64_t ic = (oc / cpg_out) * cpg_in + ici;
        T* gw_base = gw + (oc * cpg_in + ici) * ksz;
        for (int64_t kd = 0; kd < K[0]; ++kd)
            for (int64_t kh = 0; kh < K[1]; ++kh)
                for (int64_t kw = 0; kw < K[2]; ++kw) {
                    const int64_t off = kw * DL[2] - P[2];
                    int64_t lo = off >= 0 ? 0 : (-off + S[2] - 1) / S[2];
                    int64_t hi = off > W - 1 ? 0 : (W - 1 - off) / S[2] + 1;
                    if (hi > Wo) hi = Wo;
                    T acc = 0;
                    for (int64_t od = 0; od < Do; ++od) {
                        const int64_t id = od * S[0] - P[0] + kd * DL[0];
                        if (id < 0 || id >= D) continue;
                        for (int64_t oh = 0; oh < Ho; ++oh) {
                            const int64_t ih = oh * S[1] - P[1] + kh * DL[1];
                            if (ih < 0 || ih >= H) continue;
                            const T* gyrow = gy + ((oc * Do + od) * Ho + oh) * Wo;
                            const T* xrow = x + ((ic * D + id) * H + ih) * W;
                            T row_acc = 0;
                            if (S[2] == 1) {
                                const T* xr = xrow + off;
#pragma omp simd reduction(+ : row_acc)
                                for (int64_t ow = lo; ow < hi; ++ow) row_acc += gyrow[ow] * xr[ow];
                            } else {
                                for (int64_t ow = lo; ow < hi; ++ow) row_acc += gyrow[ow] * xrow[ow * S[2] + off];
                            }
                            acc += row_acc;
                        }
                    }
                    gw_base[(kd * K[1] + kh) * K[2] + kw] += acc;
                }
    });
}

template <typename T>
void grad_bias_accum(const T* gy, T* gb, int64_t C, int64_t spatial) {
    parallel_for(C, [&](int64_t c) {
        double acc = 0;
        const T* row = gy + c * spatial;
        for (int64_t i = 0; i < spatial; ++i) acc += static_cast<double>(row[i]);
        gb[c] += static_cast<T>(acc);
    });
}

template <typename T>
std::array<int64_t, 3> spatial_of(const Tensor<T>& t) {
    check(t.rank() == 4, "expected a (C, D, H, W) tensor, got " + shape_str(t.shape()));
    return {t.dim(1), t.dim(2), t.dim(3)};
}

} // namespace detail

namespace ad {

template <typename T>
void check_conv_inputs(const Var<T>& x, const ConvSpec& spec, const Var<T>& w, const Var<T>& b, bool transpose) {
    validate_conv_spec(spec);
    const char* who = transpose ? "conv_transpose3d" : "conv3d";
    check(x->value.rank() == 4, std::string(who) + ": input must be (C, D, H, W), got " + shape_str(x->value.shape()));
    check(x->value.dim(0) == spec.in_channels, std::string(who) + ": channel axis mismatch: input has " +
                                                   std::to_string(x->value.dim(0)) + " channels, spec expects " +
                                                   std::to_string(spec.in_channels));
    Shape wsh = transpose
                    ? Shape{spec.in_channels, spec.out_channels / spec.groups, spec.kernel[0], spec.kernel[1], spec.kernel[2]}
                    : Shape{spec.out_channels, spec.in_channels / spec.groups, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
    check(w->value.shape() == wsh, std::string(who) + ": weight shape " + shape_str(w->value.shape()) +
                                       ", expected " + shape_str(wsh));
    if (b) check(b->value.size() == spec.out_channels, std::string(who) + ": bias extent mismatch");
    check(spec.has_bias == static_cast<bool>(b), std::string(who) + ": bias presence disagrees with spec");
}

template <typename T>
Var<T> conv3d(Tape<T>& tape, const Var<T>& x, const ConvSpec& spec, const Var<T>& w, const Var<T>& b = nullptr) {
    check_conv_inputs(x, spec, w, b, false);
    const auto in_sp = mmri::detail::spatial_of(x->value);
    const auto out_sp = conv_out_extents(spec, in_sp);
    Tensor<T> y({spec.out_channels, out_sp[0], out_sp[1], out_sp[2]});
    mmri::detail::conv3d_fwd(x->value.data(), w->value.data(), b ? b->value.data() : nullptr, y.data(), spec.in_channels,
                       spec.out_channels, spec.groups, spec.kernel, spec.stride, spec.padding, spec.dilation, in_sp,
                       out_sp);
    bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    auto out = tape.output(std::move(y), rg);
    if (tape.track(out)) {
        tape.record(out, [x, w, b, out, spec, in_sp, out_sp]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            if (x->requires_grad) {
                x->ensure_grad();
                // input gradient is the adjoint map: a transposed-conv gather over gy
                Tensor<T> gx(x->value.shape());
                mmri::detail::conv_transpose3d_fwd(gy, w->value.data(), static_cast<const T*>(nullptr), gx.data(),
                                             spec.out_channels, spec.in_channels, spec.groups, spec.kernel, spec.stride,
                                             spec.padding, spec.dilation, out_sp, in_sp);
                T* gxd = x->grad.data();
                const T* gsrc = gx.data();
                parallel_for(gx.size(), [&](int64_t i) { gxd[i] += gsrc[i]; }, 8192);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                mmri::detail::conv3d_grad_weight(x->value.data(), gy, w->grad.data(), spec.in_channels, spec.out_channels,
                                           spec.groups, spec.kernel, spec.stride, spec.padding, spec.dilation, in_sp,
                                           out_sp);
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                mmri::detail::grad_bias_accum(gy, b->grad.data(), spec.out_channels, out_sp[0] * out_sp[1] * out_sp[2]);
            }
        });
    }
    return out;
}

template <typename T>
Var<T> conv_transpose3d(Tape<T>& tape, const Var<T>& x, const ConvSpec& spec, const Var<T>& w,
                        const Var<T>& b = nullptr) {
    check_conv_inputs(x, spec, w, b, true);
    const auto in_sp = mmri::detail::spatial_of(x->value);
    const auto out_sp = conv_transpose_out_extents(spec, in_sp);
    Tensor<T> y({spec.out_channels, out_sp[0], out_sp[1], out_sp[2]});
    mmri::detail::conv_transpose3d_fwd(x->value.data(), w->value.data(), b ? b->value.data() : nullptr, y.data(),
                                 spec.in_channels, spec.out_channels, spec.groups, spec.kernel, spec.stride,
                                 spec.padding, spec.dilation, in_sp, out_sp);
    bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    auto out = tape.output(std::move(y), rg);
    if (tape.track(out)) {
        tape.record(out, [x, w, b, out, spec, in_sp, out_sp]() {
            if (!out->has_grad) return;
            const T* gy = out->grad.data();
            if (x->requires_grad) {
                x->ensure_grad();
                // adjoint of the transpose is the plain conv gather
                Tensor<T> gx(x->value.shape());
                mmri::detail::conv3d_fwd(gy, w->value.data(), static_cast<const T*>(nullptr), gx.data(), spec.out_channels,
                                   spec.in_channels, spec.groups, spec.kernel, spec.stride, spec.padding, spec.dilation,
                                   out_sp, in_sp);
                T* gxd = x->grad.data();
                const T* gsrc = gx.data();
                parallel_for(gx.size(), [&](int64_t i) { gxd[i] += gsrc[i]; }, 8192);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                mmri::detail::conv3d_grad_weight(gy, x->value.data(), w->grad.data(), spec.out_channels, spec.in_channels,
                                           spec.groups, spec.kernel, spec.stride, spec.padding, spec.dilation, out_sp,
                                           in_sp);
            }
            if (b && b->requires_grad) {
                b->ensure_grad();
                mmri::detail::grad_bias_accum(gy, b->grad.data(), spec.out_channels, out_sp[0] * out_sp[1] * out_sp[2]);
            }
        });
    }
    return out;
}

} // namespace ad
} // namespace mmri
