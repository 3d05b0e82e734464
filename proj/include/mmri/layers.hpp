#pragma once

#include <string>

#include "mmri/conv.hpp"
#include "mmri/norm.hpp"
#include "mmri/ops.hpp"
#include "mmri/pool.hpp"
#include "mmri/rng.hpp"
#include "mmri/scan.hpp"

namespace mmri {

// Named parameters (trainable leaves) and buffers (running statistics),
// registered in construction order.
template <typename T>
class ParamStore {
public:
    struct Param {
        std::string name;
        ad::Var<T> var;
    };
    struct Buffer {
        std::string name;
        Tensor<T>* tensor; // owned by the registering layer
    };

    ad::Var<T> param(const std::string& name, Tensor<T> init) {
        auto v = ad::make_leaf<T>(std::move(init), true);
        params_.push_back({name, v});
        return v;
    }
    void buffer(const std::string& name, Tensor<T>* t) { buffers_.push_back({name, t}); }

    const std::vector<Param>& params() const { return params_; }
    const std::vector<Buffer>& buffers() const { return buffers_; }

    int64_t count_trainable() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.var->value.size();
        return n;
    }
    int64_t count_prefix(const std::string& prefix) const {
        int64_t n = 0;
        for (const auto& p : params_)
            if (p.name.rfind(prefix, 0) == 0) n += p.var->value.size();
        return n;
    }

private:
    std::vector<Param> params_;
    std::vector<Buffer> buffers_;
};

// Weight initialization. `randomize_all` replaces the zero-initialized branch
// layers with small random values; gradient checking uses it so that no branch
// starts out disconnected.
template <typename T>
struct InitCtx {
    Rng rng;
    bool randomize_all = false;

    Tensor<T> uniform(Shape sh, double bound) {
        Tensor<T> t(std::move(sh));
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
        return t;
    }
    Tensor<T> fan_in_uniform(Shape sh, int64_t fan_in) { return uniform(std::move(sh), 1.0 / std::sqrt(static_cast<double>(fan_in))); }
    Tensor<T> zeros_or_small(Shape sh) {
        if (randomize_all) return uniform(std::move(sh), 0.2);
        return Tensor<T>(std::move(sh));
    }
};

template <typename T>
struct FwdCtx {
    ad::Tape<T>* tape = nullptr;
    bool training = false;     // batch statistics + running-stat updates + dropout
    Rng* dropout_rng = nullptr; // dropout is active only when training and a stream is given
};

template <typename T>
struct Conv3dLayer {
    ConvSpec spec;
    ad::Var<T> w, b;

    Conv3dLayer() = default;
    Conv3dLayer(ParamStore<T>& ps, const std::string& name, const ConvSpec& s, InitCtx<T>& init, bool zero_init = false)
        : spec(s) {
        validate_conv_spec(s);
        const int64_t fan_in = (s.in_channels / s.groups) * s.kernel[0] * s.kernel[1] * s.kernel[2];
        Shape wsh{s.out_channels, s.in_channels / s.groups, s.kernel[0], s.kernel[1], s.kernel[2]};
        w = ps.param(name + ".weight", zero_init ? init.zeros_or_small(wsh) : init.fan_in_uniform(wsh, fan_in));
        if (s.has_bias)
            b = ps.param(name + ".bias",
                         zero_init ? init.zeros_or_small({s.out_channels}) : init.fan_in_uniform({s.out_channels}, fan_in));
    }
    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const { return ad::conv3d(*ctx.tape, x, spec, w, b); }
};

template <typename T>
struct ConvTranspose3dLayer {
    ConvSpec spec;
    ad::Var<T> w, b;

    ConvTranspose3dLayer() = default;
    ConvTranspose3dLayer(ParamStore<T>& ps, const std::string& name, const ConvSpec& s, InitCtx<T>& init,
                         bool zero_init = false)
        : spec(s) {
        validate_conv_spec(s);
        const int64_t fan_in = (s.out_channels / s.groups) * s.kernel[0] * s.kernel[1] * s.kernel[2];
        Shape wsh{s.in_channels, s.out_channels / s.groups, s.kernel[0], s.kernel[1], s.kernel[2]};
        w = ps.param(name + ".weight", zero_init ? init.zeros_or_small(wsh) : init.fan_in_uniform(wsh, fan_in));
        if (s.has_bias)
            b = ps.param(name + ".bias",
                         zero_init ? init.zeros_or_small({s.out_channels}) : init.fan_in_uniform({s.out_channels}, fan_in));
    }
    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const { return ad::conv_transpose3d(*ctx.tape, x, spec, w, b); }
};

template <typename T>
struct BatchNorm3dLayer {
    ad::Var<T> gamma, beta;
    std::shared_ptr<RunningStats<T>> stats;

    BatchNorm3dLayer() = default;
    BatchNorm3dLayer(ParamStore<T>& ps, const std::string& name, int64_t channels, InitCtx<T>& init) {
        gamma = ps.param(name + ".gamma",
                         init.randomize_all ? init.uniform({channels}, 0.2) : Tensor<T>::full({channels}, T(1)));
        if (init.randomize_all)
            for (int64_t i = 0; i < channels; ++i) gamma->value[i] += T(1);
        beta = ps.param(name + ".beta", init.zeros_or_small({channels}));
        stats = std::make_shared<RunningStats<T>>();
        stats->mean = Tensor<T>({channels});
        stats->var = Tensor<T>::full({channels}, T(1));
        stats->initialized = true;
        ps.buffer(name + ".running_mean", &stats->mean);
        ps.buffer(name + ".running_var", &stats->var);
    }
    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        return ad::batch_norm3d(*ctx.tape, x, gamma, beta, stats.get(), ctx.training);
    }
};

template <typename T>
struct LinearLayer {
    ad::Var<T> w, b;

    LinearLayer() = default;
    LinearLayer(ParamStore<T>& ps, const std::string& name, int64_t in, int64_t out, InitCtx<T>& init,
                bool has_bias = true, bool zero_init = false) {
        w = ps.param(name + ".weight", zero_init ? init.zeros_or_small({out, in}) : init.fan_in_uniform({out, in}, in));
        if (has_bias)
            b = ps.param(name + ".bias", zero_init ? init.zeros_or_small({out}) : init.fan_in_uniform({out}, in));
    }
    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const { return ad::linear(*ctx.tape, x, w, b); }
    ad::Var<T> forward_seq(FwdCtx<T>& ctx, const ad::Var<T>& x) const { return ad::linear_seq(*ctx.tape, x, w, b); }
};

// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> (+ shortcut) -> ReLU -> dropout
template <typename T>
struct BasicBlock3d {
    Conv3dLayer<T> conv1, conv2, proj;
    BatchNorm3dLayer<T> bn1, bn2, bn_proj;
    bool has_proj = false;
    double dropout_p = 0.05;

    BasicBlock3d() = default;
    BasicBlock3d(ParamStore<T>& ps, const std::string& name, int64_t in, int64_t out, int64_t stride, InitCtx<T>& init,
                 double dropout = 0.05)
        : dropout_p(dropout) {
        ConvSpec c1{in, out, {3, 3, 3}, {stride, stride, stride}, {1, 1, 1}, {1, 1, 1}, 1, false};
        ConvSpec c2{out, out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, 1, false};
        conv1 = Conv3dLayer<T>(ps, name + ".conv1", c1, init);
        bn1 = BatchNorm3dLayer<T>(ps, name + ".bn1", out, init);
        conv2 = Conv3dLayer<T>(ps, name + ".conv2", c2, init);
        bn2 = BatchNorm3dLayer<T>(ps, name + ".bn2", out, init);
        has_proj = (in != out) || (stride != 1);
        if (has_proj) {
            ConvSpec cp{in, out, {1, 1, 1}, {stride, stride, stride}, {0, 0, 0}, {1, 1, 1}, 1, false};
            proj = Conv3dLayer<T>(ps, name + ".proj", cp, init);
            bn_proj = BatchNorm3dLayer<T>(ps, name + ".proj_bn", out, init);
        }
    }

    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        auto& tape = *ctx.tape;
        auto h = ad::relu(tape, bn1.forward(ctx, conv1.forward(ctx, x)));
        h = bn2.forward(ctx, conv2.forward(ctx, h));
        auto sc = has_proj ? bn_proj.forward(ctx, proj.forward(ctx, x)) : x;
        h = ad::relu(tape, ad::add(tape, h, sc));
        if (ctx.training && ctx.dropout_rng && dropout_p > 0)
            h = ad::dropout(tape, h, dropout_p, *ctx.dropout_rng, true);
        return h;
    }
};

// squeeze-excitation: pool -> C -> C/r -> C with ReLU then sigmoid -> rescale
template <typename T>
struct SEBlock {
    LinearLayer<T> fc1, fc2;

    SEBlock() = default;
    SEBlock(ParamStore<T>& ps, const std::string& name, int64_t channels, int64_t ratio, InitCtx<T>& init) {
        fc1 = LinearLayer<T>(ps, name + ".fc1", channels, channels / ratio, init);
        fc2 = LinearLayer<T>(ps, name + ".fc2", channels / ratio, channels, init);
    }
    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        auto& tape = *ctx.tape;
        auto s = ad::global_avg_pool3d(tape, x);
        s = ad::relu(tape, fc1.forward(ctx, s));
        s = ad::sigmoid(tape, fc2.forward(ctx, s));
        return ad::channel_scale(tape, x, s);
    }
};

// channel-affinity gating plus 1x1x1 mixing across all groups
template <typename T>
struct CrossGroupModulation {
    LinearLayer<T> fc1, fc2;
    Conv3dLayer<T> mix;

    CrossGroupModulation() = default;
    CrossGroupModulation(ParamStore<T>& ps, const std::string& name, int64_t channels, InitCtx<T>& init) {
        fc1 = LinearLayer<T>(ps, name + ".fc1", channels, channels / 4, init);
        fc2 = LinearLayer<T>(ps, name + ".fc2", channels / 4, channels, init, true, /*zero_init=*/true);
        ConvSpec ms{channels, channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, true};
        mix = Conv3dLayer<T>(ps, name + ".mix", ms, init, /*zero_init=*/true);
    }
    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        auto& tape = *ctx.tape;
        auto g = ad::global_avg_pool3d(tape, x);
        g = ad::silu(tape, fc1.forward(ctx, g));
        g = ad::sigmoid(tape, fc2.forward(ctx, g));
        auto gated = ad::channel_scale(tape, x, g);
        return mix.forward(ctx, gated);
    }
};

// One channel group of the bottleneck scan block:
// in-projection with gate -> depthwise conv + SiLU -> flatten -> selective scan
// -> unflatten -> gate -> layer norm -> out-projection
template <typename T>
struct MambaGroup {
    int64_t d_inner = 0, d_state = 0, dt_rank = 0;
    ScanOrder order;
    Conv3dLayer<T> in_proj, dw_conv, out_proj;
    LinearLayer<T> x_proj, dt_proj;
    ad::Var<T> A_log, D_skip, ln_gamma, ln_beta;

    MambaGroup() = default;
    MambaGroup(ParamStore<T>& ps, const std::string& name, int64_t d_inner_, int64_t d_state_, ScanOrder order_,
               InitCtx<T>& init)
        : d_inner(d_inner_), d_state(d_state_), dt_rank((d_inner_ + 15) / 16), order(order_) {
        ConvSpec pin{d_inner, 2 * d_inner, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, false};
        in_proj = Conv3dLayer<T>(ps, name + ".in_proj", pin, init);
        ConvSpec dws{d_inner, d_inner, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, d_inner, true};
        dw_conv = Conv3dLayer<T>(ps, name + ".dw_conv", dws, init);
        x_proj = LinearLayer<T>(ps, name + ".x_proj", d_inner, dt_rank + 2 * d_state, init, false);
        dt_proj = LinearLayer<T>(ps, name + ".dt_proj", dt_rank, d_inner, init, true);
        // dt bias so that softplus(bias) lands in [1e-3, 1e-1]
        {
            Tensor<T> b({d_inner});
            for (int64_t i = 0; i < d_inner; ++i) {
                const double dt = std::exp(init.rng.uniform(std::log(1e-3), std::log(1e-1)));
                b[i] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
            }
            dt_proj.b->value = std::move(b);
        }
        // state matrix stored as log magnitude, A = -exp(A_log); real S4D ladder
        {
            Tensor<T> a({d_inner, d_state});
            for (int64_t i = 0; i < d_inner; ++i)
                for (int64_t n = 0; n < d_state; ++n) a[i * d_state + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
            A_log = ps.param(name + ".A_log", std::move(a));
        }
        D_skip = ps.param(name + ".D_skip", Tensor<T>::full({d_inner}, T(1)));
        ln_gamma = ps.param(name + ".ln.gamma",
                            init.randomize_all ? init.uniform({d_inner}, 0.2) : Tensor<T>::full({d_inner}, T(1)));
        if (init.randomize_all)
            for (int64_t i = 0; i < d_inner; ++i) ln_gamma->value[i] += T(1);
        ln_beta = ps.param(name + ".ln.beta", init.zeros_or_small({d_inner}));
        ConvSpec pout{d_inner, d_inner, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, false};
        out_proj = Conv3dLayer<T>(ps, name + ".out_proj", pout, init);
    }

    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        auto& tape = *ctx.tape;
        const int64_t D = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
        auto uz = in_proj.forward(ctx, x);
        auto u = ad::slice0(tape, uz, 0, d_inner);
        auto z = ad::slice0(tape, uz, d_inner, 2 * d_inner);
        u = ad::silu(tape, dw_conv.forward(ctx, u));
        auto useq = ad::flatten_volume(tape, u, order);
        auto proj = x_proj.forward_seq(ctx, useq);
        auto dt_low = ad::slice0(tape, proj, 0, dt_rank);
        auto B = ad::slice0(tape, proj, dt_rank, dt_rank + d_state);
        auto C = ad::slice0(tape, proj, dt_rank + d_state, dt_rank + 2 * d_state);
        auto dt = ad::softplus(tape, dt_proj.forward_seq(ctx, dt_low));
        auto A = ad::neg(tape, ad::exp(tape, A_log));
        auto yseq = ad::selective_scan(tape, useq, dt, A, B, C, D_skip);
        auto y = ad::unflatten_volume(tape, yseq, order, D, H, W);
        y = ad::mul(tape, y, ad::silu(tape, z));
        y = ad::layer_norm_channel(tape, y, ln_gamma, ln_beta);
        return out_proj.forward(ctx, y);
    }
};

// Channel-partitioned scan block: each group scans one axis order, outputs are
// concatenated, cross-group modulated, and added back to the input.
template <typename T>
struct GroupMamba3d {
    int64_t channels = 0, groups = 0;
    std::vector<MambaGroup<T>> group_blocks;
    CrossGroupModulation<T> modulation;

    GroupMamba3d() = default;
    GroupMamba3d(ParamStore<T>& ps, const std::string& name, int64_t channels_, int64_t groups_, int64_t d_state,
                 InitCtx<T>& init)
        : channels(channels_), groups(groups_) {
        check(channels % groups == 0, "group_mamba3d: channel count " + std::to_string(channels) +
                                          " not divisible by groups " + std::to_string(groups));
        const ScanAxis axes[4] = {ScanAxis::H, ScanAxis::W, ScanAxis::D, ScanAxis::HW};
        const int64_t d_inner = channels / groups;
        for (int64_t g = 0; g < groups; ++g) {
            ScanOrder order{axes[g % 4], ScanDir::Forward};
            group_blocks.emplace_back(ps, name + ".group" + std::to_string(g), d_inner, d_state, order, init);
        }
        modulation = CrossGroupModulation<T>(ps, name + ".modulation", channels, init);
    }

    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        auto& tape = *ctx.tape;
        check(x->value.dim(0) == channels, "group_mamba3d: input channel mismatch");
        const int64_t d_inner = channels / groups;
        std::vector<ad::Var<T>> outs;
        outs.reserve(static_cast<size_t>(groups));
        for (int64_t g = 0; g < groups; ++g) {
            auto xg = ad::slice0(tape, x, g * d_inner, (g + 1) * d_inner);
            outs.push_back(group_blocks[static_cast<size_t>(g)].forward(ctx, xg));
        }
        auto cat = ad::concat0(tape, outs);
        auto mixed = modulation.forward(ctx, cat);
        return ad::add(tape, mixed, x);
    }
};

// Dual-path feature refinement:
//   detail  : depthwise 3x3x3 + pointwise 1x1x1
//   context : two stacked 3x3x3 convs with dilation 2, SiLU between
//   cross   : 1x1x1 conv on the concatenated paths
//   gate    : global pool -> linear C->2 -> softmax path weights
// output = x + cross + w_d * detail + w_c * context
template <typename T>
struct DpfrBlock {
    int64_t channels = 0;
    Conv3dLayer<T> detail_dw, detail_pw, ctx1, ctx2, interact;
    LinearLayer<T> gate;

    DpfrBlock() = default;
    DpfrBlock(ParamStore<T>& ps, const std::string& name, int64_t c, int64_t dilation, InitCtx<T>& init) : channels(c) {
        ConvSpec dw{c, c, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, c, true};
        detail_dw = Conv3dLayer<T>(ps, name + ".detail_dw", dw, init);
        ConvSpec pw{c, c, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, true};
        detail_pw = Conv3dLayer<T>(ps, name + ".detail_pw", pw, init, /*zero_init=*/true);
        ConvSpec cx{c, c, {3, 3, 3}, {1, 1, 1}, {dilation, dilation, dilation}, {dilation, dilation, dilation}, 1, true};
        ctx1 = Conv3dLayer<T>(ps, name + ".context1", cx, init);
        ctx2 = Conv3dLayer<T>(ps, name + ".context2", cx, init, /*zero_init=*/true);
        ConvSpec ix{2 * c, c, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, true};
        interact = Conv3dLayer<T>(ps, name + ".interact", ix, init, /*zero_init=*/true);
        gate = LinearLayer<T>(ps, name + ".gate", c, 2, init, true, /*zero_init=*/true);
    }

    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        auto& tape = *ctx.tape;
        auto f_d = detail_pw.forward(ctx, detail_dw.forward(ctx, x));
        auto f_c = ctx2.forward(ctx, ad::silu(tape, ctx1.forward(ctx, x)));
        auto inter = interact.forward(ctx, ad::concat0(tape, {f_d, f_c}));
        auto wts = ad::softmax(tape, gate.forward(ctx, ad::global_avg_pool3d(tape, x)), 0);
        auto w_d = ad::slice0(tape, wts, 0, 1);
        auto w_c = ad::slice0(tape, wts, 1, 2);
        auto fused = ad::add(tape, ad::scale_by_scalar(tape, f_d, w_d), ad::scale_by_scalar(tape, f_c, w_c));
        return ad::add(tape, x, ad::add(tape, inter, fused));
    }
};

} // namespace mmri
