#pragma once

#include <array>
#include <map>

#include "mmri/layers.hpp"

namespace mmri {

struct ModelConfig {
    int64_t in_channels = 4;
    std::array<int64_t, 4> stage_channels{16, 32, 64, 128};
    int64_t num_classes = 3;
    double dropout = 0.05;
    int64_t groups = 4;
    int64_t d_state = 32;
    int64_t se_ratio = 8;
    int64_t dpfr_dilation = 2;
    std::array<double, 4> ds_weights{0.2, 0.3, 0.3, 0.2};
    bool use_dpfr = true;
    bool use_pfa = true;
    bool use_deep_supervision = true;

    void validate() const {
        check(in_channels > 0 && num_classes > 0, "config: channel counts must be positive");
        for (int i = 0; i < 3; ++i)
            check(stage_channels[i] < stage_channels[i + 1], "config: stage channels must be strictly increasing");
        check(stage_channels[3] % groups == 0, "config: bottleneck channels must be divisible by groups");
        check(dropout >= 0.0 && dropout < 1.0, "config: dropout must lie in [0, 1)");
        const double s = (ds_weights[0] + ds_weights[3]) + (ds_weights[1] + ds_weights[2]);
        check(std::abs(s - 1.0) <= 1e-9, "config: deep-supervision weights must sum to 1, got " + std::to_string(s));
    }
};

// decoder stage: upsample, concatenate the skip, fuse with a residual block,
// then refine with the dual-path module
template <typename T>
struct DecoderStage {
    ConvTranspose3dLayer<T> up;
    BasicBlock3d<T> fuse;
    DpfrBlock<T> dpfr;
    bool has_dpfr = false;

    DecoderStage() = default;
    DecoderStage(ParamStore<T>& ps, const std::string& name, const std::string& dpfr_name, int64_t c_in, int64_t c_skip,
                 int64_t up_stride, const ModelConfig& cfg, InitCtx<T>& init) {
        // stride-1 stage keeps resolution (bottleneck already sits at the skip scale)
        const int64_t k = up_stride == 1 ? 1 : 2;
        ConvSpec us{c_in, c_skip, {k, k, k}, {up_stride, up_stride, up_stride}, {0, 0, 0}, {1, 1, 1}, 1, true};
        up = ConvTranspose3dLayer<T>(ps, name + ".up", us, init);
        fuse = BasicBlock3d<T>(ps, name + ".fuse", 2 * c_skip, c_skip, 1, init, cfg.dropout);
        has_dpfr = cfg.use_dpfr;
        if (has_dpfr) dpfr = DpfrBlock<T>(ps, dpfr_name, c_skip, cfg.dpfr_dilation, init);
    }

    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x, const ad::Var<T>& skip) const {
        auto& tape = *ctx.tape;
        auto u = up.forward(ctx, x);
        check(u->value.dim(1) == skip->value.dim(1) && u->value.dim(2) == skip->value.dim(2) &&
                  u->value.dim(3) == skip->value.dim(3),
              "decoder_stage: upsampled extents " + shape_str(u->value.shape()) + " do not match skip " +
                  shape_str(skip->value.shape()));
        auto h = fuse.forward(ctx, ad::concat0(tape, {u, skip}));
        if (has_dpfr) h = dpfr.forward(ctx, h);
        return h;
    }
};

// progressive aggregation head:
// F_agg = U(U(D3) + D2) + D1, plus a D1 residual, residual-block refinement,
// 1x1x1 projection to class logits and a learned upsample to full resolution
template <typename T>
struct PfaHead {
    ConvTranspose3dLayer<T> u1, u2, up_final;
    BasicBlock3d<T> refine;
    Conv3dLayer<T> head;

    PfaHead() = default;
    PfaHead(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, InitCtx<T>& init) {
        const int64_t c3 = cfg.stage_channels[2], c2 = cfg.stage_channels[1], c1 = cfg.stage_channels[0];
        ConvSpec s1{c3, c2, {4, 4, 4}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}, 1, true};
        u1 = ConvTranspose3dLayer<T>(ps, name + ".u1", s1, init);
        ConvSpec s2{c2, c1, {4, 4, 4}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}, 1, true};
        u2 = ConvTranspose3dLayer<T>(ps, name + ".u2", s2, init);
        refine = BasicBlock3d<T>(ps, name + ".refine", c1, c1, 1, init, cfg.dropout);
        ConvSpec hs{c1, cfg.num_classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, true};
        head = Conv3dLayer<T>(ps, name + ".head", hs, init);
        ConvSpec fs{cfg.num_classes, cfg.num_classes, {4, 4, 4}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}, 1, true};
        up_final = ConvTranspose3dLayer<T>(ps, name + ".up_final", fs, init);
    }

    ad::Var<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& d1, const ad::Var<T>& d2, const ad::Var<T>& d3) const {
        auto& tape = *ctx.tape;
        auto agg = ad::add(tape, u1.forward(ctx, d3), d2);
        agg = ad::add(tape, u2.forward(ctx, agg), d1);
        auto combined = ad::add(tape, agg, d1);
        auto r = refine.forward(ctx, combined);
        return up_final.forward(ctx, head.forward(ctx, r));
    }
};

template <typename T>
struct ModelOutputs {
    ad::Var<T> final_logits;
    ad::Var<T> aux1, aux2, aux3; // from D3, D2, D1; null in eval mode
};

template <typename T>
class MmriNet {
public:
    explicit MmriNet(const ModelConfig& cfg, uint64_t seed = 0, bool randomize_all_init = false) : cfg_(cfg) {
        cfg_.validate();
        InitCtx<T> init{Rng(seed), randomize_all_init};
        const auto& sc = cfg_.stage_channels;
        enc1_ = BasicBlock3d<T>(store_, "encoder.stage1", cfg_.in_channels, sc[0], 2, init, cfg_.dropout);
        enc2_ = BasicBlock3d<T>(store_, "encoder.stage2", sc[0], sc[1], 2, init, cfg_.dropout);
        enc3_ = BasicBlock3d<T>(store_, "encoder.stage3", sc[1], sc[2], 2, init, cfg_.dropout);
        enc4_ = BasicBlock3d<T>(store_, "encoder.stage4", sc[2], sc[3], 1, init, cfg_.dropout);
        mamba_ = GroupMamba3d<T>(store_, "bottleneck.mamba", sc[3], cfg_.groups, cfg_.d_state, init);
        se_ = SEBlock<T>(store_, "bottleneck.se", sc[3], cfg_.se_ratio, init);
        refine_ = BasicBlock3d<T>(store_, "bottleneck.refine", sc[3], sc[3], 1, init, cfg_.dropout);
        dec3_ = DecoderStage<T>(store_, "decoder.stage1", "dpfr.stage1", sc[3], sc[2], 1, cfg_, init);
        dec2_ = DecoderStage<T>(store_, "decoder.stage2", "dpfr.stage2", sc[2], sc[1], 2, cfg_, init);
        dec1_ = DecoderStage<T>(store_, "decoder.stage3", "dpfr.stage3", sc[1], sc[0], 2, cfg_, init);
        if (cfg_.use_pfa) {
            pfa_ = PfaHead<T>(store_, "pfa", cfg_, init);
        } else {
            ConvSpec hs{sc[0], cfg_.num_classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, true};
            plain_head_ = Conv3dLayer<T>(store_, "pfa_off.head", hs, init);
        }
        if (cfg_.use_deep_supervision) {
            ConvSpec a3{sc[2], cfg_.num_classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, true};
            aux3_head_ = Conv3dLayer<T>(store_, "aux.head_d3", a3, init);
            ConvSpec a2{sc[1], cfg_.num_classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, true};
            aux2_head_ = Conv3dLayer<T>(store_, "aux.head_d2", a2, init);
            ConvSpec a1{sc[0], cfg_.num_classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, true};
            aux1_head_ = Conv3dLayer<T>(store_, "aux.head_d1", a1, init);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& store() { return store_; }
    const ParamStore<T>& store() const { return store_; }

    static void check_input(const Tensor<T>& x, const ModelConfig& cfg) {
        check(x.rank() == 4, "model: input must be (C, D, H, W), got " + shape_str(x.shape()));
        check(x.dim(0) == cfg.in_channels, "model: expected " + std::to_string(cfg.in_channels) +
                                               " input channels, got " + std::to_string(x.dim(0)));
        for (int a = 1; a <= 3; ++a)
            check(x.dim(a) % 8 == 0, "model: input extent " + std::to_string(x.dim(a)) + " on axis " +
                                         std::to_string(a) + " is not divisible by 8");
    }

    // with_aux selects whether the auxiliary heads are evaluated; normalization
    // and dropout behaviour follow ctx.training.
    ModelOutputs<T> forward(FwdCtx<T>& ctx, const ad::Var<T>& x, bool with_aux) const {
        check_input(x->value, cfg_);
        auto& tape = *ctx.tape;
        auto e1 = enc1_.forward(ctx, x);
        auto e2 = enc2_.forward(ctx, e1);
        auto e3 = enc3_.forward(ctx, e2);
        auto e4 = enc4_.forward(ctx, e3);
        auto b = refine_.forward(ctx, se_.forward(ctx, mamba_.forward(ctx, e4)));
        auto d3 = dec3_.forward(ctx, b, e3);
        auto d2 = dec2_.forward(ctx, d3, e2);
        auto d1 = dec1_.forward(ctx, d2, e1);
        ModelOutputs<T> out;
        if (cfg_.use_pfa) {
            out.final_logits = pfa_.forward(ctx, d1, d2, d3);
        } else {
            out.final_logits = ad::upsample_trilinear(tape, plain_head_.forward(ctx, d1), 2);
        }
        if (with_aux) {
            check(cfg_.use_deep_supervision, "model: auxiliary outputs requested but deep supervision is disabled");
            out.aux1 = ad::upsample_trilinear(tape, aux3_head_.forward(ctx, d3), 8);
            out.aux2 = ad::upsample_trilinear(tape, aux2_head_.forward(ctx, d2), 4);
            out.aux3 = ad::upsample_trilinear(tape, aux1_head_.forward(ctx, d1), 2);
        }
        return out;
    }

    // encoder part alone: returns (bottleneck input, skips)
    struct EncoderOut {
        ad::Var<T> bottleneck_in, s1, s2, s3;
    };
    EncoderOut encoder_forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        check_input(x->value, cfg_);
        EncoderOut eo;
        eo.s1 = enc1_.forward(ctx, x);
        eo.s2 = enc2_.forward(ctx, eo.s1);
        eo.s3 = enc3_.forward(ctx, eo.s2);
        eo.bottleneck_in = enc4_.forward(ctx, eo.s3);
        return eo;
    }

    ad::Var<T> bottleneck_forward(FwdCtx<T>& ctx, const ad::Var<T>& x) const {
        return refine_.forward(ctx, se_.forward(ctx, mamba_.forward(ctx, x)));
    }

    const GroupMamba3d<T>& mamba() const { return mamba_; }
    const SEBlock<T>& se() const { return se_; }
    const DecoderStage<T>& decoder_stage(int i) const { return i == 0 ? dec3_ : (i == 1 ? dec2_ : dec1_); }
    const PfaHead<T>& pfa() const { return pfa_; }

    int64_t param_count() const { return store_.count_trainable(); }

    std::map<std::string, int64_t> param_breakdown() const {
        std::map<std::string, int64_t> b;
        b["encoder"] = store_.count_prefix("encoder.");
        b["bottleneck"] = store_.count_prefix("bottleneck.");
        b["decoder"] = store_.count_prefix("decoder.");
        b["dpfr"] = store_.count_prefix("dpfr.");
        b["pfa"] = store_.count_prefix("pfa.") + store_.count_prefix("pfa_off.");
        b["aux_heads"] = store_.count_prefix("aux.");
        return b;
    }

private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    BasicBlock3d<T> enc1_, enc2_, enc3_, enc4_;
    GroupMamba3d<T> mamba_;
    SEBlock<T> se_;
    BasicBlock3d<T> refine_;
    DecoderStage<T> dec3_, dec2_, dec1_;
    PfaHead<T> pfa_;
    Conv3dLayer<T> plain_head_;
    Conv3dLayer<T> aux1_head_, aux2_head_, aux3_head_;
};

inline int64_t param_count(const ModelConfig& cfg, uint64_t seed = 0) {
    MmriNet<float> m(cfg, seed);
    return m.param_count();
}

} // namespace mmri
