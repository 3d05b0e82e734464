#include "mmri/gradcheck.hpp"

namespace mmri::gradcheck {

namespace {

using V = ad::Var<double>;
using Vs = std::vector<V>;
using Tp = ad::Tape<double>;

CheckResult unary_case(const std::string& name, uint64_t seed, bool offzero,
                       const std::function<V(Tp&, const V&)>& op) {
    Rng rng(seed);
    Shape sh{2, 3, 4};
    auto x = offzero ? random_tensor_offzero(rng, sh) : random_tensor(rng, sh, -2.0, 2.0);
    return check_gradient(name, {x}, [op, seed](Tp& t, const Vs& in) { return weighted_sum(t, op(t, in[0]), seed); });
}

ConvSpec make_spec(int64_t cin, int64_t cout, int64_t k, int64_t s, int64_t p, int64_t d, int64_t g, bool bias) {
    return ConvSpec{cin, cout, {k, k, k}, {s, s, s}, {p, p, p}, {d, d, d}, g, bias};
}

CheckResult conv_case(const std::string& name, uint64_t seed, const ConvSpec& spec, Shape in_sh, bool transpose) {
    Rng rng(seed);
    Shape wsh = transpose ? Shape{spec.in_channels, spec.out_channels / spec.groups, spec.kernel[0], spec.kernel[1],
                                  spec.kernel[2]}
                          : Shape{spec.out_channels, spec.in_channels / spec.groups, spec.kernel[0], spec.kernel[1],
                                  spec.kernel[2]};
    std::vector<Tensor<double>> inputs{random_tensor(rng, in_sh), random_tensor(rng, wsh, -0.5, 0.5)};
    if (spec.has_bias) inputs.push_back(random_tensor(rng, {spec.out_channels}, -0.3, 0.3));
    return check_gradient(name, std::move(inputs), [spec, transpose, seed](Tp& t, const Vs& in) {
        V b = spec.has_bias ? in[2] : nullptr;
        V y = transpose ? ad::conv_transpose3d(t, in[0], spec, in[1], b) : ad::conv3d(t, in[0], spec, in[1], b);
        return weighted_sum(t, y, seed);
    });
}

} // namespace

const std::vector<RegistryEntry>& op_registry() {
    static const std::vector<RegistryEntry> entries = {
        {"relu", [](uint64_t s) { return unary_case("relu", s, true, [](Tp& t, const V& x) { return ad::relu(t, x); }); }},
        {"sigmoid", [](uint64_t s) { return unary_case("sigmoid", s, false, [](Tp& t, const V& x) { return ad::sigmoid(t, x); }); }},
        {"silu", [](uint64_t s) { return unary_case("silu", s, false, [](Tp& t, const V& x) { return ad::silu(t, x); }); }},
        {"softplus", [](uint64_t s) { return unary_case("softplus", s, false, [](Tp& t, const V& x) { return ad::softplus(t, x); }); }},
        {"exp", [](uint64_t s) { return unary_case("exp", s, false, [](Tp& t, const V& x) { return ad::exp(t, x); }); }},
        {"neg", [](uint64_t s) { return unary_case("neg", s, false, [](Tp& t, const V& x) { return ad::neg(t, x); }); }},
        {"scale", [](uint64_t s) { return unary_case("scale", s, false, [](Tp& t, const V& x) { return ad::scale(t, x, 1.7); }); }},
        {"add",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("add", {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
                                   [s](Tp& t, const Vs& in) { return weighted_sum(t, ad::add(t, in[0], in[1]), s); });
         }},
        {"sub",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("sub", {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
                                   [s](Tp& t, const Vs& in) { return weighted_sum(t, ad::sub(t, in[0], in[1]), s); });
         }},
        {"mul",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("mul", {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
                                   [s](Tp& t, const Vs& in) { return weighted_sum(t, ad::mul(t, in[0], in[1]), s); });
         }},
        {"scale_by_scalar",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("scale_by_scalar", {random_tensor(rng, {3, 4}), random_tensor(rng, {1})},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::scale_by_scalar(t, in[0], in[1]), s);
                                   });
         }},
        {"sum_all",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("sum_all", {random_tensor(rng, {2, 3, 2})},
                                   [](Tp& t, const Vs& in) { return ad::sum_all(t, in[0]); });
         }},
        {"mean_all",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("mean_all", {random_tensor(rng, {2, 3, 2})},
                                   [](Tp& t, const Vs& in) { return ad::mean_all(t, in[0]); });
         }},
        {"linear",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("linear",
                                   {random_tensor(rng, {5}), random_tensor(rng, {4, 5}), random_tensor(rng, {4})},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::linear(t, in[0], in[1], in[2]), s);
                                   });
         }},
        {"linear_seq",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("linear_seq",
                                   {random_tensor(rng, {5, 7}), random_tensor(rng, {4, 5}), random_tensor(rng, {4})},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::linear_seq(t, in[0], in[1], in[2]), s);
                                   });
         }},
        {"softmax_axis0",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("softmax_axis0", {random_tensor(rng, {4, 3}, -2.0, 2.0)},
                                   [s](Tp& t, const Vs& in) { return weighted_sum(t, ad::softmax(t, in[0], 0), s); });
         }},
        {"softmax_axis1",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("softmax_axis1", {random_tensor(rng, {4, 3}, -2.0, 2.0)},
                                   [s](Tp& t, const Vs& in) { return weighted_sum(t, ad::softmax(t, in[0], 1), s); });
         }},
        {"channel_scale",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("channel_scale", {random_tensor(rng, {3, 2, 2, 2}), random_tensor(rng, {3})},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::channel_scale(t, in[0], in[1]), s);
                                   });
         }},
        {"concat0",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("concat0", {random_tensor(rng, {2, 3, 2}), random_tensor(rng, {3, 3, 2})},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::concat0(t, {in[0], in[1]}), s);
                                   });
         }},
        {"slice0",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("slice0", {random_tensor(rng, {5, 3, 2})}, [s](Tp& t, const Vs& in) {
                 return weighted_sum(t, ad::slice0(t, in[0], 1, 4), s);
             });
         }},
        {"reshape",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("reshape", {random_tensor(rng, {4, 6})}, [s](Tp& t, const Vs& in) {
                 return weighted_sum(t, ad::reshape(t, in[0], {2, 12}), s);
             });
         }},
        {"dropout",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("dropout", {random_tensor(rng, {4, 5})}, [s](Tp& t, const Vs& in) {
                 Rng mask_rng(s + 99);
                 return weighted_sum(t, ad::dropout(t, in[0], 0.3, mask_rng, true), s);
             });
         }},
        {"conv3d_k3s1p1",
         [](uint64_t s) { return conv_case("conv3d_k3s1p1", s, make_spec(2, 3, 3, 1, 1, 1, 1, true), {2, 4, 4, 4}, false); }},
        {"conv3d_k3s2p1",
         [](uint64_t s) { return conv_case("conv3d_k3s2p1", s, make_spec(2, 3, 3, 2, 1, 1, 1, true), {2, 5, 5, 5}, false); }},
        {"conv3d_dilated",
         [](uint64_t s) { return conv_case("conv3d_dilated", s, make_spec(2, 2, 3, 1, 2, 2, 1, true), {2, 6, 6, 6}, false); }},
        {"conv3d_depthwise",
         [](uint64_t s) { return conv_case("conv3d_depthwise", s, make_spec(4, 4, 3, 1, 1, 1, 4, true), {4, 4, 4, 4}, false); }},
        {"conv3d_pointwise",
         [](uint64_t s) { return conv_case("conv3d_pointwise", s, make_spec(3, 5, 1, 1, 0, 1, 1, false), {3, 3, 3, 3}, false); }},
        {"conv_transpose3d_k2s2",
         [](uint64_t s) {
             return conv_case("conv_transpose3d_k2s2", s, make_spec(3, 2, 2, 2, 0, 1, 1, true), {3, 3, 3, 3}, true);
         }},
        {"conv_transpose3d_k4s2p1",
         [](uint64_t s) {
             return conv_case("conv_transpose3d_k4s2p1", s, make_spec(2, 2, 4, 2, 1, 1, 1, true), {2, 3, 3, 3}, true);
         }},
        {"conv_transpose3d_k1s1",
         [](uint64_t s) {
             return conv_case("conv_transpose3d_k1s1", s, make_spec(4, 2, 1, 1, 0, 1, 1, true), {4, 3, 3, 3}, true);
         }},
        {"conv_transpose3d_grouped",
         [](uint64_t s) {
             return conv_case("conv_transpose3d_grouped", s, make_spec(4, 4, 2, 2, 0, 1, 2, false), {4, 2, 3, 2}, true);
         }},
        {"batch_norm3d_train",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("batch_norm3d_train",
                                   {random_tensor(rng, {3, 2, 3, 2}), random_tensor(rng, {3}, 0.5, 1.5),
                                    random_tensor(rng, {3}, -0.5, 0.5)},
                                   [s](Tp& t, const Vs& in) {
                                       auto y = ad::batch_norm3d<double>(t, in[0], in[1], in[2], nullptr, true);
                                       return weighted_sum(t, y, s);
                                   });
         }},
        {"batch_norm3d_eval",
         [](uint64_t s) {
             Rng rng(s);
             auto stats = std::make_shared<RunningStats<double>>();
             stats->mean = random_tensor(rng, {3}, -0.5, 0.5);
             stats->var = random_tensor(rng, {3}, 0.5, 2.0);
             stats->initialized = true;
             return check_gradient("batch_norm3d_eval",
                                   {random_tensor(rng, {3, 2, 3, 2}), random_tensor(rng, {3}, 0.5, 1.5),
                                    random_tensor(rng, {3}, -0.5, 0.5)},
                                   [s, stats](Tp& t, const Vs& in) {
                                       auto y = ad::batch_norm3d<double>(t, in[0], in[1], in[2], stats.get(), false);
                                       return weighted_sum(t, y, s);
                                   });
         }},
        {"layer_norm",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("layer_norm",
                                   {random_tensor(rng, {4, 6}), random_tensor(rng, {6}, 0.5, 1.5),
                                    random_tensor(rng, {6}, -0.5, 0.5)},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::layer_norm(t, in[0], 6, in[1], in[2]), s);
                                   });
         }},
        {"layer_norm_channel",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("layer_norm_channel",
                                   {random_tensor(rng, {5, 2, 2, 2}), random_tensor(rng, {5}, 0.5, 1.5),
                                    random_tensor(rng, {5}, -0.5, 0.5)},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::layer_norm_channel(t, in[0], in[1], in[2]), s);
                                   });
         }},
        {"global_avg_pool3d",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("global_avg_pool3d", {random_tensor(rng, {3, 2, 3, 2})},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::global_avg_pool3d(t, in[0]), s);
                                   });
         }},
        {"upsample_trilinear_x2",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("upsample_trilinear_x2", {random_tensor(rng, {2, 2, 3, 2})},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::upsample_trilinear(t, in[0], 2), s);
                                   });
         }},
        {"upsample_trilinear_x4",
         [](uint64_t s) {
             Rng rng(s);
             return check_gradient("upsample_trilinear_x4", {random_tensor(rng, {1, 2, 2, 2})},
                                   [s](Tp& t, const Vs& in) {
                                       return weighted_sum(t, ad::upsample_trilinear(t, in[0], 4), s);
                                   });
         }},
        {"flatten_unflatten",
         [](uint64_t s) {
             Rng rng(s);
             CheckResult all;
             all.name = "flatten_unflatten";
             all.pass = true;
             const ScanAxis axes[4] = {ScanAxis::H, ScanAxis::W, ScanAxis::D, ScanAxis::HW};
             const ScanDir dirs[2] = {ScanDir::Forward, ScanDir::Reverse};
             for (ScanAxis ax : axes)
                 for (ScanDir dir : dirs) {
                     ScanOrder o{ax, dir};
                     auto r = check_gradient(std::string("flatten_") + to_string(ax), {random_tensor(rng, {2, 2, 3, 2})},
                                             [s, o](Tp& t, const Vs& in) {
                                                 auto seq = ad::flatten_volume(t, in[0], o);
                                                 auto back = ad::unflatten_volume(t, seq, o, 2, 3, 2);
                                                 return weighted_sum(t, back, s);
                                             });
                     all.fold(r);
                 }
             return all;
         }},
        {"selective_scan",
         [](uint64_t s) {
             Rng rng(s);
             const int64_t dI = 3, dS = 4, L = 6;
             return check_gradient("selective_scan",
                                   {random_tensor(rng, {dI, L}), random_tensor(rng, {dI, L}, 0.05, 0.9),
                                    random_tensor(rng, {dI, dS}, -1.5, -0.1), random_tensor(rng, {dS, L}),
                                    random_tensor(rng, {dS, L}), random_tensor(rng, {dI})},
                                   [s](Tp& t, const Vs& in) {
                                       auto y = ad::selective_scan(t, in[0], in[1], in[2], in[3], in[4], in[5]);
                                       return weighted_sum(t, y, s);
                                   });
         }},
        {"dice_loss",
         [](uint64_t s) {
             Rng rng(s);
             auto target = random_binary(rng, {3, 3, 2, 2});
             return check_gradient("dice_loss", {random_tensor(rng, {3, 3, 2, 2}, 0.05, 0.95)},
                                   [target](Tp& t, const Vs& in) {
                                       auto tt = ad::make_leaf<double>(target, false);
                                       return ad::dice_loss(t, in[0], tt);
                                   });
         }},
        {"focal_loss",
         [](uint64_t s) {
             Rng rng(s);
             auto target = random_binary(rng, {3, 3, 2, 2});
             return check_gradient("focal_loss", {random_tensor(rng, {3, 3, 2, 2}, -2.0, 2.0)},
                                   [target](Tp& t, const Vs& in) {
                                       auto tt = ad::make_leaf<double>(target, false);
                                       return ad::focal_loss(t, in[0], tt, 2.0);
                                   });
         }},
        {"seg_loss",
         [](uint64_t s) {
             Rng rng(s);
             auto target = random_binary(rng, {2, 2, 2, 2});
             return check_gradient("seg_loss", {random_tensor(rng, {2, 2, 2, 2}, -2.0, 2.0)},
                                   [target](Tp& t, const Vs& in) {
                                       auto tt = ad::make_leaf<double>(target, false);
                                       return ad::seg_loss(t, in[0], tt);
                                   });
         }},
        {"deep_supervision_loss",
         [](uint64_t s) {
             Rng rng(s);
             auto target = random_binary(rng, {2, 2, 2, 2});
             std::vector<Tensor<double>> ins;
             for (int i = 0; i < 4; ++i) ins.push_back(random_tensor(rng, {2, 2, 2, 2}, -2.0, 2.0));
             return check_gradient("deep_supervision_loss", std::move(ins), [target](Tp& t, const Vs& in) {
                 auto tt = ad::make_leaf<double>(target, false);
                 return ad::deep_supervision_loss(t, in[0], in[1], in[2], in[3], tt);
             });
         }},
    };
    return entries;
}

const std::vector<RegistryEntry>& module_registry() {
    static const std::vector<RegistryEntry> entries = {
        {"basic_block3d",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             auto block = std::make_shared<BasicBlock3d<double>>(ps, "blk", 3, 5, 2, init, 0.0);
             return check_module("basic_block3d", ps, random_tensor(rng, {3, 4, 4, 4}),
                                 [block](FwdCtx<double>& ctx, const V& x) { return block->forward(ctx, x); }, s);
         }},
        {"se_block",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             auto block = std::make_shared<SEBlock<double>>(ps, "se", 8, 4, init);
             return check_module("se_block", ps, random_tensor(rng, {8, 2, 2, 2}),
                                 [block](FwdCtx<double>& ctx, const V& x) { return block->forward(ctx, x); }, s);
         }},
        {"cross_group_modulation",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             auto block = std::make_shared<CrossGroupModulation<double>>(ps, "mod", 8, init);
             return check_module("cross_group_modulation", ps, random_tensor(rng, {8, 2, 2, 2}),
                                 [block](FwdCtx<double>& ctx, const V& x) { return block->forward(ctx, x); }, s);
         }},
        {"mamba_group",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             auto block = std::make_shared<MambaGroup<double>>(ps, "mg", 4, 4, ScanOrder{ScanAxis::H, ScanDir::Forward},
                                                               init);
             return check_module("mamba_group", ps, random_tensor(rng, {4, 2, 3, 2}),
                                 [block](FwdCtx<double>& ctx, const V& x) { return block->forward(ctx, x); }, s);
         }},
        {"group_mamba3d",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             auto block = std::make_shared<GroupMamba3d<double>>(ps, "gm", 8, 4, 4, init);
             return check_module("group_mamba3d", ps, random_tensor(rng, {8, 2, 2, 2}),
                                 [block](FwdCtx<double>& ctx, const V& x) { return block->forward(ctx, x); }, s);
         }},
        {"dpfr",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             auto block = std::make_shared<DpfrBlock<double>>(ps, "dpfr", 6, 2, init);
             return check_module("dpfr", ps, random_tensor(rng, {6, 3, 3, 3}),
                                 [block](FwdCtx<double>& ctx, const V& x) { return block->forward(ctx, x); }, s);
         }},
        {"decoder_stage",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             ModelConfig cfg;
             cfg.dropout = 0.0;
             auto stage = std::make_shared<DecoderStage<double>>(ps, "dec", "dec_dpfr", 8, 4, 2, cfg, init);
             auto skip = ad::make_leaf<double>(random_tensor(rng, {4, 4, 4, 4}), false);
             return check_module("decoder_stage", ps, random_tensor(rng, {8, 2, 2, 2}),
                                 [stage, skip](FwdCtx<double>& ctx, const V& x) { return stage->forward(ctx, x, skip); },
                                 s);
         }},
        {"bottleneck",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             auto mamba = std::make_shared<GroupMamba3d<double>>(ps, "bott.mamba", 8, 4, 4, init);
             auto se = std::make_shared<SEBlock<double>>(ps, "bott.se", 8, 4, init);
             auto refine = std::make_shared<BasicBlock3d<double>>(ps, "bott.refine", 8, 8, 1, init, 0.0);
             return check_module("bottleneck", ps, random_tensor(rng, {8, 2, 2, 2}),
                                 [mamba, se, refine](FwdCtx<double>& ctx, const V& x) {
                                     return refine->forward(ctx, se->forward(ctx, mamba->forward(ctx, x)));
                                 },
                                 s);
         }},
        {"pfa_head",
         [](uint64_t s) {
             Rng rng(s);
             ParamStore<double> ps;
             InitCtx<double> init{Rng(s), true};
             ModelConfig cfg;
             cfg.stage_channels = {4, 8, 16, 32};
             cfg.dropout = 0.0;
             auto pfa = std::make_shared<PfaHead<double>>(ps, "pfa", cfg, init);
             auto d2 = ad::make_leaf<double>(random_tensor(rng, {8, 2, 2, 2}), false);
             auto d3 = ad::make_leaf<double>(random_tensor(rng, {16, 1, 1, 1}), false);
             return check_module("pfa_head", ps, random_tensor(rng, {4, 4, 4, 4}),
                                 [pfa, d2, d3](FwdCtx<double>& ctx, const V& x) { return pfa->forward(ctx, x, d2, d3); },
                                 s);
         }},
    };
    return entries;
}

CheckResult corrupted_fixture_check(uint64_t seed) {
    Rng rng(seed);
    // relu clone whose backward is off by 3 percent
    auto bad_relu = [](Tp& tape, const V& x) -> V {
        Tensor<double> y(x->value.shape());
        for (int64_t i = 0; i < y.size(); ++i) y[i] = std::max(0.0, x->value[i]);
        auto out = tape.output(std::move(y), x->requires_grad);
        if (tape.track(out)) {
            tape.record(out, [x, out]() {
                if (!out->has_grad) return;
                x->ensure_grad();
                for (int64_t i = 0; i < out->value.size(); ++i)
                    x->grad[i] += out->grad[i] * (x->value[i] > 0 ? 1.03 : 0.0);
            });
        }
        return out;
    };
    auto res = check_gradient("corrupt_fixture(relu)", {random_tensor_offzero(rng, {3, 4})},
                              [&](Tp& t, const Vs& in) { return weighted_sum(t, bad_relu(t, in[0]), seed); });
    return res;
}

} // namespace mmri::gradcheck
