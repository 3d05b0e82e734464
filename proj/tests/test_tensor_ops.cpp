#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmri/conv.hpp"
#include "mmri/norm.hpp"
#include "mmri/ops.hpp"
#include "mmri/pool.hpp"
#include "mmri/rng.hpp"

using namespace mmri;

namespace {

template <typename T>
Tensor<T> rand_tensor(Rng& rng, Shape sh, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(sh));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// Independent oracle: materialize the zero-padded input, then run the direct
// 7-deep loop nest.
Tensor<double> conv3d_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias,
                             const ConvSpec& s) {
    const int64_t D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Dp = D + 2 * s.padding[0], Hp = H + 2 * s.padding[1], Wp = W + 2 * s.padding[2];
    Tensor<double> xp({s.in_channels, Dp, Hp, Wp});
    for (int64_t c = 0; c < s.in_channels; ++c)
        for (int64_t d = 0; d < D; ++d)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w2 = 0; w2 < W; ++w2)
                    xp.at({c, d + s.padding[0], h + s.padding[1], w2 + s.padding[2]}) = x.at({c, d, h, w2});
    const auto out_sp = conv_out_extents(s, {D, H, W});
    Tensor<double> y({s.out_channels, out_sp[0], out_sp[1], out_sp[2]});
    const int64_t cpg_in = s.in_channels / s.groups, cpg_out = s.out_channels / s.groups;
    for (int64_t oc = 0; oc < s.out_channels; ++oc)
        for (int64_t od = 0; od < out_sp[0]; ++od)
            for (int64_t oh = 0; oh < out_sp[1]; ++oh)
                for (int64_t ow = 0; ow < out_sp[2]; ++ow) {
                    double acc = bias ? (*bias)[oc] : 0.0;
                    for (int64_t ici = 0; ici < cpg_in; ++ici)
                        for (int64_t kd = 0; kd < s.kernel[0]; ++kd)
                            for (int64_t kh = 0; kh < s.kernel[1]; ++kh)
                                for (int64_t kw = 0; kw < s.kernel[2]; ++kw) {
                                    const int64_t ic = (oc / cpg_out) * cpg_in + ici;
                                    const int64_t id = od * s.stride[0] + kd * s.dilation[0];
                                    const int64_t ih = oh * s.stride[1] + kh * s.dilation[1];
                                    const int64_t iw = ow * s.stride[2] + kw * s.dilation[2];
                                    acc += xp.at({ic, id, ih, iw}) * w.at({oc, ici, kd, kh, kw});
                                }
                    y.at({oc, od, oh, ow}) = acc;
                }
    return y;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

} // namespace

TEST_CASE("conv3d scalar product") {
    ad::Tape<double> tape;
    auto x = ad::make_leaf<double>(Tensor<double>({1, 1, 1, 1}, {3.0}));
    auto w = ad::make_leaf<double>(Tensor<double>({1, 1, 1, 1, 1}, {2.0}));
    ConvSpec s{1, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, false};
    auto y = ad::conv3d(tape, x, s, w);
    CHECK(y->value.size() == 1);
    CHECK(y->value[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("conv3d identity kernel (depthwise, center tap)") {
    Rng rng(11);
    auto xt = rand_tensor<double>(rng, {3, 4, 5, 4});
    ConvSpec s{3, 3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, 3, false};
    Tensor<double> w({3, 1, 3, 3, 3});
    for (int64_t c = 0; c < 3; ++c) w.at({c, 0, 1, 1, 1}) = 1.0;
    ad::Tape<double> tape;
    auto y = ad::conv3d(tape, ad::make_leaf(xt), s, ad::make_leaf(w));
    REQUIRE(y->value.shape() == xt.shape());
    for (int64_t i = 0; i < xt.size(); ++i) CHECK(y->value[i] == xt[i]);
}

TEST_CASE("conv3d matches brute-force loop oracle") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        ConvSpec s{2, 3, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}, 1, true};
        auto x = rand_tensor<double>(rng, {2, 4, 4, 4});
        auto w = rand_tensor<double>(rng, {3, 2, 3, 3, 3});
        auto b = rand_tensor<double>(rng, {3});
        auto ref = conv3d_oracle(x, w, &b, s);
        ad::Tape<double> tape;
        auto y = ad::conv3d(tape, ad::make_leaf(x), s, ad::make_leaf(w), ad::make_leaf(b));
        REQUIRE(y->value.shape() == ref.shape());
        for (int64_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(y->value[i] - ref[i]) <= 1e-12 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST_CASE("conv3d dilated + grouped matches oracle") {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 7 + 1);
        ConvSpec s{4, 4, {3, 3, 3}, {1, 1, 1}, {2, 2, 2}, {2, 2, 2}, 2, false};
        auto x = rand_tensor<double>(rng, {4, 5, 5, 5});
        auto w = rand_tensor<double>(rng, {4, 2, 3, 3, 3});
        auto ref = conv3d_oracle(x, w, nullptr, s);
        ad::Tape<double> tape;
        auto y = ad::conv3d(tape, ad::make_leaf(x), s, ad::make_leaf(w));
        for (int64_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(y->value[i] - ref[i]) <= 1e-12 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST_CASE("conv3d errors name the offending axis") {
    ad::Tape<double> tape;
    ConvSpec s{2, 3, {3, 3, 3}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}, 1, false};
    auto w = ad::make_leaf<double>(Tensor<double>({3, 2, 3, 3, 3}));
    // channel mismatch
    auto bad_x = ad::make_leaf<double>(Tensor<double>({3, 4, 4, 4}));
    CHECK_THROWS_WITH_AS(ad::conv3d(tape, bad_x, s, w), doctest::Contains("channel axis"), std::invalid_argument);
    // depth too small for the kernel
    auto tiny = ad::make_leaf<double>(Tensor<double>({2, 2, 4, 4}));
    CHECK_THROWS_WITH_AS(ad::conv3d(tape, tiny, s, w), doctest::Contains("depth"), std::invalid_argument);
}

TEST_CASE("conv_transpose3d single-voxel broadcast") {
    ad::Tape<double> tape;
    auto x = ad::make_leaf<double>(Tensor<double>({1, 1, 1, 1}, {1.0}));
    Tensor<double> w({1, 1, 2, 2, 2});
    w.fill(1.0);
    ConvSpec s{1, 1, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}, {1, 1, 1}, 1, false};
    auto y = ad::conv_transpose3d(tape, x, s, ad::make_leaf(w));
    REQUIRE(y->value.shape() == Shape{1, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) CHECK(y->value[i] == 1.0);
}

TEST_CASE("conv_transpose3d upsample shape 16ch 4^3 -> 8ch 8^3") {
    ad::Tape<float> tape;
    Rng rng(3);
    auto x = ad::make_leaf<float>(rand_tensor<float>(rng, {16, 4, 4, 4}));
    auto w = ad::make_leaf<float>(rand_tensor<float>(rng, {16, 8, 2, 2, 2}));
    ConvSpec s{16, 8, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}, {1, 1, 1}, 1, false};
    auto y = ad::conv_transpose3d(tape, x, s, w);
    CHECK(y->value.shape() == Shape{8, 8, 8, 8});
}

TEST_CASE("conv3d / conv_transpose3d adjoint identity") {
    struct Cfg {
        ConvSpec spec;
        Shape in;
    };
    const Cfg cfgs[] = {
        {{2, 3, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}, 1, false}, {2, 5, 5, 5}},
        {{2, 4, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}, {1, 1, 1}, 2, false}, {2, 4, 4, 4}},
        {{3, 3, {3, 3, 3}, {1, 1, 1}, {2, 2, 2}, {2, 2, 2}, 1, false}, {3, 5, 5, 5}},
    };
    for (const auto& cfg : cfgs) {
        for (uint64_t seed = 1; seed <= 10; ++seed) {
            Rng rng(seed);
            auto x = rand_tensor<double>(rng, cfg.in);
            auto w = rand_tensor<double>(
                rng, {cfg.spec.out_channels, cfg.spec.in_channels / cfg.spec.groups, cfg.spec.kernel[0],
                      cfg.spec.kernel[1], cfg.spec.kernel[2]});
            ad::Tape<double> tape;
            auto ax = ad::conv3d(tape, ad::make_leaf(x), cfg.spec, ad::make_leaf(w));
            auto y = rand_tensor<double>(rng, ax->value.shape());
            ConvSpec back = cfg.spec;
            std::swap(back.in_channels, back.out_channels);
            auto aty = ad::conv_transpose3d(tape, ad::make_leaf(y), back, ad::make_leaf(w));
            REQUIRE(aty->value.shape() == x.shape());
            const double lhs = dot(ax->value, y);
            const double rhs = dot(x, aty->value);
            CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max({1.0, std::abs(lhs), std::abs(rhs)}));
        }
    }
}

TEST_CASE("batch_norm3d constant input collapses to beta") {
    ad::Tape<double> tape;
    Tensor<double> x({2, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) x[i] = 3.5;      // channel 0
    for (int64_t i = 8; i < 16; ++i) x[i] = -1.25;   // channel 1
    auto gamma = ad::make_leaf<double>(Tensor<double>::full({2}, 1.0));
    auto beta = ad::make_leaf<double>(Tensor<double>({2}));
    auto y = ad::batch_norm3d<double>(tape, ad::make_leaf(x), gamma, beta, nullptr, true);
    for (int64_t i = 0; i < 16; ++i) CHECK(std::abs(y->value[i]) < 1e-12);
}

TEST_CASE("batch_norm3d gamma=0 beta=5 collapses to 5") {
    ad::Tape<double> tape;
    Rng rng(5);
    auto x = ad::make_leaf<double>(rand_tensor<double>(rng, {3, 2, 2, 2}));
    auto gamma = ad::make_leaf<double>(Tensor<double>({3}));
    auto beta = ad::make_leaf<double>(Tensor<double>::full({3}, 5.0));
    auto y = ad::batch_norm3d<double>(tape, x, gamma, beta, nullptr, true);
    for (int64_t i = 0; i < y->value.size(); ++i) CHECK(y->value[i] == 5.0);
}

TEST_CASE("batch_norm3d train output has mean 0 / var 1 before affine") {
    Rng rng(17);
    auto x = ad::make_leaf<double>(rand_tensor<double>(rng, {4, 4, 4, 4}, -3.0, 5.0));
    auto gamma = ad::make_leaf<double>(Tensor<double>::full({4}, 1.0));
    auto beta = ad::make_leaf<double>(Tensor<double>({4}));
    ad::Tape<double> tape;
    auto y = ad::batch_norm3d<double>(tape, x, gamma, beta, nullptr, true);
    const int64_t S = 64;
    for (int64_t c = 0; c < 4; ++c) {
        double m = 0, v = 0;
        for (int64_t i = 0; i < S; ++i) m += y->value[c * S + i];
        m /= S;
        for (int64_t i = 0; i < S; ++i) v += (y->value[c * S + i] - m) * (y->value[c * S + i] - m);
        v /= S;
        CHECK(std::abs(m) < 1e-6);
        CHECK(std::abs(v - 1.0) < 1e-5);
    }
}

TEST_CASE("batch_norm3d eval without running stats errors") {
    ad::Tape<double> tape;
    Rng rng(2);
    auto x = ad::make_leaf<double>(rand_tensor<double>(rng, {2, 2, 2, 2}));
    auto gamma = ad::make_leaf<double>(Tensor<double>::full({2}, 1.0));
    auto beta = ad::make_leaf<double>(Tensor<double>({2}));
    CHECK_THROWS_AS(ad::batch_norm3d<double>(tape, x, gamma, beta, nullptr, false), std::invalid_argument);
    RunningStats<double> stats; // never initialized
    CHECK_THROWS_AS(ad::batch_norm3d<double>(tape, x, gamma, beta, &stats, false), std::invalid_argument);
}

TEST_CASE("batch_norm3d running stats feed eval mode") {
    Rng rng(23);
    auto xt = rand_tensor<double>(rng, {2, 3, 3, 3}, -2.0, 2.0);
    auto gamma = ad::make_leaf<double>(Tensor<double>::full({2}, 1.0));
    auto beta = ad::make_leaf<double>(Tensor<double>({2}));
    RunningStats<double> stats;
    {
        ad::Tape<double> tape;
        ad::batch_norm3d<double>(tape, ad::make_leaf(xt), gamma, beta, &stats, true);
    }
    CHECK(stats.initialized);
    ad::Tape<double> tape;
    auto y = ad::batch_norm3d<double>(tape, ad::make_leaf(xt), gamma, beta, &stats, false);
    // first update seeds stats with the batch statistics, so eval must match train
    ad::Tape<double> tape2;
    auto yt = ad::batch_norm3d<double>(tape2, ad::make_leaf(xt), gamma, beta, nullptr, true);
    for (int64_t i = 0; i < y->value.size(); ++i) CHECK(y->value[i] == doctest::Approx(yt->value[i]).epsilon(1e-12));
}

TEST_CASE("layer_norm two-point standardization") {
    ad::Tape<double> tape;
    auto x = ad::make_leaf<double>(Tensor<double>({1, 2}, {1.0, 3.0}));
    auto gamma = ad::make_leaf<double>(Tensor<double>::full({2}, 1.0));
    auto beta = ad::make_leaf<double>(Tensor<double>({2}));
    auto y = ad::layer_norm(tape, x, 2, gamma, beta);
    CHECK(y->value[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y->value[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm constant vector -> zeros") {
    ad::Tape<double> tape;
    auto x = ad::make_leaf<double>(Tensor<double>::full({3, 4}, 2.75));
    auto gamma = ad::make_leaf<double>(Tensor<double>::full({4}, 1.0));
    auto beta = ad::make_leaf<double>(Tensor<double>({4}));
    auto y = ad::layer_norm(tape, x, 4, gamma, beta);
    for (int64_t i = 0; i < y->value.size(); ++i) CHECK(std::abs(y->value[i]) < 1e-12);
}

TEST_CASE("layer_norm random rows match recomputed statistics") {
    Rng rng(31);
    auto xt = rand_tensor<double>(rng, {5, 7}, -4.0, 4.0);
    ad::Tape<double> tape;
    auto gamma = ad::make_leaf<double>(Tensor<double>::full({7}, 1.0));
    auto beta = ad::make_leaf<double>(Tensor<double>({7}));
    auto y = ad::layer_norm(tape, ad::make_leaf(xt), 7, gamma, beta);
    for (int64_t r = 0; r < 5; ++r) {
        double m = 0, v = 0;
        for (int64_t j = 0; j < 7; ++j) m += y->value[r * 7 + j];
        m /= 7;
        for (int64_t j = 0; j < 7; ++j) v += (y->value[r * 7 + j] - m) * (y->value[r * 7 + j] - m);
        v /= 7;
        CHECK(std::abs(m) < 1e-6);
        CHECK(std::abs(v - 1.0) < 1e-5);
    }
}

TEST_CASE("pointwise activations") {
    ad::Tape<double> tape;
    auto x = ad::make_leaf<double>(Tensor<double>({3}, {-2.0, 0.0, 3.0}));
    auto r = ad::relu(tape, x);
    CHECK(r->value[0] == 0.0);
    CHECK(r->value[1] == 0.0);
    CHECK(r->value[2] == 3.0);
    auto s = ad::sigmoid(tape, ad::make_leaf<double>(Tensor<double>({1}, {0.0})));
    CHECK(s->value[0] == doctest::Approx(0.5).epsilon(1e-15));
    auto sm = ad::softmax(tape, ad::make_leaf<double>(Tensor<double>({2}, {0.0, 0.0})), 0);
    CHECK(sm->value[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(sm->value[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax sums to one and stays non-negative") {
    Rng rng(41);
    for (int rep = 0; rep < 20; ++rep) {
        auto xt = rand_tensor<double>(rng, {4, 6}, -30.0, 30.0);
        ad::Tape<double> tape;
        auto y = ad::softmax(tape, ad::make_leaf(xt), 1);
        for (int64_t r = 0; r < 4; ++r) {
            double s = 0;
            for (int64_t j = 0; j < 6; ++j) {
                CHECK(y->value[r * 6 + j] >= 0.0);
                s += y->value[r * 6 + j];
            }
            CHECK(std::abs(s - 1.0) < 1e-7);
        }
    }
}

TEST_CASE("global_avg_pool3d examples and oracle") {
    ad::Tape<double> tape;
    auto c1 = ad::global_avg_pool3d(tape, ad::make_leaf<double>(Tensor<double>::full({1, 2, 2, 2}, 4.2)));
    CHECK(c1->value[0] == doctest::Approx(4.2).epsilon(1e-15));
    Tensor<double> t({1, 2, 2, 2});
    t[7] = 1.0;
    auto c2 = ad::global_avg_pool3d(tape, ad::make_leaf(t));
    CHECK(c2->value[0] == doctest::Approx(0.125).epsilon(1e-15));
    Rng rng(9);
    auto xt = rand_tensor<double>(rng, {3, 3, 4, 5});
    auto y = ad::global_avg_pool3d(tape, ad::make_leaf(xt));
    for (int64_t c = 0; c < 3; ++c) {
        double acc = 0;
        for (int64_t i = 0; i < 60; ++i) acc += xt[c * 60 + i];
        CHECK(std::abs(y->value[c] - acc / 60.0) < 1e-12);
    }
}

TEST_CASE("dropout eval and p=0 are identities; train keeps ~95%") {
    Rng rng(7);
    auto xt = rand_tensor<float>(rng, {1000000});
    ad::Tape<float> tape;
    Rng mask_rng(123);
    auto ev = ad::dropout(tape, ad::make_leaf(xt), 0.05, mask_rng, false);
    for (int64_t i = 0; i < 1000; ++i) CHECK(ev->value[i] == xt[i]);
    auto p0 = ad::dropout(tape, ad::make_leaf(xt), 0.0, mask_rng, true);
    for (int64_t i = 0; i < 1000; ++i) CHECK(p0->value[i] == xt[i]);

    Rng mask_rng2(2024);
    auto tr = ad::dropout(tape, ad::make_leaf(xt), 0.05, mask_rng2, true);
    int64_t kept = 0;
    for (int64_t i = 0; i < tr->value.size(); ++i) kept += tr->value[i] != 0.0f || xt[i] == 0.0f;
    const double frac = static_cast<double>(kept) / static_cast<double>(xt.size());
    CHECK(frac > 0.948);
    CHECK(frac < 0.952);

    CHECK_THROWS_AS(ad::dropout(tape, ad::make_leaf(xt), 1.0, mask_rng2, true), std::invalid_argument);
    CHECK_THROWS_AS(ad::dropout(tape, ad::make_leaf(xt), -0.1, mask_rng2, true), std::invalid_argument);
}

TEST_CASE("dropout is deterministic for a fixed seed") {
    Rng rng(55);
    auto xt = rand_tensor<float>(rng, {512});
    ad::Tape<float> tape;
    Rng m1(99), m2(99);
    auto a = ad::dropout(tape, ad::make_leaf(xt), 0.05, m1, true);
    auto b = ad::dropout(tape, ad::make_leaf(xt), 0.05, m2, true);
    for (int64_t i = 0; i < a->value.size(); ++i) CHECK(a->value[i] == b->value[i]);
}

TEST_CASE("forward ops are bit-deterministic across runs and thread counts") {
    Rng rng(77);
    ConvSpec s{4, 8, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, 1, true};
    auto x = rand_tensor<float>(rng, {4, 6, 6, 6});
    auto w = rand_tensor<float>(rng, {8, 4, 3, 3, 3});
    auto b = rand_tensor<float>(rng, {8});
    auto run = [&]() {
        ad::Tape<float> tape;
        return ad::conv3d(tape, ad::make_leaf(x), s, ad::make_leaf(w), ad::make_leaf(b))->value;
    };
    set_num_threads(1);
    auto y1 = run();
    set_num_threads(2);
    auto y2 = run();
    auto y3 = run();
    REQUIRE(y1.size() == y2.size());
    for (int64_t i = 0; i < y1.size(); ++i) {
        CHECK(y1[i] == y2[i]);
        CHECK(y2[i] == y3[i]);
    }
}

TEST_CASE("all forward outputs stay finite on finite inputs") {
    Rng rng(83);
    auto x = rand_tensor<double>(rng, {2, 4, 4, 4}, -50.0, 50.0);
    ad::Tape<double> tape;
    auto xl = ad::make_leaf(x);
    CHECK(ad::relu(tape, xl)->value.all_finite());
    CHECK(ad::sigmoid(tape, xl)->value.all_finite());
    CHECK(ad::silu(tape, xl)->value.all_finite());
    CHECK(ad::softplus(tape, xl)->value.all_finite());
    CHECK(ad::softmax(tape, xl, 0)->value.all_finite());
    auto gamma = ad::make_leaf<double>(Tensor<double>::full({2}, 1.0));
    auto beta = ad::make_leaf<double>(Tensor<double>({2}));
    CHECK(ad::batch_norm3d<double>(tape, xl, gamma, beta, nullptr, true)->value.all_finite());
}
