#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmri/gradcheck.hpp"
#include "mmri/layers.hpp"
#include "mmri/scan.hpp"

using namespace mmri;

namespace {

// naive step-by-step recurrence with a dense state vector per channel
Tensor<double> scan_oracle(const Tensor<double>& u, const Tensor<double>& delta, const Tensor<double>& A,
                           const Tensor<double>& B, const Tensor<double>& C, const Tensor<double>& D) {
    const int64_t dI = u.dim(0), L = u.dim(1), dS = A.dim(1);
    Tensor<double> y({dI, L});
    for (int64_t i = 0; i < dI; ++i) {
        std::vector<double> h(static_cast<size_t>(dS), 0.0);
        for (int64_t t = 0; t < L; ++t) {
            const double dt = delta.at({i, t});
            const double xt = u.at({i, t});
            double out = 0.0;
            for (int64_t n = 0; n < dS; ++n) {
                const double abar = std::exp(dt * A.at({i, n}));
                const double bbar = dt * B.at({n, t});
                h[static_cast<size_t>(n)] = abar * h[static_cast<size_t>(n)] + bbar * xt;
                out += C.at({n, t}) * h[static_cast<size_t>(n)];
            }
            y.at({i, t}) = out + D[i] * xt;
        }
    }
    return y;
}

struct ScanInstance {
    Tensor<double> u, delta, A, B, C, D;
};

ScanInstance random_instance(Rng& rng, int64_t dI, int64_t dS, int64_t L) {
    ScanInstance si;
    si.u = gradcheck::random_tensor(rng, {dI, L});
    si.delta = gradcheck::random_tensor(rng, {dI, L}, 0.05, 0.9);
    si.A = gradcheck::random_tensor(rng, {dI, dS}, -1.5, -0.1);
    si.B = gradcheck::random_tensor(rng, {dS, L});
    si.C = gradcheck::random_tensor(rng, {dS, L});
    si.D = gradcheck::random_tensor(rng, {dI});
    return si;
}

Tensor<double> run_scan(const ScanInstance& si) {
    ad::Tape<double> tape;
    tape.set_recording(false);
    auto y = ad::selective_scan(tape, ad::make_leaf(si.u), ad::make_leaf(si.delta), ad::make_leaf(si.A),
                                ad::make_leaf(si.B), ad::make_leaf(si.C), ad::make_leaf(si.D));
    return y->value;
}

} // namespace

TEST_CASE("selective_scan L=1 closed form") {
    Rng rng(3);
    auto si = random_instance(rng, 4, 5, 1);
    auto y = run_scan(si);
    for (int64_t i = 0; i < 4; ++i) {
        double expect = si.D[i] * si.u.at({i, 0});
        for (int64_t n = 0; n < 5; ++n)
            expect += si.C.at({n, 0}) * (si.delta.at({i, 0}) * si.B.at({n, 0})) * si.u.at({i, 0});
        CHECK(y.at({i, 0}) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("selective_scan zero input gives zero output") {
    Rng rng(5);
    auto si = random_instance(rng, 3, 4, 8);
    si.u.fill(0.0);
    auto y = run_scan(si);
    for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("selective_scan matches the per-step recurrence oracle") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed);
        const int64_t L = 1 + rng.uniform_int(64);
        const int64_t dI = 1 + rng.uniform_int(6);
        const int64_t dS = 1 + rng.uniform_int(8);
        auto si = random_instance(rng, dI, dS, L);
        auto y = run_scan(si);
        auto ref = scan_oracle(si.u, si.delta, si.A, si.B, si.C, si.D);
        for (int64_t i = 0; i < y.size(); ++i)
            CHECK(std::abs(y[i] - ref[i]) <= 1e-10 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST_CASE("selective_scan rejects mismatched shapes") {
    Rng rng(2);
    auto si = random_instance(rng, 3, 4, 8);
    ad::Tape<double> tape;
    auto bad_B = gradcheck::random_tensor(rng, {4, 7});
    CHECK_THROWS_AS(ad::selective_scan(tape, ad::make_leaf(si.u), ad::make_leaf(si.delta), ad::make_leaf(si.A),
                                       ad::make_leaf(bad_B), ad::make_leaf(si.C), ad::make_leaf(si.D)),
                    std::invalid_argument);
}

TEST_CASE("flatten/unflatten round-trips exactly for all 8 scan orders") {
    Rng rng(11);
    auto xt = gradcheck::random_tensor(rng, {2, 3, 3, 3});
    for (ScanAxis ax : {ScanAxis::H, ScanAxis::W, ScanAxis::D, ScanAxis::HW}) {
        for (ScanDir dir : {ScanDir::Forward, ScanDir::Reverse}) {
            ScanOrder o{ax, dir};
            ad::Tape<double> tape;
            tape.set_recording(false);
            auto seq = ad::flatten_volume(tape, ad::make_leaf(xt), o);
            auto back = ad::unflatten_volume(tape, seq, o, 3, 3, 3);
            REQUIRE(back->value.shape() == xt.shape());
            for (int64_t i = 0; i < xt.size(); ++i) CHECK(back->value[i] == xt[i]);
        }
    }
}

TEST_CASE("flatten orders on the 1x1x2x2 example") {
    // x[(d=0, h, w)] laid out [[a, b], [c, d]]
    Tensor<double> x({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    ad::Tape<double> tape;
    tape.set_recording(false);
    auto w_seq = ad::flatten_volume(tape, ad::make_leaf(x), {ScanAxis::W, ScanDir::Forward});
    CHECK(w_seq->value[0] == 1.0);
    CHECK(w_seq->value[1] == 2.0);
    CHECK(w_seq->value[2] == 3.0);
    CHECK(w_seq->value[3] == 4.0);
    auto h_seq = ad::flatten_volume(tape, ad::make_leaf(x), {ScanAxis::H, ScanDir::Forward});
    CHECK(h_seq->value[0] == 1.0);
    CHECK(h_seq->value[1] == 3.0);
    CHECK(h_seq->value[2] == 2.0);
    CHECK(h_seq->value[3] == 4.0);
}

TEST_CASE("HW order equals W order on a single depth slice") {
    Rng rng(13);
    auto xt = gradcheck::random_tensor(rng, {3, 1, 4, 5});
    ad::Tape<double> tape;
    tape.set_recording(false);
    auto hw = ad::flatten_volume(tape, ad::make_leaf(xt), {ScanAxis::HW, ScanDir::Forward});
    auto w = ad::flatten_volume(tape, ad::make_leaf(xt), {ScanAxis::W, ScanDir::Forward});
    for (int64_t i = 0; i < hw->value.size(); ++i) CHECK(hw->value[i] == w->value[i]);
}

TEST_CASE("the four forward scan orders are pairwise distinct on a generic volume") {
    const int64_t D = 2, H = 3, W = 4;
    const ScanAxis axes[4] = {ScanAxis::H, ScanAxis::W, ScanAxis::D, ScanAxis::HW};
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) {
            auto pa = scan_permutation({axes[a], ScanDir::Forward}, D, H, W);
            auto pb = scan_permutation({axes[b], ScanDir::Forward}, D, H, W);
            CHECK(pa != pb);
        }
}

TEST_CASE("reverse direction reverses the sequence") {
    Rng rng(17);
    auto xt = gradcheck::random_tensor(rng, {1, 2, 2, 2});
    ad::Tape<double> tape;
    tape.set_recording(false);
    auto fwd = ad::flatten_volume(tape, ad::make_leaf(xt), {ScanAxis::D, ScanDir::Forward});
    auto rev = ad::flatten_volume(tape, ad::make_leaf(xt), {ScanAxis::D, ScanDir::Reverse});
    const int64_t L = 8;
    for (int64_t t = 0; t < L; ++t) CHECK(fwd->value[t] == rev->value[L - 1 - t]);
}

TEST_CASE("group_mamba3d zero-initialized mixing is a residual passthrough") {
    ParamStore<float> ps;
    InitCtx<float> init{Rng(5), false}; // standard init zero-initializes the mix layer
    GroupMamba3d<float> gm(ps, "gm", 8, 4, 4, init);
    Rng rng(5);
    Tensor<float> xt({8, 2, 3, 2});
    for (int64_t i = 0; i < xt.size(); ++i) xt[i] = static_cast<float>(rng.uniform(-1, 1));
    ad::Tape<float> tape;
    tape.set_recording(false);
    FwdCtx<float> ctx{&tape, false, nullptr};
    auto y = gm.forward(ctx, ad::make_leaf(xt));
    REQUIRE(y->value.shape() == xt.shape());
    for (int64_t i = 0; i < xt.size(); ++i) CHECK(y->value[i] == xt[i]);
}

TEST_CASE("group_mamba3d preserves shape for odd extents") {
    ParamStore<float> ps;
    InitCtx<float> init{Rng(6), true};
    GroupMamba3d<float> gm(ps, "gm", 8, 4, 4, init);
    Rng rng(6);
    Tensor<float> xt({8, 3, 5, 2});
    for (int64_t i = 0; i < xt.size(); ++i) xt[i] = static_cast<float>(rng.uniform(-1, 1));
    ad::Tape<float> tape;
    tape.set_recording(false);
    FwdCtx<float> ctx{&tape, false, nullptr};
    auto y = gm.forward(ctx, ad::make_leaf(xt));
    CHECK(y->value.shape() == xt.shape());
    CHECK(y->value.all_finite());
}

TEST_CASE("group_mamba3d rejects channels not divisible by groups") {
    ParamStore<float> ps;
    InitCtx<float> init{Rng(1), false};
    CHECK_THROWS_AS(GroupMamba3d<float>(ps, "gm", 10, 4, 4, init), std::invalid_argument);
}

TEST_CASE("4-group block is smaller than a single-group block of the same width") {
    ParamStore<float> ps4, ps1;
    InitCtx<float> i4{Rng(1), false}, i1{Rng(1), false};
    GroupMamba3d<float> g4(ps4, "g", 128, 4, 32, i4);
    GroupMamba3d<float> g1(ps1, "g", 128, 1, 32, i1);
    CHECK(ps4.count_trainable() < ps1.count_trainable());
}

TEST_CASE("cross_group_modulation zero-initialized gate halves through identity mixing") {
    ParamStore<float> ps;
    InitCtx<float> init{Rng(9), false};
    CrossGroupModulation<float> mod(ps, "mod", 8, init);
    // make the mix conv the identity so the 0.5 gate is visible
    mod.mix.w->value.fill(0.0f);
    for (int64_t c = 0; c < 8; ++c) mod.mix.w->value.at({c, c, 0, 0, 0}) = 1.0f;
    mod.mix.b->value.fill(0.0f);
    Rng rng(9);
    Tensor<float> xt({8, 2, 2, 2});
    for (int64_t i = 0; i < xt.size(); ++i) xt[i] = static_cast<float>(rng.uniform(-1, 1));
    ad::Tape<float> tape;
    tape.set_recording(false);
    FwdCtx<float> ctx{&tape, false, nullptr};
    auto y = mod.forward(ctx, ad::make_leaf(xt));
    // second linear layer is zero-initialized, so the gate is sigmoid(0) = 0.5
    for (int64_t i = 0; i < xt.size(); ++i) CHECK(y->value[i] == doctest::Approx(0.5f * xt[i]).epsilon(1e-6));
}

TEST_CASE("cross_group_modulation gate values stay in (0,1)") {
    ParamStore<float> ps;
    InitCtx<float> init{Rng(4), true};
    CrossGroupModulation<float> mod(ps, "mod", 8, init);
    Rng rng(4);
    Tensor<float> xt({8, 2, 2, 2});
    for (int64_t i = 0; i < xt.size(); ++i) xt[i] = static_cast<float>(rng.uniform(-5, 5));
    ad::Tape<float> tape;
    FwdCtx<float> ctx{&tape, false, nullptr};
    auto g = ad::global_avg_pool3d(tape, ad::make_leaf(xt));
    g = ad::silu(tape, mod.fc1.forward(ctx, g));
    g = ad::sigmoid(tape, mod.fc2.forward(ctx, g));
    for (int64_t i = 0; i < g->value.size(); ++i) {
        CHECK(g->value[i] > 0.0f);
        CHECK(g->value[i] < 1.0f);
    }
}
