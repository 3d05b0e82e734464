#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mmri/gradcheck.hpp"
#include "mmri/losses.hpp"

using namespace mmri;

namespace {

double dice_oracle(const Tensor<double>& p, const Tensor<double>& q, double eps = 1e-5) {
    const int64_t C = p.dim(0);
    const int64_t S = p.size() / C;
    double total = 0;
    for (int64_t c = 0; c < C; ++c) {
        double spq = 0, sp = 0, sq = 0;
        for (int64_t i = 0; i < S; ++i) {
            spq += p[c * S + i] * q[c * S + i];
            sp += p[c * S + i];
            sq += q[c * S + i];
        }
        total += 1.0 - (2.0 * spq + eps) / (sp + sq + eps);
    }
    return total / static_cast<double>(C);
}

double focal_oracle(const Tensor<double>& z, const Tensor<double>& t, double gamma) {
    double acc = 0;
    for (int64_t i = 0; i < z.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z[i]));
        const double pt = t[i] == 1.0 ? p : 1.0 - p;
        acc += -std::pow(1.0 - pt, gamma) * std::log(std::max(pt, 1e-12));
    }
    return acc / static_cast<double>(z.size());
}

double eval_scalar(const std::function<ad::Var<double>(ad::Tape<double>&)>& f) {
    ad::Tape<double> tape;
    tape.set_recording(false);
    return f(tape)->value[0];
}

} // namespace

TEST_CASE("dice loss of a perfect binary prediction is ~0") {
    Rng rng(1);
    auto t = gradcheck::random_binary(rng, {3, 4, 4, 4});
    const double loss =
        eval_scalar([&](ad::Tape<double>& tp) { return ad::dice_loss(tp, ad::make_leaf(t), ad::make_leaf(t)); });
    CHECK(loss < 1e-4);
}

TEST_CASE("dice loss of the complementary prediction is ~1") {
    Rng rng(2);
    auto t = gradcheck::random_binary(rng, {3, 4, 4, 4});
    Tensor<double> inv = t;
    for (int64_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 - inv[i];
    const double loss =
        eval_scalar([&](ad::Tape<double>& tp) { return ad::dice_loss(tp, ad::make_leaf(inv), ad::make_leaf(t)); });
    CHECK(loss == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("dice loss matches the direct-sum oracle") {
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        Rng rng(seed);
        auto p = gradcheck::random_tensor(rng, {3, 4, 4, 4}, 0.0, 1.0);
        auto q = gradcheck::random_binary(rng, {3, 4, 4, 4});
        const double loss =
            eval_scalar([&](ad::Tape<double>& tp) { return ad::dice_loss(tp, ad::make_leaf(p), ad::make_leaf(q)); });
        CHECK(std::abs(loss - dice_oracle(p, q)) <= 1e-12);
    }
}

TEST_CASE("dice loss rejects shape mismatches") {
    ad::Tape<double> tape;
    auto p = ad::make_leaf<double>(Tensor<double>({3, 2, 2, 2}));
    auto q = ad::make_leaf<double>(Tensor<double>({3, 2, 2, 4}));
    CHECK_THROWS_AS(ad::dice_loss(tape, p, q), std::invalid_argument);
}

TEST_CASE("focal loss with gamma 0 equals binary cross-entropy") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        auto z = gradcheck::random_tensor(rng, {2, 3, 3, 3}, -3.0, 3.0);
        auto t = gradcheck::random_binary(rng, {2, 3, 3, 3});
        const double loss = eval_scalar(
            [&](ad::Tape<double>& tp) { return ad::focal_loss(tp, ad::make_leaf(z), ad::make_leaf(t), 0.0); });
        double bce = 0;
        for (int64_t i = 0; i < z.size(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-z[i]));
            bce += t[i] == 1.0 ? -std::log(p) : -std::log(1.0 - p);
        }
        bce /= static_cast<double>(z.size());
        CHECK(std::abs(loss - bce) <= 1e-12 * std::max(1.0, bce));
    }
}

TEST_CASE("focal loss vanishes as p_t -> 1") {
    Tensor<double> z({4}, {20.0, 20.0, -20.0, -20.0});
    Tensor<double> t({4}, {1.0, 1.0, 0.0, 0.0});
    const double loss =
        eval_scalar([&](ad::Tape<double>& tp) { return ad::focal_loss(tp, ad::make_leaf(z), ad::make_leaf(t), 2.0); });
    CHECK(loss < 1e-12);
}

TEST_CASE("focal loss matches the elementwise oracle") {
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        Rng rng(seed);
        auto z = gradcheck::random_tensor(rng, {3, 3, 2, 2}, -4.0, 4.0);
        auto t = gradcheck::random_binary(rng, {3, 3, 2, 2});
        const double loss = eval_scalar(
            [&](ad::Tape<double>& tp) { return ad::focal_loss(tp, ad::make_leaf(z), ad::make_leaf(t), 2.0); });
        CHECK(std::abs(loss - focal_oracle(z, t, 2.0)) <= 1e-12 * std::max(1.0, loss));
    }
}

TEST_CASE("focal loss rejects non-binary targets") {
    ad::Tape<double> tape;
    auto z = ad::make_leaf<double>(Tensor<double>({2}, {0.0, 0.0}));
    auto t = ad::make_leaf<double>(Tensor<double>({2}, {0.5, 1.0}));
    CHECK_THROWS_AS(ad::focal_loss(tape, z, t, 2.0), std::invalid_argument);
}

TEST_CASE("deep supervision with identical outputs collapses to one seg loss") {
    Rng rng(5);
    auto z = gradcheck::random_tensor(rng, {3, 2, 2, 2}, -2.0, 2.0);
    auto t = gradcheck::random_binary(rng, {3, 2, 2, 2});
    const double total = eval_scalar([&](ad::Tape<double>& tp) {
        auto zl = ad::make_leaf(z);
        auto tl = ad::make_leaf(t);
        return ad::deep_supervision_loss(tp, zl, zl, zl, zl, tl);
    });
    const double single =
        eval_scalar([&](ad::Tape<double>& tp) { return ad::seg_loss(tp, ad::make_leaf(z), ad::make_leaf(t)); });
    CHECK(total == doctest::Approx(single).epsilon(1e-12));
}

TEST_CASE("deep supervision of perfect outputs is ~0") {
    Rng rng(6);
    auto t = gradcheck::random_binary(rng, {3, 2, 2, 2});
    Tensor<double> z(t.shape());
    for (int64_t i = 0; i < z.size(); ++i) z[i] = t[i] == 1.0 ? 30.0 : -30.0;
    const double total = eval_scalar([&](ad::Tape<double>& tp) {
        auto zl = ad::make_leaf(z);
        auto tl = ad::make_leaf(t);
        return ad::deep_supervision_loss(tp, zl, zl, zl, zl, tl);
    });
    CHECK(total < 1e-4);
}

TEST_CASE("deep supervision equals the hand-computed weighted sum") {
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        Rng rng(seed);
        std::vector<Tensor<double>> outs;
        for (int i = 0; i < 4; ++i) outs.push_back(gradcheck::random_tensor(rng, {3, 2, 2, 2}, -3.0, 3.0));
        auto t = gradcheck::random_binary(rng, {3, 2, 2, 2});
        const double total = eval_scalar([&](ad::Tape<double>& tp) {
            auto tl = ad::make_leaf(t);
            return ad::deep_supervision_loss(tp, ad::make_leaf(outs[0]), ad::make_leaf(outs[1]),
                                             ad::make_leaf(outs[2]), ad::make_leaf(outs[3]), tl);
        });
        const double w[4] = {0.2, 0.3, 0.3, 0.2};
        double expect = 0;
        for (int i = 0; i < 4; ++i) {
            Tensor<double> probs(outs[i].shape());
            for (int64_t j = 0; j < probs.size(); ++j) probs[j] = 1.0 / (1.0 + std::exp(-outs[i][j]));
            expect += w[i] * (dice_oracle(probs, t) + focal_oracle(outs[i], t, 2.0));
        }
        CHECK(std::abs(total - expect) <= 1e-12 * std::max(1.0, std::abs(expect)));
    }
}

TEST_CASE("the default deep-supervision weights sum to one exactly") {
    ModelConfig cfg;
    const auto& w = cfg.ds_weights;
    CHECK((w[0] + w[3]) + (w[1] + w[2]) == 1.0);
}

TEST_CASE("dice + focal gradients pass finite differences") {
    Rng rng(9);
    auto t = gradcheck::random_binary(rng, {2, 3, 3, 3});
    auto res = gradcheck::check_gradient("dice_plus_focal", {gradcheck::random_tensor(rng, {2, 3, 3, 3}, -2.0, 2.0)},
                                         [t](ad::Tape<double>& tp, const std::vector<ad::Var<double>>& in) {
                                             auto tl = ad::make_leaf(t);
                                             return ad::seg_loss(tp, in[0], tl);
                                         });
    INFO(res.worst_at, " rel err ", res.max_rel_err);
    CHECK(res.pass);
}
