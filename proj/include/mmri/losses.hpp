#pragma once

#include <array>

#include "mmri/autodiff.hpp"
#include "mmri/ops.hpp"
#include "mmri/parallel.hpp"

namespace mmri::ad {

// Soft Dice loss on per-channel probabilities vs binary targets, averaged over
// channels: 1 - (2 sum(p q) + eps) / (sum(p) + sum(q) + eps)
template <typename T>
Var<T> dice_loss(Tape<T>& tape, const Var<T>& probs, const Var<T>& target, T eps = T(1e-5)) {
    check_same_shape(probs->value, target->value, "dice_loss");
    check(probs->value.rank() >= 1, "dice_loss: bad rank");
    check(!target->requires_grad, "dice_loss: target must not require gradients");
    const int64_t C = probs->value.dim(0);
    const int64_t S = probs->value.size() / C;
    std::vector<double> sum_pq(C), sum_p(C), sum_q(C);
    const T* pv = probs->value.data();
    const T* qv = target->value.data();
    for (int64_t c = 0; c < C; ++c) {
        double spq = 0, sp = 0, sq = 0;
        const T* prow = pv + c * S;
        const T* qrow = qv + c * S;
        for (int64_t i = 0; i < S; ++i) {
            spq += static_cast<double>(prow[i]) * static_cast<double>(qrow[i]);
            sp += static_cast<double>(prow[i]);
            sq += static_cast<double>(qrow[i]);
        }
        sum_pq[c] = spq;
        sum_p[c] = sp;
        sum_q[c] = sq;
    }
    double loss = 0;
    for (int64_t c = 0; c < C; ++c)
        loss += 1.0 - (2.0 * sum_pq[c] + static_cast<double>(eps)) / (sum_p[c] + sum_q[c] + static_cast<double>(eps));
    loss /= static_cast<double>(C);
    auto out = tape.output(Tensor<T>::scalar(static_cast<T>(loss)), probs->requires_grad);
    if (tape.track(out)) {
        auto spq = std::make_shared<std::vector<double>>(std::move(sum_pq));
        auto sp = std::make_shared<std::vector<double>>(std::move(sum_p));
        auto sq = std::make_shared<std::vector<double>>(std::move(sum_q));
        tape.record(out, [probs, target, out, spq, sp, sq, C, S, eps]() {
            if (!out->has_grad) return;
            probs->ensure_grad();
            const double g = static_cast<double>(out->grad[0]) / static_cast<double>(C);
            const T* qv2 = target->value.data();
            T* gp = probs->grad.data();
            parallel_for(C, [&](int64_t c) {
                const double denom = (*sp)[c] + (*sq)[c] + static_cast<double>(eps);
                const double num = 2.0 * (*spq)[c] + static_cast<double>(eps);
                const T* qrow = qv2 + c * S;
                T* grow = gp + c * S;
                for (int64_t i = 0; i < S; ++i) {
                    const double dq = static_cast<double>(qrow[i]);
                    grow[i] += static_cast<T>(g * (num - 2.0 * dq * denom) / (denom * denom));
                }
            });
        });
    }
    return out;
}

// Binary focal loss on logits: mean of -(1 - p_t)^gamma log(p_t) with
// p_t = sigmoid(z) where target = 1, else 1 - sigmoid(z). log clamped at 1e-12.
template <typename T>
Var<T> focal_loss(Tape<T>& tape, const Var<T>& logits, const Var<T>& target, T gamma = T(2)) {
    check_same_shape(logits->value, target->value, "focal_loss");
    check(!target->requires_grad, "focal_loss: target must not require gradients");
    const int64_t N = logits->value.size();
    const T* zv = logits->value.data();
    const T* tv = target->value.data();
    for (int64_t i = 0; i < N; ++i)
        check(tv[i] == T(0) || tv[i] == T(1), "focal_loss: target must be binary, found " + std::to_string(static_cast<double>(tv[i])));
    static constexpr double kLogFloor = 1e-12;
    double acc = 0;
    for (int64_t i = 0; i < N; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(zv[i])));
        const double pt = tv[i] == T(1) ? p : 1.0 - p;
        acc += -std::pow(1.0 - pt, static_cast<double>(gamma)) * std::log(std::max(pt, kLogFloor));
    }
    acc /= static_cast<double>(N);
    auto out = tape.output(Tensor<T>::scalar(static_cast<T>(acc)), logits->requires_grad);
    if (tape.track(out)) {
        tape.record(out, [logits, target, out, gamma, N]() {
            if (!out->has_grad) return;
            logits->ensure_grad();
            const double g = static_cast<double>(out->grad[0]) / static_cast<double>(N);
            const double gam = static_cast<double>(gamma);
            const T* zv2 = logits->value.data();
            const T* tv2 = target->value.data();
            T* gz = logits->grad.data();
            parallel_for(N, [&](int64_t i) {
                const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(zv2[i])));
                const double pt = tv2[i] == T(1) ? p : 1.0 - p;
                const double ptc = std::max(pt, kLogFloor);
                const double one_m = 1.0 - pt;
                double dl_dpt = -std::pow(one_m, gam) * (pt > kLogFloor ? 1.0 / pt : 0.0);
                if (gam != 0.0) dl_dpt += gam * std::pow(one_m, gam - 1.0) * std::log(ptc);
                const double dpt_dz = (tv2[i] == T(1) ? 1.0 : -1.0) * p * (1.0 - p);
                gz[i] += static_cast<T>(g * dl_dpt * dpt_dz);
            }, 4096);
        });
    }
    return out;
}

// Dice + focal on one prediction
template <typename T>
Var<T> seg_loss(Tape<T>& tape, const Var<T>& logits, const Var<T>& target, T gamma = T(2)) {
    auto probs = sigmoid(tape, logits);
    auto d = dice_loss(tape, probs, target);
    auto f = focal_loss(tape, logits, target, gamma);
    return add(tape, d, f);
}

// Weighted deep-supervision total: 0.2 L(out1) + 0.3 L(out2) + 0.3 L(out3) + 0.2 L(final)
template <typename T>
Var<T> deep_supervision_loss(Tape<T>& tape, const Var<T>& out1, const Var<T>& out2, const Var<T>& out3,
                             const Var<T>& final_out, const Var<T>& target,
                             const std::array<T, 4>& weights = {T(0.2), T(0.3), T(0.3), T(0.2)}, T gamma = T(2)) {
    auto l1 = scale(tape, seg_loss(tape, out1, target, gamma), weights[0]);
    auto l2 = scale(tape, seg_loss(tape, out2, target, gamma), weights[1]);
    auto l3 = scale(tape, seg_loss(tape, out3, target, gamma), weights[2]);
    auto lf = scale(tape, seg_loss(tape, final_out, target, gamma), weights[3]);
    return add(tape, add(tape, l1, l2), add(tape, l3, lf));
}

} // namespace mmri::ad
