#pragma once

#include <functional>

#include "mmri/losses.hpp"
#include "mmri/metrics.hpp"
#include "mmri/model.hpp"
#include "mmri/optimizer.hpp"
#include "mmri/volume.hpp"

namespace mmri {

struct TrainConfig {
    uint64_t seed = 7;
    std::array<int64_t, 3> crop{32, 32, 32};
    int64_t steps = 300;
    double lr = 3e-4;
    double weight_decay = 1e-2;
    int64_t batch_size = 1;
    bool augment = false;
    int64_t num_synthetic = 1; // synthetic cases generated when no data is supplied

    void validate() const {
        for (int a = 0; a < 3; ++a)
            check(crop[a] > 0 && crop[a] % 8 == 0, "train: crop extent " + std::to_string(crop[a]) + " not divisible by 8");
        check(steps >= 0 && batch_size >= 1, "train: bad steps/batch size");
    }
};

struct TrainResult {
    std::vector<float> loss_log;   // per-step training loss
    float final_eval_loss = 0;     // dice+focal of the final prediction, eval mode
    MetricsReport train_metrics;   // metrics of the trained model on its own data
};

// One image/label pair, already normalized.
struct TrainCase {
    Volume image;
    Volume label;
};

inline std::vector<TrainCase> make_synthetic_dataset(const TrainConfig& cfg) {
    Rng base(cfg.seed);
    Rng data_rng = base.split(1);
    std::vector<TrainCase> cases;
    for (int64_t i = 0; i < cfg.num_synthetic; ++i) {
        Rng case_rng = data_rng.split(static_cast<uint64_t>(i));
        auto [img, lbl] = synthesize_case(case_rng, cfg.crop);
        cases.push_back({normalize_nonzero(img), std::move(lbl)});
    }
    return cases;
}

template <typename T>
Tensor<T> volume_to_tensor(const Volume& v) {
    return v.data.template cast<T>();
}

// Deterministic toy training loop: fixed learning rate AdamW, deep-supervision
// loss when the model carries auxiliary heads, dice+focal otherwise.
inline TrainResult train_toy(MmriNet<float>& model, const std::vector<TrainCase>& cases, const TrainConfig& cfg,
                             const std::function<void(int64_t, float)>& on_step = nullptr) {
    cfg.validate();
    check(!cases.empty(), "train: no training cases");
    Rng base(cfg.seed);
    Rng dropout_rng = base.split(2);
    Rng crop_rng = base.split(3);
    Rng aug_rng = base.split(4);

    AdamW<float> opt(model.store(), cfg.lr, cfg.weight_decay);
    const bool use_ds = model.config().use_deep_supervision;
    const auto& w = model.config().ds_weights;

    TrainResult res;
    res.loss_log.reserve(static_cast<size_t>(cfg.steps));
    for (int64_t step = 0; step < cfg.steps; ++step) {
        opt.zero_grad();
        double step_loss = 0;
        for (int64_t b = 0; b < cfg.batch_size; ++b) {
            const auto& tc = cases[static_cast<size_t>((step * cfg.batch_size + b) % static_cast<int64_t>(cases.size()))];
            Volume img = tc.image, lbl = tc.label;
            if (img.d() != cfg.crop[0] || img.h() != cfg.crop[1] || img.w() != cfg.crop[2] || cfg.augment) {
                auto cropped = random_crop(img, lbl, cfg.crop, crop_rng);
                img = std::move(cropped.first);
                lbl = std::move(cropped.second);
            }
            if (cfg.augment) {
                auto aug = augment(img, lbl, aug_rng);
                img = std::move(aug.first);
                lbl = std::move(aug.second);
            }
            ad::Tape<float> tape;
            FwdCtx<float> ctx{&tape, true, &dropout_rng};
            auto x = ad::make_leaf<float>(volume_to_tensor<float>(img), false);
            auto target = ad::make_leaf<float>(volume_to_tensor<float>(lbl), false);
            auto outs = model.forward(ctx, x, use_ds);
            ad::Var<float> loss;
            if (use_ds) {
                loss = ad::deep_supervision_loss(
                    tape, outs.aux1, outs.aux2, outs.aux3, outs.final_logits, target,
                    {static_cast<float>(w[0]), static_cast<float>(w[1]), static_cast<float>(w[2]),
                     static_cast<float>(w[3])});
            } else {
                loss = ad::seg_loss(tape, outs.final_logits, target);
            }
            if (cfg.batch_size > 1) loss = ad::scale(tape, loss, 1.0f / static_cast<float>(cfg.batch_size));
            tape.backward(loss);
            step_loss += static_cast<double>(loss->value[0]);
        }
        opt.step();
        const float logged = static_cast<float>(step_loss);
        res.loss_log.push_back(logged);
        if (on_step) on_step(step, logged);
    }

    // final evaluation pass on the first case, eval mode
    {
        ad::Tape<float> tape;
        tape.set_recording(false);
        FwdCtx<float> ctx{&tape, false, nullptr};
        const auto& tc = cases.front();
        auto x = ad::make_leaf<float>(volume_to_tensor<float>(tc.image), false);
        auto target = ad::make_leaf<float>(volume_to_tensor<float>(tc.label), false);
        auto outs = model.forward(ctx, x, false);
        auto loss = ad::seg_loss(tape, outs.final_logits, target);
        res.final_eval_loss = loss->value[0];
    }
    return res;
}

// eval-mode prediction metrics of the model on one case
inline MetricsReport evaluate_on_case(const MmriNet<float>& model, const TrainCase& tc, double hd95_sentinel = -1.0) {
    ad::Tape<float> tape;
    tape.set_recording(false);
    FwdCtx<float> ctx{&tape, false, nullptr};
    auto x = ad::make_leaf<float>(volume_to_tensor<float>(tc.image), false);
    auto outs = model.forward(ctx, x, false);
    auto probs = ad::sigmoid(tape, outs.final_logits);
    Volume pred{Tensor<float>(probs->value.shape()), tc.image.spacing};
    const auto masks = region_extract(probs->value, tc.image.spacing);
    const int64_t S = pred.data.size() / 3;
    for (int c = 0; c < 3; ++c)
        std::copy(masks[static_cast<size_t>(c)].voxels.data(), masks[static_cast<size_t>(c)].voxels.data() + S,
                  pred.data.data() + c * S);
    return compute_metrics(pred, tc.label, hd95_sentinel);
}

} // namespace mmri
