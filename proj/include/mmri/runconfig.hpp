#pragma once

#include <string>

#include "mmri/model.hpp"
#include "mmri/trainer.hpp"

namespace mmri {

// Everything a command run needs; mirrors the JSON config schema documented in
// the README. Explicit command-line flags override file values.
struct RunConfig {
    ModelConfig model;
    uint64_t seed = 7;
    int threads = 0; // 0 keeps the OpenMP default
    std::array<int64_t, 3> crop{32, 32, 32};
    int64_t steps = 300;
    double lr = 3e-4;
    double weight_decay = 1e-2;
    int64_t batch_size = 1;
    bool augment = false;
    int64_t num_synthetic = 1;

    struct Paths {
        std::string image, label, pred, checkpoint, out_dir = ".";
    } paths;

    TrainConfig train() const {
        TrainConfig tc;
        tc.seed = seed;
        tc.crop = crop;
        tc.steps = steps;
        tc.lr = lr;
        tc.weight_decay = weight_decay;
        tc.batch_size = batch_size;
        tc.augment = augment;
        tc.num_synthetic = num_synthetic;
        return tc;
    }
};

RunConfig load_run_config(const std::string& path);

} // namespace mmri
