#include "mmri/runconfig.hpp"

#include <fstream>

#include <json.hpp>

#include "mmri/io.hpp"

namespace mmri {

namespace {

using nlohmann::json;

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

template <typename T, size_t N>
void maybe_array(const json& j, const char* key, std::array<T, N>& out) {
    if (!j.contains(key)) return;
    const auto& arr = j.at(key);
    check(arr.is_array() && arr.size() == N, std::string("config: ") + key + " must be an array of " +
                                                 std::to_string(N) + " values");
    for (size_t i = 0; i < N; ++i) out[i] = arr[i].get<T>();
}

} // namespace

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(IoErrorKind::FileAccess, "cannot open config file " + path);
    json j;
    try {
        is >> j;
    } catch (const json::parse_error& e) {
        throw IoError(IoErrorKind::Malformed, "config file " + path + ": " + e.what());
    }
    RunConfig rc;
    maybe(j, "seed", rc.seed);
    maybe(j, "threads", rc.threads);
    maybe_array(j, "crop", rc.crop);
    maybe(j, "steps", rc.steps);
    maybe(j, "lr", rc.lr);
    maybe(j, "weight_decay", rc.weight_decay);
    maybe(j, "batch_size", rc.batch_size);
    maybe(j, "augment", rc.augment);
    maybe(j, "num_synthetic", rc.num_synthetic);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        maybe(m, "in_channels", rc.model.in_channels);
        maybe_array(m, "stage_channels", rc.model.stage_channels);
        maybe(m, "num_classes", rc.model.num_classes);
        maybe(m, "dropout", rc.model.dropout);
        maybe(m, "groups", rc.model.groups);
        maybe(m, "d_state", rc.model.d_state);
        maybe(m, "se_ratio", rc.model.se_ratio);
        maybe(m, "dpfr_dilation", rc.model.dpfr_dilation);
        maybe_array(m, "ds_weights", rc.model.ds_weights);
        maybe(m, "dpfr", rc.model.use_dpfr);
        maybe(m, "pfa", rc.model.use_pfa);
        maybe(m, "deep_supervision", rc.model.use_deep_supervision);
    }
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        maybe(p, "image", rc.paths.image);
        maybe(p, "label", rc.paths.label);
        maybe(p, "pred", rc.paths.pred);
        maybe(p, "checkpoint", rc.paths.checkpoint);
        maybe(p, "out_dir", rc.paths.out_dir);
    }
    rc.model.validate();
    return rc;
}

} // namespace mmri
