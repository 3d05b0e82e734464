#include "mmri/checkpoint.hpp"

#include "mmri/io.hpp"

namespace mmri {

namespace {

constexpr uint32_t kFormatVersion = 1;

void write_config(std::ostream& os, const ModelConfig& c) {
    io::write_u32(os, static_cast<uint32_t>(c.in_channels));
    for (int64_t s : c.stage_channels) io::write_u32(os, static_cast<uint32_t>(s));
    io::write_u32(os, static_cast<uint32_t>(c.num_classes));
    io::write_f64(os, c.dropout);
    io::write_u32(os, static_cast<uint32_t>(c.groups));
    io::write_u32(os, static_cast<uint32_t>(c.d_state));
    io::write_u32(os, static_cast<uint32_t>(c.se_ratio));
    io::write_u32(os, static_cast<uint32_t>(c.dpfr_dilation));
    for (double w : c.ds_weights) io::write_f64(os, w);
    const uint32_t flags = (c.use_dpfr ? 1u : 0u) | (c.use_pfa ? 2u : 0u) | (c.use_deep_supervision ? 4u : 0u);
    io::write_u32(os, flags);
}

ModelConfig read_config(std::istream& is) {
    ModelConfig c;
    c.in_channels = io::read_u32(is, "config");
    for (auto& s : c.stage_channels) s = io::read_u32(is, "config");
    c.num_classes = io::read_u32(is, "config");
    c.dropout = io::read_f64(is, "config");
    c.groups = io::read_u32(is, "config");
    c.d_state = io::read_u32(is, "config");
    c.se_ratio = io::read_u32(is, "config");
    c.dpfr_dilation = io::read_u32(is, "config");
    for (auto& w : c.ds_weights) w = io::read_f64(is, "config");
    const uint32_t flags = io::read_u32(is, "config");
    c.use_dpfr = flags & 1u;
    c.use_pfa = flags & 2u;
    c.use_deep_supervision = flags & 4u;
    return c;
}

void write_record(std::ostream& os, const std::string& name, const Tensor<float>& t) {
    io::write_u32(os, static_cast<uint32_t>(name.size()));
    io::write_bytes(os, name.data(), name.size());
    io::write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int64_t e : t.shape()) io::write_u32(os, static_cast<uint32_t>(e));
    io::write_f32_array(os, t.data(), static_cast<size_t>(t.size()));
}

std::pair<std::string, Tensor<float>> read_record(std::istream& is) {
    const uint32_t name_len = io::read_u32(is, "record name length");
    if (name_len > 4096) throw IoError(IoErrorKind::Malformed, "implausible record name length");
    std::string name(name_len, '\0');
    io::read_bytes(is, name.data(), name_len, "record name");
    const uint32_t rank = io::read_u32(is, "record rank");
    if (rank > 8) throw IoError(IoErrorKind::Malformed, "implausible record rank");
    Shape sh(rank);
    for (auto& e : sh) e = io::read_u32(is, "record extent");
    Tensor<float> t(sh);
    io::read_f32_array(is, t.data(), static_cast<size_t>(t.size()), "record data");
    return {std::move(name), std::move(t)};
}

} // namespace

void save_checkpoint(const MmriNet<float>& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(IoErrorKind::FileAccess, "cannot open " + path + " for writing");
    io::write_bytes(os, "MMRI", 4);
    io::write_u32(os, kFormatVersion);
    write_config(os, model.config());
    const auto& ps = model.store();
    io::write_u32(os, static_cast<uint32_t>(ps.params().size() + ps.buffers().size()));
    for (const auto& p : ps.params()) write_record(os, p.name, p.var->value);
    for (const auto& b : ps.buffers()) write_record(os, b.name, *b.tensor);
}

ModelConfig read_checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(IoErrorKind::FileAccess, "cannot open " + path);
    io::expect_magic(is, "MMRI", "checkpoint");
    const uint32_t version = io::read_u32(is, "version");
    if (version != kFormatVersion)
        throw IoError(IoErrorKind::BadVersion, "unsupported checkpoint version " + std::to_string(version));
    return read_config(is);
}

void load_checkpoint(MmriNet<float>& model, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(IoErrorKind::FileAccess, "cannot open " + path);
    io::expect_magic(is, "MMRI", "checkpoint");
    const uint32_t version = io::read_u32(is, "version");
    if (version != kFormatVersion)
        throw IoError(IoErrorKind::BadVersion, "unsupported checkpoint version " + std::to_string(version));
    (void)read_config(is);
    const uint32_t n = io::read_u32(is, "record count");
    auto& ps = model.store();
    size_t applied = 0;
    for (uint32_t i = 0; i < n; ++i) {
        auto [name, t] = read_record(is);
        bool found = false;
        for (const auto& p : ps.params()) {
            if (p.name == name) {
                check(p.var->value.shape() == t.shape(), "checkpoint: shape mismatch for " + name);
                p.var->value = std::move(t);
                found = true;
                break;
            }
        }
        if (!found) {
            for (const auto& b : ps.buffers()) {
                if (b.name == name) {
                    check(b.tensor->shape() == t.shape(), "checkpoint: shape mismatch for " + name);
                    *b.tensor = std::move(t);
                    found = true;
                    break;
                }
            }
        }
        if (!found) throw IoError(IoErrorKind::Malformed, "checkpoint record " + name + " has no matching tensor");
        ++applied;
    }
    check(applied == ps.params().size() + ps.buffers().size(), "checkpoint: missing records for some tensors");
}

} // namespace mmri
