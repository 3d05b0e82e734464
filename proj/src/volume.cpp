#include "mmri/volume.hpp"

#include <cmath>

#include "mmri/io.hpp"

namespace mmri {

void save_volume(const Volume& v, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(IoErrorKind::FileAccess, "cannot open " + path + " for writing");
    io::write_bytes(os, "MVOL", 4);
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<uint32_t>(v.channels()));
    io::write_u32(os, static_cast<uint32_t>(v.d()));
    io::write_u32(os, static_cast<uint32_t>(v.h()));
    io::write_u32(os, static_cast<uint32_t>(v.w()));
    for (float s : v.spacing) io::write_f32(os, s);
    io::write_f32_array(os, v.data.data(), static_cast<size_t>(v.data.size()));
}

Volume load_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(IoErrorKind::FileAccess, "cannot open " + path);
    io::expect_magic(is, "MVOL", "MVOL");
    const uint32_t version = io::read_u32(is, "version");
    if (version != 1)
        throw IoError(IoErrorKind::BadVersion, "unsupported MVOL version " + std::to_string(version));
    const uint32_t c = io::read_u32(is, "channels");
    const uint32_t d = io::read_u32(is, "depth");
    const uint32_t h = io::read_u32(is, "height");
    const uint32_t w = io::read_u32(is, "width");
    if (c == 0 || d == 0 || h == 0 || w == 0)
        throw IoError(IoErrorKind::Malformed, "MVOL header declares a zero extent");
    Volume v;
    for (auto& s : v.spacing) s = io::read_f32(is, "spacing");
    v.data = Tensor<float>({static_cast<int64_t>(c), static_cast<int64_t>(d), static_cast<int64_t>(h),
                            static_cast<int64_t>(w)});
    io::read_f32_array(is, v.data.data(), static_cast<size_t>(v.data.size()), "voxel payload");
    return v;
}

Volume normalize_nonzero(const Volume& v) {
    Volume out = v;
    const int64_t C = v.channels();
    const int64_t S = v.data.size() / C;
    for (int64_t c = 0; c < C; ++c) {
        const float* src = v.data.data() + c * S;
        float* dst = out.data.data() + c * S;
        double sum = 0;
        int64_t n = 0;
        for (int64_t i = 0; i < S; ++i)
            if (src[i] != 0.0f) {
                sum += src[i];
                ++n;
            }
        if (n < 2) continue;
        const double mean = sum / static_cast<double>(n);
        double var = 0;
        for (int64_t i = 0; i < S; ++i)
            if (src[i] != 0.0f) {
                const double d = src[i] - mean;
                var += d * d;
            }
        var /= static_cast<double>(n);
        if (var <= 0) continue;
        const double inv_std = 1.0 / std::sqrt(var);
        for (int64_t i = 0; i < S; ++i)
            if (src[i] != 0.0f) dst[i] = static_cast<float>((src[i] - mean) * inv_std);
    }
    return out;
}

CropOffsets draw_crop_offsets(Rng& rng, const Volume& v, const std::array<int64_t, 3>& size) {
    const std::array<int64_t, 3> ext{v.d(), v.h(), v.w()};
    CropOffsets at;
    for (int a = 0; a < 3; ++a) {
        check(size[a] >= 1 && size[a] <= ext[a], "random_crop: crop extent " + std::to_string(size[a]) +
                                                     " exceeds volume extent " + std::to_string(ext[a]));
        at.off[a] = rng.uniform_int(ext[a] - size[a] + 1);
    }
    return at;
}

Volume crop(const Volume& v, const CropOffsets& at, const std::array<int64_t, 3>& size) {
    const int64_t C = v.channels(), D = v.d(), H = v.h(), W = v.w();
    Volume out;
    out.spacing = v.spacing;
    out.data = Tensor<float>({C, size[0], size[1], size[2]});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t d = 0; d < size[0]; ++d)
            for (int64_t h = 0; h < size[1]; ++h) {
                const float* src = v.data.data() + ((c * D + at.off[0] + d) * H + at.off[1] + h) * W + at.off[2];
                float* dst = out.data.data() + ((c * size[0] + d) * size[1] + h) * size[2];
                std::copy(src, src + size[2], dst);
            }
    return out;
}

std::pair<Volume, Volume> random_crop(const Volume& image, const Volume& label, const std::array<int64_t, 3>& size,
                                      Rng& rng) {
    check(image.d() == label.d() && image.h() == label.h() && image.w() == label.w(),
          "random_crop: image and label extents differ");
    const CropOffsets at = draw_crop_offsets(rng, image, size);
    return {crop(image, at, size), crop(label, at, size)};
}

AugmentDraws draw_augment(Rng& rng, int64_t image_channels) {
    AugmentDraws d;
    for (int a = 0; a < 3; ++a) d.flip[a] = rng.bernoulli(0.5);
    d.scale.resize(static_cast<size_t>(image_channels));
    d.shift.resize(static_cast<size_t>(image_channels));
    for (int64_t c = 0; c < image_channels; ++c) {
        d.scale[static_cast<size_t>(c)] = static_cast<float>(rng.uniform(0.9, 1.1));
        d.shift[static_cast<size_t>(c)] = static_cast<float>(rng.uniform(-0.1, 0.1));
    }
    return d;
}

void apply_flips(Volume& v, const std::array<bool, 3>& flip) {
    const int64_t C = v.channels(), D = v.d(), H = v.h(), W = v.w();
    float* p = v.data.data();
    auto idx = [&](int64_t c, int64_t d, int64_t h, int64_t w) { return ((c * D + d) * H + h) * W + w; };
    if (flip[0]) {
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < D / 2; ++d)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t w = 0; w < W; ++w) std::swap(p[idx(c, d, h, w)], p[idx(c, D - 1 - d, h, w)]);
    }
    if (flip[1]) {
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < D; ++d)
                for (int64_t h = 0; h < H / 2; ++h)
                    for (int64_t w = 0; w < W; ++w) std::swap(p[idx(c, d, h, w)], p[idx(c, d, H - 1 - h, w)]);
    }
    if (flip[2]) {
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < D; ++d)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t w = 0; w < W / 2; ++w) std::swap(p[idx(c, d, h, w)], p[idx(c, d, h, W - 1 - w)]);
    }
}

std::pair<Volume, Volume> augment(const Volume& image, const Volume& label, Rng& rng) {
    const AugmentDraws draws = draw_augment(rng, image.channels());
    Volume img = image;
    Volume lbl = label;
    apply_flips(img, draws.flip);
    apply_flips(lbl, draws.flip);
    const int64_t S = img.data.size() / img.channels();
    for (int64_t c = 0; c < img.channels(); ++c) {
        const float s = draws.scale[static_cast<size_t>(c)];
        const float t = draws.shift[static_cast<size_t>(c)];
        float* row = img.data.data() + c * S;
        for (int64_t i = 0; i < S; ++i) row[i] = row[i] * s + t;
    }
    return {std::move(img), std::move(lbl)};
}

std::pair<Volume, Volume> synthesize_case(Rng& rng, const std::array<int64_t, 3>& extents,
                                          std::array<float, 3> spacing) {
    const int64_t D = extents[0], H = extents[1], W = extents[2];
    Volume img{Tensor<float>({4, D, H, W}), spacing};
    Volume lbl{Tensor<float>({3, D, H, W}), spacing};

    const double cd = D * rng.uniform(0.42, 0.58);
    const double ch = H * rng.uniform(0.42, 0.58);
    const double cw = W * rng.uniform(0.42, 0.58);
    const double base_r = 0.5 * static_cast<double>(std::min({D, H, W}));
    const double r_wt = base_r * rng.uniform(0.55, 0.68);
    const double r_tc = r_wt * rng.uniform(0.60, 0.72);
    const double r_et = r_tc * rng.uniform(0.50, 0.65);
    // per-axis anisotropy of the tumor
    const double ad = rng.uniform(0.85, 1.15), ah = rng.uniform(0.85, 1.15), aw = rng.uniform(0.85, 1.15);

    // modality intensity model: base level inside the brain mask plus region offsets
    const double base[4] = {0.55, 0.45, 0.40, 0.50};
    const double wt_off[4] = {-0.10, 0.00, 0.35, 0.30};
    const double tc_off[4] = {0.15, 0.10, 0.10, 0.05};
    const double et_off[4] = {0.20, 0.40, -0.05, 0.00};

    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                const double bd = (d - 0.5 * (D - 1)) / (0.5 * D);
                const double bh = (h - 0.5 * (H - 1)) / (0.5 * H);
                const double bw = (w - 0.5 * (W - 1)) / (0.5 * W);
                const bool brain = bd * bd + bh * bh + bw * bw <= 0.92;
                const double td = (d - cd) * ad, th = (h - ch) * ah, tw = (w - cw) * aw;
                const double rr = std::sqrt(td * td + th * th + tw * tw);
                const bool in_wt = brain && rr <= r_wt;
                const bool in_tc = brain && rr <= r_tc;
                const bool in_et = brain && rr <= r_et;
                const int64_t vox = (d * H + h) * W + w;
                const int64_t S = D * H * W;
                lbl.data[0 * S + vox] = in_wt ? 1.0f : 0.0f;
                lbl.data[1 * S + vox] = in_tc ? 1.0f : 0.0f;
                lbl.data[2 * S + vox] = in_et ? 1.0f : 0.0f;
                for (int64_t c = 0; c < 4; ++c) {
                    double v = 0.0;
                    if (brain) {
                        v = base[c];
                        if (in_wt) v += wt_off[c];
                        if (in_tc) v += tc_off[c];
                        if (in_et) v += et_off[c];
                        v += rng.uniform(-0.04, 0.04);
                        if (v == 0.0) v = 1e-4; // keep brain voxels in the non-zero statistics
                    }
                    img.data[c * S + vox] = static_cast<float>(v);
                }
            }
    return {std::move(img), std::move(lbl)};
}

} // namespace mmri
