#pragma once

#include <array>
#include <string>

#include "mmri/rng.hpp"
#include "mmri/tensor.hpp"

namespace mmri {

// Multi-modal 3D image: data laid out (C, D, H, W) with voxel spacing in mm.
// Images carry 4 modality channels (T1, T1ce, T2, FLAIR); label volumes carry
// 3 binary region channels (WT, TC, ET).
struct Volume {
    Tensor<float> data; // (C, D, H, W)
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};

    Volume() = default;
    Volume(Tensor<float> d, std::array<float, 3> sp) : data(std::move(d)), spacing(sp) {
        check(data.rank() == 4, "volume: data must be (C, D, H, W)");
    }

    int64_t channels() const { return data.dim(0); }
    int64_t d() const { return data.dim(1); }
    int64_t h() const { return data.dim(2); }
    int64_t w() const { return data.dim(3); }
};

// MVOL container: magic "MVOL", u32 version = 1, u32 channels, u32 D, u32 H,
// u32 W, three f32 spacings, then C*D*H*W little-endian f32 voxels.
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);

// Per-channel standardization over non-zero voxels; zero voxels stay zero.
// Channels with fewer than two non-zero voxels (or zero spread) pass through.
Volume normalize_nonzero(const Volume& v);

struct CropOffsets {
    std::array<int64_t, 3> off{0, 0, 0};
};

// offsets drawn uniformly over valid positions, axis order (d, h, w)
CropOffsets draw_crop_offsets(Rng& rng, const Volume& v, const std::array<int64_t, 3>& size);
Volume crop(const Volume& v, const CropOffsets& at, const std::array<int64_t, 3>& size);

// image and label cropped with the same offsets
std::pair<Volume, Volume> random_crop(const Volume& image, const Volume& label, const std::array<int64_t, 3>& size,
                                      Rng& rng);

// Augmentation draws, in order: one flip decision per axis (d, h, w), then per
// image channel a scale in [0.9, 1.1] followed by a shift in [-0.1, 0.1].
// Flips apply to image and label jointly; intensities only to the image.
struct AugmentDraws {
    std::array<bool, 3> flip{false, false, false};
    std::vector<float> scale, shift;
};
AugmentDraws draw_augment(Rng& rng, int64_t image_channels);
void apply_flips(Volume& v, const std::array<bool, 3>& flip);
std::pair<Volume, Volume> augment(const Volume& image, const Volume& label, Rng& rng);

// Synthetic training case: nested ellipsoid regions (WT > TC > ET) inside a
// brain-like support, with modality intensities that separate the regions.
std::pair<Volume, Volume> synthesize_case(Rng& rng, const std::array<int64_t, 3>& extents,
                                          std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f});

} // namespace mmri
