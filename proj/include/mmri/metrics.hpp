#pragma once

#include <array>
#include <string>

#include "mmri/tensor.hpp"
#include "mmri/volume.hpp"

namespace mmri {

enum class Region { WT, TC, ET };

inline const char* to_string(Region r) { return r == Region::WT ? "wt" : (r == Region::TC ? "tc" : "et"); }

struct RegionMask {
    Region region = Region::WT;
    Tensor<float> voxels; // (D, H, W), values in {0, 1}
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
};

// 2|P and T| / (|P| + |T|); both masks empty -> 1.0
double dice_metric(const Tensor<float>& pred, const Tensor<float>& target);

// 95th percentile (linear interpolation) of the pooled symmetric surface
// distance set, in mm. Surface voxels are foreground voxels with at least one
// face-adjacent background neighbor (outside the volume counts as background).
// Both masks empty -> 0; exactly one empty -> `sentinel` (negative sentinel
// selects the volume diagonal in mm).
double hd95_metric(const Tensor<float>& pred, const Tensor<float>& target, const std::array<float, 3>& spacing,
                   double sentinel = -1.0);

// binarize the three prediction channels; threshold is inclusive
// (channel order WT, TC, ET)
std::array<RegionMask, 3> region_extract(const Tensor<float>& pred_probs, const std::array<float, 3>& spacing,
                                         float threshold = 0.5f);

struct MetricsReport {
    double dice_wt = 0, dice_tc = 0, dice_et = 0;
    double hd95_wt = 0, hd95_tc = 0, hd95_et = 0;

    double dice_avg() const { return (dice_wt + dice_tc + dice_et) / 3.0; }
    double hd95_avg() const { return (hd95_wt + hd95_tc + hd95_et) / 3.0; }

    std::string to_text() const;
    std::string to_kv() const; // machine-readable key=value lines
};

// prediction and label as 3-channel binary volumes (WT, TC, ET)
MetricsReport compute_metrics(const Volume& pred, const Volume& label, double hd95_sentinel = -1.0);

} // namespace mmri
