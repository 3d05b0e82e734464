#include "mmri/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

namespace mmri {

namespace {

constexpr double kInf = 1e30;

void check_binary(const Tensor<float>& m, const char* who) {
    for (int64_t i = 0; i < m.size(); ++i)
        check(m[i] == 0.0f || m[i] == 1.0f, std::string(who) + ": mask must be binary");
}

int64_t count_fg(const Tensor<float>& m) {
    int64_t n = 0;
    for (int64_t i = 0; i < m.size(); ++i) n += m[i] != 0.0f;
    return n;
}

// foreground voxels with a face-adjacent background neighbor
std::vector<int64_t> surface_voxels(const Tensor<float>& m) {
    const int64_t D = m.dim(0), H = m.dim(1), W = m.dim(2);
    std::vector<int64_t> surf;
    auto bg = [&](int64_t d, int64_t h, int64_t w) {
        if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return true;
        return m[(d * H + h) * W + w] == 0.0f;
    };
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                if (m[(d * H + h) * W + w] == 0.0f) continue;
                if (bg(d - 1, h, w) || bg(d + 1, h, w) || bg(d, h - 1, w) || bg(d, h + 1, w) || bg(d, h, w - 1) ||
                    bg(d, h, w + 1))
                    surf.push_back((d * H + h) * W + w);
            }
    return surf;
}

// 1-D squared distance transform (lower envelope of parabolas) on a grid with
// sample pitch `s`
void dt1d(const double* f, double* d, int n, double s, std::vector<int>& v, std::vector<double>& z) {
    v.assign(static_cast<size_t>(n), 0);
    z.assign(static_cast<size_t>(n) + 1, 0.0);
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        const double xq = q * s;
        double inter;
        while (true) {
            const int p = v[static_cast<size_t>(k)];
            const double xp = p * s;
            inter = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if (inter <= z[static_cast<size_t>(k)] && k > 0) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[static_cast<size_t>(k)] = q;
        z[static_cast<size_t>(k)] = inter;
        z[static_cast<size_t>(k) + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        const double xq = q * s;
        while (z[static_cast<size_t>(k) + 1] < xq) ++k;
        const double dx = xq - v[static_cast<size_t>(k)] * s;
        d[q] = dx * dx + f[v[static_cast<size_t>(k)]];
    }
}

// exact squared Euclidean distance field (mm^2) to the given source voxels
std::vector<double> sq_distance_field(const std::vector<int64_t>& sources, int64_t D, int64_t H, int64_t W,
                                      const std::array<float, 3>& spacing) {
    std::vector<double> field(static_cast<size_t>(D * H * W), kInf);
    for (int64_t s : sources) field[static_cast<size_t>(s)] = 0.0;

    std::vector<int> v;
    std::vector<double> z, f, dbuf;

    // along W
    f.resize(static_cast<size_t>(W));
    dbuf.resize(static_cast<size_t>(W));
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h) {
            double* row = field.data() + (d * H + h) * W;
            std::copy(row, row + W, f.begin());
            dt1d(f.data(), dbuf.data(), static_cast<int>(W), spacing[2], v, z);
            std::copy(dbuf.begin(), dbuf.end(), row);
        }
    // along H
    f.resize(static_cast<size_t>(H));
    dbuf.resize(static_cast<size_t>(H));
    for (int64_t d = 0; d < D; ++d)
        for (int64_t w = 0; w < W; ++w) {
            for (int64_t h = 0; h < H; ++h) f[static_cast<size_t>(h)] = field[static_cast<size_t>((d * H + h) * W + w)];
            dt1d(f.data(), dbuf.data(), static_cast<int>(H), spacing[1], v, z);
            for (int64_t h = 0; h < H; ++h) field[static_cast<size_t>((d * H + h) * W + w)] = dbuf[static_cast<size_t>(h)];
        }
    // along D
    f.resize(static_cast<size_t>(D));
    dbuf.resize(static_cast<size_t>(D));
    for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
            for (int64_t d = 0; d < D; ++d) f[static_cast<size_t>(d)] = field[static_cast<size_t>((d * H + h) * W + w)];
            dt1d(f.data(), dbuf.data(), static_cast<int>(D), spacing[0], v, z);
            for (int64_t d = 0; d < D; ++d) field[static_cast<size_t>((d * H + h) * W + w)] = dbuf[static_cast<size_t>(d)];
        }
    return field;
}

double percentile_linear(std::vector<double>& xs, double q) {
    std::sort(xs.begin(), xs.end());
    const size_t n = xs.size();
    if (n == 1) return xs[0];
    const double rank = q * static_cast<double>(n - 1);
    const size_t lo = static_cast<size_t>(rank);
    const size_t hi = std::min(lo + 1, n - 1);
    const double frac = rank - static_cast<double>(lo);
    return xs[lo] + frac * (xs[hi] - xs[lo]);
}

} // namespace

double dice_metric(const Tensor<float>& pred, const Tensor<float>& target) {
    check_same_shape(pred, target, "dice_metric");
    check_binary(pred, "dice_metric(pred)");
    check_binary(target, "dice_metric(target)");
    int64_t inter = 0, np = 0, nt = 0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0.0f, t = target[i] != 0.0f;
        inter += p && t;
        np += p;
        nt += t;
    }
    if (np + nt == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

double hd95_metric(const Tensor<float>& pred, const Tensor<float>& target, const std::array<float, 3>& spacing,
                   double sentinel) {
    check_same_shape(pred, target, "hd95_metric");
    check(pred.rank() == 3, "hd95_metric: masks must be (D, H, W)");
    check_binary(pred, "hd95_metric(pred)");
    check_binary(target, "hd95_metric(target)");
    const int64_t D = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
    const int64_t np = count_fg(pred), nt = count_fg(target);
    if (np == 0 && nt == 0) return 0.0;
    if (np == 0 || nt == 0) {
        if (sentinel >= 0) return sentinel;
        const double dd = D * spacing[0], hh = H * spacing[1], ww = W * spacing[2];
        return std::sqrt(dd * dd + hh * hh + ww * ww);
    }
    const auto surf_p = surface_voxels(pred);
    const auto surf_t = surface_voxels(target);
    const auto field_t = sq_distance_field(surf_t, D, H, W, spacing);
    const auto field_p = sq_distance_field(surf_p, D, H, W, spacing);
    std::vector<double> pooled;
    pooled.reserve(surf_p.size() + surf_t.size());
    for (int64_t p : surf_p) pooled.push_back(std::sqrt(field_t[static_cast<size_t>(p)]));
    for (int64_t t : surf_t) pooled.push_back(std::sqrt(field_p[static_cast<size_t>(t)]));
    return percentile_linear(pooled, 0.95);
}

std::array<RegionMask, 3> region_extract(const Tensor<float>& pred_probs, const std::array<float, 3>& spacing,
                                         float threshold) {
    check(pred_probs.rank() == 4 && pred_probs.dim(0) == 3,
          "region_extract: expected (3, D, H, W), got " + shape_str(pred_probs.shape()));
    const int64_t S = pred_probs.size() / 3;
    const Shape msh{pred_probs.dim(1), pred_probs.dim(2), pred_probs.dim(3)};
    std::array<RegionMask, 3> masks;
    const Region regions[3] = {Region::WT, Region::TC, Region::ET};
    for (int c = 0; c < 3; ++c) {
        masks[c].region = regions[c];
        masks[c].spacing = spacing;
        masks[c].voxels = Tensor<float>(msh);
        const float* src = pred_probs.data() + c * S;
        for (int64_t i = 0; i < S; ++i) masks[c].voxels[i] = src[i] >= threshold ? 1.0f : 0.0f;
    }
    return masks;
}

std::string MetricsReport::to_text() const {
    std::ostringstream os;
    os << "region    dice      hd95_mm\n";
    auto line = [&](const char* name, double d, double h) {
        os << name << "        " << d << "    " << h << "\n";
    };
    line("WT", dice_wt, hd95_wt);
    line("TC", dice_tc, hd95_tc);
    line("ET", dice_et, hd95_et);
    os << "avg       " << dice_avg() << "    " << hd95_avg() << "\n";
    return os.str();
}

std::string MetricsReport::to_kv() const {
    std::ostringstream os;
    os.precision(17);
    os << "dice_et=" << dice_et << "\n"
       << "dice_tc=" << dice_tc << "\n"
       << "dice_wt=" << dice_wt << "\n"
       << "dice_avg=" << dice_avg() << "\n"
       << "hd95_et=" << hd95_et << "\n"
       << "hd95_tc=" << hd95_tc << "\n"
       << "hd95_wt=" << hd95_wt << "\n"
       << "hd95_avg=" << hd95_avg() << "\n";
    return os.str();
}

MetricsReport compute_metrics(const Volume& pred, const Volume& label, double hd95_sentinel) {
    check(pred.channels() == 3 && label.channels() == 3, "compute_metrics: volumes must carry 3 region channels");
    check(pred.data.shape() == label.data.shape(), "compute_metrics: extent mismatch");
    const int64_t S = pred.data.size() / 3;
    const Shape msh{pred.d(), pred.h(), pred.w()};
    MetricsReport r;
    double* dice[3] = {&r.dice_wt, &r.dice_tc, &r.dice_et};
    double* hd[3] = {&r.hd95_wt, &r.hd95_tc, &r.hd95_et};
    for (int c = 0; c < 3; ++c) {
        Tensor<float> pm(msh, std::vector<float>(pred.data.data() + c * S, pred.data.data() + (c + 1) * S));
        Tensor<float> lm(msh, std::vector<float>(label.data.data() + c * S, label.data.data() + (c + 1) * S));
        *dice[c] = dice_metric(pm, lm);
        *hd[c] = hd95_metric(pm, lm, pred.spacing, hd95_sentinel);
    }
    return r;
}

} // namespace mmri
