#pragma once

// SIFT descriptors at fixed geometry, dense per-pixel descriptor grids, a
// single-octave difference-of-Gaussians detector, and subpixel descriptor
// lookup with exact bilinear partials.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "kpdepth/errors.hpp"
#include "kpdepth/image.hpp"
#include "kpdepth/parallel.hpp"

namespace kpdepth {

inline constexpr int kDescriptorDim = 128;
inline constexpr int kSpatialBins = 4;
inline constexpr int kOrientationBins = 8;
inline constexpr double kDescriptorClamp = 0.2;
inline constexpr int kDefaultPatchSize = 15;

using Descriptor = std::array<double, kDescriptorDim>;

/// Flat index of histogram cell (row bin, column bin, orientation bin).
constexpr int descriptor_index(int ybin, int xbin, int obin) {
    return (ybin * kSpatialBins + xbin) * kOrientationBins + obin;
}

/// Per-pixel gradient magnitude and angle (atan2(gy, gx), y pointing down)
/// from central differences with replicated borders.
struct SiftGradients {
    int width = 0;
    int height = 0;
    std::vector<double> magnitude;
    std::vector<double> angle;
};

inline SiftGradients sift_gradients(const ImageBuffer& gray) {
    if (gray.channels() != 1)
        throw ConfigError("SIFT expects a grayscale image");
    SiftGradients g;
    g.width = gray.width();
    g.height = gray.height();
    g.magnitude.resize(gray.pixel_count());
    g.angle.resize(gray.pixel_count());
    const int w = g.width, h = g.height;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double gx = 0.5 * (gray.at(i, std::min(j + 1, w - 1)) - gray.at(i, std::max(j - 1, 0)));
            const double gy = 0.5 * (gray.at(std::min(i + 1, h - 1), j) - gray.at(std::max(i - 1, 0), j));
            const std::size_t p = static_cast<std::size_t>(i) * w + j;
            g.magnitude[p] = std::hypot(gx, gy);
            g.angle[p] = std::atan2(gy, gx);
        }
    return g;
}

/// L2-normalizes, then clamps at 0.2 and renormalizes to the fixed point of
/// that pair of operations: out = min(s * h, 0.2) with s chosen so that
/// |out| = 1. The fixed point needs at least 25 non-zero bins; below that
/// the single-pass clamp/renormalize/clamp result is used (norm < 1). The
/// zero histogram maps to the zero descriptor.
inline Descriptor normalize_descriptor(const Descriptor& hist) {
    Descriptor out{};
    double sq = 0.0;
    for (double v : hist)
        sq += v * v;
    if (sq <= 0.0)
        return out;
    const double inv = 1.0 / std::sqrt(sq);
    Descriptor unit;
    for (int l = 0; l < kDescriptorDim; ++l)
        unit[l] = hist[l] * inv;

    Descriptor sorted = unit;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    std::array<double, kDescriptorDim + 1> tail{}; // tail[k] = sum_{i>=k} sorted[i]^2
    for (int k = kDescriptorDim - 1; k >= 0; --k)
        tail[k] = tail[k + 1] + sorted[k] * sorted[k];

    const double cap2 = kDescriptorClamp * kDescriptorClamp;
    for (int k = 0; k < kDescriptorDim; ++k) {
        const double budget = 1.0 - cap2 * k;
        if (budget <= 0.0 || tail[k] <= 0.0)
            break;
        const double scale = std::sqrt(budget / tail[k]);
        if (scale * sorted[k] <= kDescriptorClamp) {
            for (int l = 0; l < kDescriptorDim; ++l)
                out[l] = std::min(scale * unit[l], kDescriptorClamp);
            return out;
        }
    }

    // Fewer than 25 non-zero bins: unit norm and the 0.2 cap cannot both hold.
    double sq2 = 0.0;
    for (int l = 0; l < kDescriptorDim; ++l) {
        out[l] = std::min(unit[l], kDescriptorClamp);
        sq2 += out[l] * out[l];
    }
    const double inv2 = 1.0 / std::sqrt(sq2);
    for (double& v : out)
        v = std::min(v * inv2, kDescriptorClamp);
    return out;
}

/// Raw (unnormalized) 4x4x8 histogram of the size x size patch centred on
/// (x, y), rotated by `orientation`.
///
/// Binning arithmetic, for a pixel at offset (dx, dy) from the centre:
///   rotated offset   rx =  cos(o) dx + sin(o) dy,  ry = -sin(o) dx + cos(o) dy
///   membership       |rx| < size/2 and |ry| < size/2
///   spatial bin pos  bx = (rx + size/2) / (size/4) - 0.5   (same for by)
///   orientation pos  bo = wrap(angle - o) * 8 / (2 pi) - 0.5, wrapped mod 8
///   weight           magnitude * exp(-(rx^2 + ry^2) / (2 sigma^2)), sigma = size/2
/// and the weight is split trilinearly between floor/floor+1 along each of
/// the three axes; spatial bins outside 0..3 are dropped. Pixels outside the
/// image contribute nothing.
inline Descriptor descriptor_histogram(const SiftGradients& g, double x, double y, double size,
                                       double orientation) {
    Descriptor hist{};
    const double half = 0.5 * size;
    const double bin_width = size / kSpatialBins;
    const double sigma = 0.5 * size;
    const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    const double two_pi = 2.0 * std::numbers::pi;
    const double co = std::cos(orientation);
    const double so = std::sin(orientation);
    const double reach = orientation == 0.0 ? half : half * std::numbers::sqrt2;

    const int col_lo = std::max(0, static_cast<int>(std::floor(x - reach)) + 1);
    const int col_hi = std::min(g.width - 1, static_cast<int>(std::ceil(x + reach)) - 1);
    const int row_lo = std::max(0, static_cast<int>(std::floor(y - reach)) + 1);
    const int row_hi = std::min(g.height - 1, static_cast<int>(std::ceil(y + reach)) - 1);

    for (int r = row_lo; r <= row_hi; ++r) {
        for (int c = col_lo; c <= col_hi; ++c) {
            const std::size_t p = static_cast<std::size_t>(r) * g.width + c;
            const double mag = g.magnitude[p];
            if (mag == 0.0)
                continue;
            const double dx = c - x;
            const double dy = r - y;
            const double rx = co * dx + so * dy;
            const double ry = -so * dx + co * dy;
            if (std::abs(rx) >= half || std::abs(ry) >= half)
                continue;

            const double bx = (rx + half) / bin_width - 0.5;
            const double by = (ry + half) / bin_width - 0.5;
            double rel = std::fmod(g.angle[p] - orientation, two_pi);
            if (rel < 0.0)
                rel += two_pi;
            const double bo = rel * kOrientationBins / two_pi - 0.5;

            const double weight = mag * std::exp(-(rx * rx + ry * ry) * inv_two_sigma2);
            const int x0 = static_cast<int>(std::floor(bx));
            const int y0 = static_cast<int>(std::floor(by));
            const int o0 = static_cast<int>(std::floor(bo));
            const double fx = bx - x0, fy = by - y0, fo = bo - o0;

            for (int sy = 0; sy < 2; ++sy) {
                const int yb = y0 + sy;
                if (yb < 0 || yb >= kSpatialBins)
                    continue;
                const double wy = sy ? fy : 1.0 - fy;
                for (int sx = 0; sx < 2; ++sx) {
                    const int xb = x0 + sx;
                    if (xb < 0 || xb >= kSpatialBins)
                        continue;
                    const double wx = sx ? fx : 1.0 - fx;
                    for (int so_ = 0; so_ < 2; ++so_) {
                        const int ob = ((o0 + so_) % kOrientationBins + kOrientationBins) % kOrientationBins;
                        const double wo = so_ ? fo : 1.0 - fo;
                        hist[descriptor_index(yb, xb, ob)] += weight * wy * wx * wo;
                    }
                }
            }
        }
    }
    return hist;
}

inline void check_descriptor_args(const ImageBuffer& gray, double x, double y, double size) {
    if (gray.channels() != 1)
        throw ConfigError("SIFT expects a grayscale image");
    if (!(size >= 3.0))
        throw ConfigError("descriptor patch size must be at least 3");
    if (!(x >= 0.0 && y >= 0.0 && x <= gray.width() - 1 && y <= gray.height() - 1))
        throw ConfigError("descriptor centre lies outside the image");
}

inline Descriptor compute_descriptor(const ImageBuffer& gray, double x, double y,
                                     double size = kDefaultPatchSize, double orientation = 0.0) {
    check_descriptor_args(gray, x, y, size);
    return normalize_descriptor(descriptor_histogram(sift_gradients(gray), x, y, size, orientation));
}

/// One 128-d descriptor per pixel, row-major H x W x 128.
class DescriptorGrid {
public:
    DescriptorGrid() = default;
    DescriptorGrid(int width, int height)
        : width_(width), height_(height),
          values_(static_cast<std::size_t>(width) * height * kDescriptorDim, 0.0) {
        if (width <= 0 || height <= 0)
            throw ConfigError("descriptor grid dimensions must be positive");
    }

    int width() const { return width_; }
    int height() const { return height_; }

    std::span<const double, kDescriptorDim> at(int row, int col) const {
        return std::span<const double, kDescriptorDim>(values_.data() + offset(row, col), kDescriptorDim);
    }
    std::span<double, kDescriptorDim> at(int row, int col) {
        return std::span<double, kDescriptorDim>(values_.data() + offset(row, col), kDescriptorDim);
    }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }

    friend bool operator==(const DescriptorGrid&, const DescriptorGrid&) = default;

private:
    std::size_t offset(int row, int col) const {
        return (static_cast<std::size_t>(row) * width_ + col) * kDescriptorDim;
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<double> values_;
};

inline DescriptorGrid compute_dense_grid(const ImageBuffer& gray, double size = kDefaultPatchSize) {
    check_descriptor_args(gray, 0.0, 0.0, size);
    const SiftGradients g = sift_gradients(gray);
    DescriptorGrid grid(gray.width(), gray.height());
    parallel_for(static_cast<std::size_t>(gray.height()), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
            for (int j = 0; j < gray.width(); ++j) {
                const Descriptor d = normalize_descriptor(
                    descriptor_histogram(g, static_cast<double>(j), static_cast<double>(i), size, 0.0));
                std::copy(d.begin(), d.end(), grid.at(static_cast<int>(i), j).begin());
            }
    });
    return grid;
}

struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    double size = kDefaultPatchSize;
    double orientation = 0.0;
    double response = 0.0;
};

struct KeypointSet {
    std::vector<Keypoint> keypoints;

    bool empty() const { return keypoints.empty(); }
    std::size_t size() const { return keypoints.size(); }
};

struct DetectorParams {
    int max_count = 500;
    double contrast_threshold = 0.03;
    double base_sigma = 1.2;
    int intervals = 3; // DoG levels searched for extrema
    double keypoint_size = kDefaultPatchSize;
};

/// Difference-of-Gaussians extrema over one octave: blurs at base * k^s with
/// k = 2^(1/intervals), s = 0..intervals+2, give intervals+2 DoG levels and
/// extrema are searched on the interior ones. A blob of width sigma peaks
/// near blur sigma / sqrt(k), so the default base of 1.2 covers blobs of
/// roughly 1.7 to 2.7 px. Candidates must beat the
/// contrast threshold and be extrema of their 3x3x3 neighbourhood; they are
/// ranked by |response| (ties broken by row, then column), thinned so no two
/// are within 1.5 px, and truncated to max_count.
inline KeypointSet detect_keypoints(const ImageBuffer& gray, const DetectorParams& params = {}) {
    if (gray.channels() != 1)
        throw ConfigError("detector expects a grayscale image");
    if (params.max_count < 1)
        throw ConfigError("max_count must be at least 1");
    if (params.intervals < 1)
        throw ConfigError("intervals must be at least 1");
    const int levels = params.intervals + 2;
    const double k = std::pow(2.0, 1.0 / params.intervals);
    std::vector<ImageBuffer> blurred;
    for (int s = 0; s <= levels; ++s)
        blurred.push_back(gaussian_blur(gray, params.base_sigma * std::pow(k, s)));
    const int w = gray.width(), h = gray.height();
    std::vector<std::vector<double>> dog(static_cast<std::size_t>(levels));
    for (int s = 0; s < levels; ++s) {
        dog[s].resize(gray.pixel_count());
        for (std::size_t p = 0; p < gray.pixel_count(); ++p)
            dog[s][p] = blurred[s + 1].data()[p] - blurred[s].data()[p];
    }

    struct Candidate {
        long long key; // |response| on a 1e-12 grid, so near-equal responses tie
        int row, col;
        double response;
    };
    std::vector<Candidate> candidates;
    for (int lvl = 1; lvl + 1 < levels; ++lvl)
        for (int i = 1; i + 1 < h; ++i)
            for (int j = 1; j + 1 < w; ++j) {
                const double val = dog[lvl][static_cast<std::size_t>(i) * w + j];
                if (std::abs(val) < params.contrast_threshold)
                    continue;
                bool is_max = true, is_min = true;
                for (int s = lvl - 1; s <= lvl + 1 && (is_max || is_min); ++s)
                    for (int di = -1; di <= 1; ++di)
                        for (int dj = -1; dj <= 1; ++dj) {
                            if (s == lvl && di == 0 && dj == 0)
                                continue;
                            const double n = dog[s][static_cast<std::size_t>(i + di) * w + (j + dj)];
                            is_max = is_max && val >= n;
                            is_min = is_min && val <= n;
                        }
                if (is_max || is_min)
                    candidates.push_back({std::llround(std::abs(val) * 1e12), i, j, val});
            }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.key != b.key)
            return a.key > b.key;
        if (a.row != b.row)
            return a.row < b.row;
        return a.col < b.col;
    });

    KeypointSet out;
    for (const Candidate& c : candidates) {
        if (static_cast<int>(out.keypoints.size()) >= params.max_count)
            break;
        const bool crowded = std::any_of(out.keypoints.begin(), out.keypoints.end(), [&](const Keypoint& kp) {
            const double dx = kp.x - c.col, dy = kp.y - c.row;
            return dx * dx + dy * dy < 1.5 * 1.5;
        });
        if (crowded)
            continue;
        out.keypoints.push_back({static_cast<double>(c.col), static_cast<double>(c.row),
                                 params.keypoint_size, 0.0, c.response});
    }
    return out;
}

inline KeypointSet detect_keypoints(const ImageBuffer& gray, int max_count, double contrast_threshold) {
    DetectorParams p;
    p.max_count = max_count;
    p.contrast_threshold = contrast_threshold;
    return detect_keypoints(gray, p);
}

struct DescriptorSample {
    Descriptor value{};
    Descriptor d_du{};
    Descriptor d_dv{};
    bool in_bounds = false;
};

/// Elementwise bilinear interpolation of the grid at (u, v).
inline DescriptorSample sample_descriptor(const DescriptorGrid& grid, double u, double v) {
    DescriptorSample s;
    const BilinearCell c = locate_cell(grid.width(), grid.height(), u, v);
    if (!c.in_bounds)
        return s;
    s.in_bounds = true;
    const auto d00 = grid.at(c.row0, c.col0);
    const auto d10 = grid.at(c.row0, c.col1);
    const auto d01 = grid.at(c.row1, c.col0);
    const auto d11 = grid.at(c.row1, c.col1);
    const double a = c.a, b = c.b;
    for (int l = 0; l < kDescriptorDim; ++l) {
        s.value[l] = (1 - a) * (1 - b) * d00[l] + a * (1 - b) * d10[l] + (1 - a) * b * d01[l] + a * b * d11[l];
        s.d_du[l] = (1 - b) * (d10[l] - d00[l]) + b * (d11[l] - d01[l]);
        s.d_dv[l] = (1 - a) * (d01[l] - d00[l]) + a * (d11[l] - d10[l]);
    }
    return s;
}

} // namespace kpdepth
