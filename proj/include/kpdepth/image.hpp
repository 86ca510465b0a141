#pragma once

// Image containers and the sampling primitives shared by every other module.
//
// Pixel (row i, col j) lives at continuous coordinate (u = j, v = i).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "kpdepth/errors.hpp"

namespace kpdepth {

/// Row-major H x W x C raster of doubles. Intensity images hold values in
/// [0,1] (see is_normalized()); derived fields such as gradients reuse the
/// container with signed values.
class ImageBuffer {
public:
    ImageBuffer() = default;

    ImageBuffer(int width, int height, int channels = 1, double fill = 0.0)
        : width_(width), height_(height), channels_(channels) {
        if (width <= 0 || height <= 0)
            throw ConfigError("image dimensions must be positive");
        if (channels != 1 && channels != 3)
            throw ConfigError("image must have 1 or 3 channels");
        data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
    }

    ImageBuffer(int width, int height, int channels, std::vector<double> data)
        : ImageBuffer(width, height, channels) {
        if (data.size() != data_.size())
            throw ConfigError("image data length does not match width*height*channels");
        data_ = std::move(data);
    }

    int width() const { return width_; }
    int height() const { return height_; }
    int channels() const { return channels_; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }
    bool empty() const { return data_.empty(); }

    double& at(int row, int col, int ch = 0) { return data_[index(row, col, ch)]; }
    double at(int row, int col, int ch = 0) const { return data_[index(row, col, ch)]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    bool same_shape(const ImageBuffer& other) const {
        return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
    }

    /// True when every element is finite and inside [0,1].
    bool is_normalized() const {
        for (double v : data_)
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                return false;
        return true;
    }

    friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

private:
    std::size_t index(int row, int col, int ch) const {
        return (static_cast<std::size_t>(row) * width_ + col) * channels_ + ch;
    }

    int width_ = 0;
    int height_ = 0;
    int channels_ = 1;
    std::vector<double> data_;
};

struct SampleResult {
    double value = 0.0;
    double d_du = 0.0;
    double d_dv = 0.0;
    bool in_bounds = false;
};

/// Bilinear corner lookup for continuous coordinates. For u on the last
/// column the left cell is used, so derivatives come from the cell
/// [j0, j0+1] with j0 = min(floor(u), W-2).
struct BilinearCell {
    int col0 = 0, col1 = 0, row0 = 0, row1 = 0;
    double a = 0.0; // fractional offset along u
    double b = 0.0; // fractional offset along v
    bool in_bounds = false;
};

inline BilinearCell locate_cell(int width, int height, double u, double v) {
    BilinearCell c;
    if (!(u >= 0.0 && v >= 0.0 && u <= width - 1 && v <= height - 1))
        return c;
    c.in_bounds = true;
    c.col0 = width > 1 ? std::min(static_cast<int>(u), width - 2) : 0;
    c.row0 = height > 1 ? std::min(static_cast<int>(v), height - 2) : 0;
    c.col1 = width > 1 ? c.col0 + 1 : 0;
    c.row1 = height > 1 ? c.row0 + 1 : 0;
    c.a = u - c.col0;
    c.b = v - c.row0;
    return c;
}

inline SampleResult bilinear_sample(const ImageBuffer& img, double u, double v, int channel = 0) {
    const BilinearCell c = locate_cell(img.width(), img.height(), u, v);
    if (!c.in_bounds)
        return {};
    const double i00 = img.at(c.row0, c.col0, channel);
    const double i10 = img.at(c.row0, c.col1, channel);
    const double i01 = img.at(c.row1, c.col0, channel);
    const double i11 = img.at(c.row1, c.col1, channel);
    const double a = c.a, b = c.b;
    SampleResult r;
    r.in_bounds = true;
    r.value = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11;
    r.d_du = (1 - b) * (i10 - i00) + b * (i11 - i01);
    r.d_dv = (1 - a) * (i01 - i00) + a * (i11 - i10);
    return r;
}

inline ImageBuffer to_grayscale(const ImageBuffer& img) {
    if (img.channels() == 1)
        return img;
    ImageBuffer out(img.width(), img.height(), 1);
    for (int i = 0; i < img.height(); ++i)
        for (int j = 0; j < img.width(); ++j)
            out.at(i, j) = 0.299 * img.at(i, j, 0) + 0.587 * img.at(i, j, 1) + 0.114 * img.at(i, j, 2);
    return out;
}

/// Forward differences of a single-channel image. The last column of gx and
/// the last row of gy are zero.
inline std::pair<ImageBuffer, ImageBuffer> image_gradient(const ImageBuffer& img) {
    if (img.channels() != 1)
        throw ConfigError("image_gradient expects a single-channel image");
    const int w = img.width(), h = img.height();
    ImageBuffer gx(w, h), gy(w, h);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            if (j + 1 < w)
                gx.at(i, j) = img.at(i, j + 1) - img.at(i, j);
            if (i + 1 < h)
                gy.at(i, j) = img.at(i + 1, j) - img.at(i, j);
        }
    return {std::move(gx), std::move(gy)};
}

/// Normalized 1-D Gaussian taps, radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        k[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
        sum += k[t + radius];
    }
    for (double& x : k)
        x /= sum;
    return k;
}

/// Separable Gaussian blur with replicated borders.
inline ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
    if (!(sigma > 0.0))
        throw ConfigError("gaussian_blur requires sigma > 0");
    const std::vector<double> k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    const int w = img.width(), h = img.height(), nc = img.channels();
    ImageBuffer tmp(w, h, nc), out(w, h, nc);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < nc; ++c) {
                double s = 0.0;
                for (int t = -radius; t <= radius; ++t)
                    s += k[t + radius] * img.at(i, std::clamp(j + t, 0, w - 1), c);
                tmp.at(i, j, c) = s;
            }
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < nc; ++c) {
                double s = 0.0;
                for (int t = -radius; t <= radius; ++t)
                    s += k[t + radius] * tmp.at(std::clamp(i + t, 0, h - 1), j, c);
                out.at(i, j, c) = s;
            }
    return out;
}

} // namespace kpdepth
