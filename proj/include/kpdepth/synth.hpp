#pragma once

// Synthetic multi-view scenes: a textured plane seen by a target camera and
// a set of source cameras, with exact ground-truth depth and poses. The
// texture is an analytic function of plane coordinates, so every view
// samples one consistent world.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kpdepth/errors.hpp"
#include "kpdepth/geometry.hpp"
#include "kpdepth/image.hpp"
#include "kpdepth/rng.hpp"

namespace kpdepth {

enum class TextureKind { SmoothedNoise, Blobs, LowTexture };

inline std::string to_string(TextureKind k) {
    switch (k) {
    case TextureKind::SmoothedNoise: return "smoothed-noise";
    case TextureKind::Blobs: return "blobs";
    case TextureKind::LowTexture: return "low-texture";
    }
    return "unknown";
}

inline TextureKind texture_kind_from_string(const std::string& s) {
    if (s == "smoothed-noise")
        return TextureKind::SmoothedNoise;
    if (s == "blobs")
        return TextureKind::Blobs;
    if (s == "low-texture")
        return TextureKind::LowTexture;
    throw ConfigError("unknown texture kind '" + s + "'");
}

struct TextureSpec {
    TextureKind kind = TextureKind::SmoothedNoise;
    std::uint64_t seed = 1;
    double feature_size = 0.1; // noise lattice spacing, scene units
    double sigma_blur = 0.8;   // smoothing, in lattice cells
    double gain = 2.5;         // contrast stretch of the smoothed noise
    double contrast = 0.1;     // low-texture: amplitude of the noise around 0.5
    int blob_count = 1;        // blobs: number of blobs; low-texture: extra blob features
    double blob_sigma = 0.08;  // scene units
    double blob_amplitude = 0.8;
    double extent = 0.8; // blob centres lie in [-extent, extent]^2 plane coordinates
};

namespace detail {

inline double smoothed_noise(const TextureSpec& tex, double s, double t) {
    const double gx = s / tex.feature_size;
    const double gy = t / tex.feature_size;
    const double sig = tex.sigma_blur;
    const int radius = static_cast<int>(std::ceil(3.0 * sig));
    const auto cx = static_cast<std::int64_t>(std::floor(gx));
    const auto cy = static_cast<std::int64_t>(std::floor(gy));
    double num = 0.0, den = 0.0;
    for (std::int64_t iy = cy - radius; iy <= cy + radius + 1; ++iy)
        for (std::int64_t ix = cx - radius; ix <= cx + radius + 1; ++ix) {
            const double dx = gx - static_cast<double>(ix), dy = gy - static_cast<double>(iy);
            const double wgt = std::exp(-(dx * dx + dy * dy) / (2.0 * sig * sig));
            num += wgt * lattice_hash01(ix, iy, tex.seed);
            den += wgt;
        }
    return num / den;
}

inline double blob_field(const TextureSpec& tex, double s, double t, std::uint64_t seed) {
    double v = 0.0;
    for (int b = 0; b < tex.blob_count; ++b) {
        const double bx = (2.0 * lattice_hash01(b, 0, seed) - 1.0) * tex.extent;
        const double by = (2.0 * lattice_hash01(b, 1, seed) - 1.0) * tex.extent;
        const double dx = s - bx, dy = t - by;
        v += tex.blob_amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * tex.blob_sigma * tex.blob_sigma));
    }
    return v;
}

} // namespace detail

/// Intensity of the texture at plane coordinates (s, t), clamped to [0,1].
inline double texture_value(const TextureSpec& tex, double s, double t) {
    double v = 0.0;
    switch (tex.kind) {
    case TextureKind::SmoothedNoise:
        v = 0.5 + tex.gain * (detail::smoothed_noise(tex, s, t) - 0.5);
        break;
    case TextureKind::Blobs:
        v = detail::blob_field(tex, s, t, tex.seed);
        break;
    case TextureKind::LowTexture:
        v = 0.5 + tex.contrast * tex.gain * (detail::smoothed_noise(tex, s, t) - 0.5);
        if (tex.blob_count > 0)
            v += detail::blob_field(tex, s, t, mix64(tex.seed + 1));
        break;
    }
    return std::clamp(v, 0.0, 1.0);
}

/// Blob centres in plane coordinates, as used by texture_value.
inline std::vector<std::pair<double, double>> blob_centres(const TextureSpec& tex) {
    const std::uint64_t seed = tex.kind == TextureKind::LowTexture ? mix64(tex.seed + 1) : tex.seed;
    std::vector<std::pair<double, double>> c;
    for (int b = 0; b < tex.blob_count; ++b)
        c.emplace_back((2.0 * lattice_hash01(b, 0, seed) - 1.0) * tex.extent,
                       (2.0 * lattice_hash01(b, 1, seed) - 1.0) * tex.extent);
    return c;
}

struct SceneSpec {
    int width = 64;
    int height = 64;
    Intrinsics intrinsics{60.0, 60.0, 31.5, 31.5};
    Vec3 plane_normal{0.0, 0.0, 1.0}; // target frame, points away from the camera
    double plane_distance = 2.0;      // n . X = distance
    TextureSpec texture;
    std::vector<Twist> source_twists;
    double noise_sigma = 0.0;
    std::uint64_t noise_seed = 0;
    double z_min = kDefaultZMin;

    /// The default two-source rig: +-0.02 rad yaw with -+0.05 x-translation.
    static SceneSpec defaults() {
        SceneSpec s;
        Twist a, b;
        a << 0.0, 0.02, 0.0, -0.05, 0.0, 0.0;
        b << 0.0, -0.02, 0.0, 0.05, 0.0, 0.0;
        s.source_twists = {a, b};
        return s;
    }
};

struct SceneSample {
    ImageBuffer target;
    std::vector<ImageBuffer> sources;
    DepthField gt_depth;
    std::vector<Twist> gt_twists;
    std::vector<CameraPose> gt_poses;
    Intrinsics intrinsics;
};

/// Orthonormal in-plane axes (e1, e2) for a unit normal.
inline std::pair<Vec3, Vec3> plane_basis(const Vec3& n) {
    Vec3 ref = std::abs(n.y()) < 0.9 ? Vec3(0.0, 1.0, 0.0) : Vec3(1.0, 0.0, 0.0);
    Vec3 e1 = ref.cross(n).normalized();
    Vec3 e2 = n.cross(e1);
    return {e1, e2};
}

inline void validate_spec(const SceneSpec& spec) {
    if (spec.width <= 0 || spec.height <= 0)
        throw ConfigError("scene dimensions must be positive");
    spec.intrinsics.validate();
    if (!(spec.plane_distance > 0.0))
        throw ConfigError("plane distance must be positive");
    if (std::abs(spec.plane_normal.norm() - 1.0) > 1e-9)
        throw ConfigError("plane normal must be unit length");
    if (spec.source_twists.empty())
        throw ConfigError("scene needs at least one source view");
    if (spec.noise_sigma < 0.0)
        throw ConfigError("noise sigma must be non-negative");
    if (spec.texture.feature_size <= 0.0 || spec.texture.sigma_blur <= 0.0 || spec.texture.blob_sigma <= 0.0)
        throw ConfigError("texture scales must be positive");
}

namespace detail {

// Renders one view. `to_target` maps this view's camera frame into the target
// frame; returns per-pixel depth in this view's frame.
inline std::vector<double> render_view(const SceneSpec& spec, const CameraPose& to_target, ImageBuffer& img,
                                       const std::string& view_name) {
    const Intrinsics& K = spec.intrinsics;
    const auto [e1, e2] = plane_basis(spec.plane_normal);
    // Plane in this view: n_v . X_v = d_v
    const Vec3 n_v = to_target.rotation.transpose() * spec.plane_normal;
    const double d_v = spec.plane_distance - spec.plane_normal.dot(to_target.translation);
    std::vector<double> depth(static_cast<std::size_t>(spec.width) * spec.height);
    for (int i = 0; i < spec.height; ++i)
        for (int j = 0; j < spec.width; ++j) {
            const Vec3 ray((j - K.cx) / K.fx, (i - K.cy) / K.fy, 1.0);
            const double denom = n_v.dot(ray);
            const double z = denom > 0.0 ? d_v / denom : -1.0;
            if (!(z >= spec.z_min))
                throw ConfigError("plane not visible in " + view_name + " at pixel (row " + std::to_string(i) +
                                  ", col " + std::to_string(j) + ")");
            const Vec3 X = to_target.apply(z * ray);
            img.at(i, j) = texture_value(spec.texture, e1.dot(X), e2.dot(X));
            depth[static_cast<std::size_t>(i) * spec.width + j] = z;
        }
    return depth;
}

} // namespace detail

/// Ground-truth depth from ray-plane intersection, target and sources by
/// sampling the texture at each view's own intersections, then optional
/// Gaussian intensity noise (clamped to [0,1]). Deterministic in the seeds.
inline SceneSample make_scene(const SceneSpec& spec) {
    validate_spec(spec);
    SceneSample out;
    out.intrinsics = spec.intrinsics;
    out.target = ImageBuffer(spec.width, spec.height);
    const std::vector<double> depth = detail::render_view(spec, CameraPose{}, out.target, "target view");
    out.gt_depth = DepthField::from_depths(spec.width, spec.height, depth);
    for (std::size_t s = 0; s < spec.source_twists.size(); ++s) {
        const CameraPose pose = se3_exp(spec.source_twists[s]);
        ImageBuffer img(spec.width, spec.height);
        detail::render_view(spec, invert(pose), img, "source view " + std::to_string(s));
        out.sources.push_back(std::move(img));
        out.gt_twists.push_back(spec.source_twists[s]);
        out.gt_poses.push_back(pose);
    }
    if (spec.noise_sigma > 0.0) {
        Rng rng(spec.noise_seed);
        const auto add_noise = [&](ImageBuffer& img) {
            for (double& v : img.data())
                v = std::clamp(v + spec.noise_sigma * rng.normal(), 0.0, 1.0);
        };
        add_noise(out.target);
        for (ImageBuffer& img : out.sources)
            add_noise(img);
    }
    return out;
}

} // namespace kpdepth
