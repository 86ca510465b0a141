#pragma once

// Named scene configurations shared by the tool, the samples and the tests.

#include <cstdint>

#include "kpdepth/synth.hpp"

namespace kpdepth::presets {

/// Plane tilted about the x axis so depth varies down the image.
inline Vec3 slanted_normal() { return Vec3(0.0, 0.3, 1.0).normalized(); }

/// 64x64 smoothed-noise texture on the slanted plane, default two-source rig.
inline SceneSpec recovery() {
    SceneSpec s = SceneSpec::defaults();
    s.plane_normal = slanted_normal();
    return s;
}

/// 16x16 scene with coarser texture and mild noise, sized for finite
/// differences. Pair it with a 7x7 descriptor patch so the border margin
/// leaves interior anchors.
inline SceneSpec gradcheck() {
    SceneSpec s = SceneSpec::defaults();
    s.width = s.height = 16;
    s.intrinsics = {16.0, 16.0, 7.5, 7.5};
    s.plane_normal = slanted_normal();
    s.texture.feature_size = 0.3;
    s.noise_sigma = 0.02;
    s.noise_seed = 3;
    return s;
}
inline constexpr int kGradcheckPatch = 7;

/// Fronto-parallel plane with sources translated by exactly one pixel of
/// disparity along x and y. Ground-truth warps land on pixel centres, so
/// reprojection involves no interpolation.
inline SceneSpec lattice() {
    SceneSpec s = SceneSpec::defaults();
    const double tx = s.plane_distance / s.intrinsics.fx;
    const double ty = s.plane_distance / s.intrinsics.fy;
    Twist a = Twist::Zero(), b = Twist::Zero();
    a[3] = tx;
    b[4] = -ty;
    s.source_twists = {a, b};
    return s;
}

/// Low-contrast noise plus a handful of blobs for the detector to select.
inline SceneSpec ablation(std::uint64_t seed) {
    SceneSpec s = recovery();
    s.texture.kind = TextureKind::LowTexture;
    s.texture.seed = 100 + seed;
    s.texture.contrast = 0.1;
    s.texture.blob_count = 4;
    s.texture.blob_sigma = 0.08;
    s.texture.blob_amplitude = 0.4;
    s.noise_sigma = 0.01;
    s.noise_seed = seed;
    return s;
}

} // namespace kpdepth::presets
