#pragma once

// Loss components and their analytic gradients with respect to log-depth,
// source-pose twists and explainability-mask logits:
//
//   total = alpha * L_key + beta * L_photo + gamma * L_smooth + delta * L_expl
//
// L_key and L_photo are summed over source views. Per-pixel terms are
// written into buffers and reduced with pairwise_sum, so every value is
// independent of the worker count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kpdepth/errors.hpp"
#include "kpdepth/geometry.hpp"
#include "kpdepth/image.hpp"
#include "kpdepth/parallel.hpp"
#include "kpdepth/sift.hpp"

namespace kpdepth {

/// Residuals at or below this magnitude are treated as exactly zero when
/// picking the L1 subgradient; anything smaller is rounding noise.
inline constexpr double kL1ZeroBand = 1e-12;

inline double l1_sign(double r) {
    if (r > kL1ZeroBand)
        return 1.0;
    if (r < -kL1ZeroBand)
        return -1.0;
    return 0.0;
}

struct LossWeights {
    double alpha = 2.0; // keypoint similarity
    double beta = 1.0;  // photometric
    double gamma = 0.5; // edge-aware smoothness
    double delta = 0.2; // explainability regularizer

    void validate() const {
        for (double w : {alpha, beta, gamma, delta})
            if (!std::isfinite(w) || w < 0.0)
                throw ConfigError("loss weights must be finite and non-negative");
    }
};

inline double sigmoid(double x) {
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// -ln(sigmoid(x)) without overflow.
inline double neg_log_sigmoid(double x) {
    if (x >= 0.0)
        return std::log1p(std::exp(-x));
    return -x + std::log1p(std::exp(x));
}

class ExplainabilityMask {
public:
    ExplainabilityMask() = default;
    ExplainabilityMask(int width, int height, double logit = 0.0)
        : width_(width), height_(height), logits_(static_cast<std::size_t>(width) * height, logit) {
        if (width <= 0 || height <= 0)
            throw ConfigError("mask dimensions must be positive");
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t pixel_count() const { return logits_.size(); }
    double weight(std::size_t p) const { return sigmoid(logits_[p]); }

    std::span<double> logits() { return logits_; }
    std::span<const double> logits() const { return logits_; }

    friend bool operator==(const ExplainabilityMask&, const ExplainabilityMask&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<double> logits_;
};

/// Value and gradients of one loss component. Gradient vectors are sized to
/// the pixel count (or left empty when the component does not depend on that
/// parameter group).
struct ComponentLoss {
    double value = 0.0;
    std::vector<double> g_logdepth;
    Twist g_twist = Twist::Zero();
    std::vector<double> g_mask_logits;
    std::size_t count = 0; // contributing pixels / anchors
    bool empty = false;    // nothing contributed; value and gradients are zero
};

namespace detail {

// Sums column k of a pixel-major buffer holding `width` values per pixel.
inline Twist reduce_twist(std::span<const double> per_pixel, std::size_t pixels) {
    Twist g;
    for (int k = 0; k < 6; ++k)
        g[k] = pairwise_sum_strided(per_pixel, static_cast<std::size_t>(k), 6, pixels);
    return g;
}

inline void check_mask(const ExplainabilityMask* mask, int w, int h) {
    if (mask && (mask->width() != w || mask->height() != h))
        throw ConfigError("mask dimensions do not match the target image");
}

} // namespace detail

/// Mean over valid pixels of w * sum_c |source(u*, v*) - target| (w = mask
/// weight or 1). With normalize = false the raw sum is returned instead.
inline ComponentLoss photometric_loss(const ImageBuffer& target, const ImageBuffer& source, const WarpField& warp,
                                      const ExplainabilityMask* mask = nullptr, bool normalize = true) {
    const int w = target.width(), h = target.height();
    if (warp.width != w || warp.height != h)
        throw ConfigError("warp field does not match the target image");
    if (source.channels() != target.channels())
        throw ConfigError("source and target channel counts differ");
    detail::check_mask(mask, w, h);
    const std::size_t n = target.pixel_count();
    const int nc = target.channels();

    std::vector<double> abs_res(n, 0.0), d_du(n, 0.0), d_dv(n, 0.0);
    parallel_for(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p) {
            if (!warp.is_valid(p))
                continue;
            const int i = static_cast<int>(p / w), j = static_cast<int>(p % w);
            for (int c = 0; c < nc; ++c) {
                const SampleResult s = bilinear_sample(source, warp.u[p], warp.v[p], c);
                const double r = s.value - target.at(i, j, c);
                const double sg = l1_sign(r);
                abs_res[p] += std::abs(r);
                d_du[p] += sg * s.d_du;
                d_dv[p] += sg * s.d_dv;
            }
        }
    }, 256);

    ComponentLoss out;
    std::size_t n_valid = 0;
    for (std::size_t p = 0; p < n; ++p)
        n_valid += warp.is_valid(p) ? 1 : 0;
    out.count = n_valid;
    out.g_logdepth.assign(n, 0.0);
    if (mask)
        out.g_mask_logits.assign(n, 0.0);
    if (n_valid == 0) {
        out.empty = true;
        return out;
    }
    const double scale = normalize ? 1.0 / static_cast<double>(n_valid) : 1.0;

    std::vector<double> terms(n, 0.0), twist_terms(6 * n, 0.0);
    parallel_for(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t p = lo; p < hi; ++p) {
            if (!warp.is_valid(p))
                continue;
            const double wt = mask ? mask->weight(p) : 1.0;
            terms[p] = wt * abs_res[p];
            const double gu = scale * wt * d_du[p];
            const double gv = scale * wt * d_dv[p];
            out.g_logdepth[p] = gu * warp.j_depth[2 * p] + gv * warp.j_depth[2 * p + 1];
            for (int k = 0; k < 6; ++k)
                twist_terms[6 * p + k] = gu * warp.j_twist[12 * p + k] + gv * warp.j_twist[12 * p + 6 + k];
            if (mask)
                out.g_mask_logits[p] = scale * abs_res[p] * wt * (1.0 - wt);
        }
    }, 256);
    out.value = pairwise_sum(terms) * scale;
    out.g_twist = detail::reduce_twist(twist_terms, n);
    return out;
}

struct KeypointLossOptions {
    bool normalize = true; // mean over valid anchors instead of the raw sum
    /// Anchors whose target pixel, or whose warped position, lies closer than
    /// this to the image border are skipped; their descriptor patches would
    /// overhang the image, or their gradient stencils would. Negative selects
    /// border_margin_for(patch) of the default patch.
    int border_margin = -1;
};

/// Patch half-width plus one for the central-difference stencil, so every
/// gradient a descriptor uses is an interior one.
inline int border_margin_for(int patch_size) { return (patch_size + 1) / 2; }

inline int resolve_margin(int margin) { return margin >= 0 ? margin : border_margin_for(kDefaultPatchSize); }

/// Sum over anchors of sum_l |grid_t(i, j)[l] - grid_s(u*, v*)[l]|. Anchors
/// are every pixel when `keypoints` is null and the keypoint pixels
/// otherwise. Descriptors are constants; gradients flow only through the
/// sampling coordinates, and only anchor pixels receive log-depth gradient.
inline ComponentLoss keypoint_similarity_loss(const DescriptorGrid& grid_t, const DescriptorGrid& grid_s,
                                              const WarpField& warp, const KeypointSet* keypoints = nullptr,
                                              const ExplainabilityMask* mask = nullptr,
                                              const KeypointLossOptions& opts = {}) {
    const int w = grid_t.width(), h = grid_t.height();
    if (warp.width != w || warp.height != h)
        throw ConfigError("warp field does not match the target descriptor grid");
    detail::check_mask(mask, w, h);
    const std::size_t n = static_cast<std::size_t>(w) * h;
    const int margin = resolve_margin(opts.border_margin);
    const int sw = grid_s.width(), sh = grid_s.height();

    std::vector<std::size_t> anchors;
    if (keypoints) {
        anchors.reserve(keypoints->size());
        for (const Keypoint& kp : keypoints->keypoints) {
            const int j = static_cast<int>(std::lround(kp.x));
            const int i = static_cast<int>(std::lround(kp.y));
            if (i < 0 || j < 0 || i >= h || j >= w)
                throw ConfigError("keypoint lies outside the target image");
            anchors.push_back(static_cast<std::size_t>(i) * w + j);
        }
        std::sort(anchors.begin(), anchors.end());
        anchors.erase(std::unique(anchors.begin(), anchors.end()), anchors.end());
    } else {
        anchors.resize(n);
        for (std::size_t p = 0; p < n; ++p)
            anchors[p] = p;
    }

    const auto anchor_ok = [&](std::size_t p) {
        if (!warp.is_valid(p))
            return false;
        const int i = static_cast<int>(p / w), j = static_cast<int>(p % w);
        if (i < margin || j < margin || i > h - 1 - margin || j > w - 1 - margin)
            return false;
        const double u = warp.u[p], v = warp.v[p];
        return u >= margin && v >= margin && u <= sw - 1 - margin && v <= sh - 1 - margin;
    };

    const std::size_t na = anchors.size();
    std::vector<double> abs_res(na, 0.0), d_du(na, 0.0), d_dv(na, 0.0);
    std::vector<unsigned char> ok(na, 0);
    parallel_for(na, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t a = lo; a < hi; ++a) {
            const std::size_t p = anchors[a];
            if (!anchor_ok(p))
                continue;
            ok[a] = 1;
            const BilinearCell c = locate_cell(sw, sh, warp.u[p], warp.v[p]);
            const auto ref = grid_t.at(static_cast<int>(p / w), static_cast<int>(p % w));
            const auto d00 = grid_s.at(c.row0, c.col0);
            const auto d10 = grid_s.at(c.row0, c.col1);
            const auto d01 = grid_s.at(c.row1, c.col0);
            const auto d11 = grid_s.at(c.row1, c.col1);
            const double ca = c.a, cb = c.b;
            double acc = 0.0, gu = 0.0, gv = 0.0;
            for (int l = 0; l < kDescriptorDim; ++l) {
                const double val =
                    (1 - ca) * (1 - cb) * d00[l] + ca * (1 - cb) * d10[l] + (1 - ca) * cb * d01[l] + ca * cb * d11[l];
                const double r = val - ref[l];
                const double sg = l1_sign(r);
                acc += std::abs(r);
                gu += sg * ((1 - cb) * (d10[l] - d00[l]) + cb * (d11[l] - d01[l]));
                gv += sg * ((1 - ca) * (d01[l] - d00[l]) + ca * (d11[l] - d10[l]));
            }
            abs_res[a] = acc;
            d_du[a] = gu;
            d_dv[a] = gv;
        }
    }, 64);

    ComponentLoss out;
    out.g_logdepth.assign(n, 0.0);
    if (mask)
        out.g_mask_logits.assign(n, 0.0);
    std::size_t n_ok = 0;
    for (unsigned char f : ok)
        n_ok += f;
    out.count = n_ok;
    if (n_ok == 0) {
        out.empty = true;
        return out;
    }
    const double scale = opts.normalize ? 1.0 / static_cast<double>(n_ok) : 1.0;

    std::vector<double> terms(na, 0.0), twist_terms(6 * na, 0.0);
    for (std::size_t a = 0; a < na; ++a) {
        if (!ok[a])
            continue;
        const std::size_t p = anchors[a];
        const double wt = mask ? mask->weight(p) : 1.0;
        terms[a] = wt * abs_res[a];
        const double gu = scale * wt * d_du[a];
        const double gv = scale * wt * d_dv[a];
        out.g_logdepth[p] = gu * warp.j_depth[2 * p] + gv * warp.j_depth[2 * p + 1];
        for (int k = 0; k < 6; ++k)
            twist_terms[6 * a + k] = gu * warp.j_twist[12 * p + k] + gv * warp.j_twist[12 * p + 6 + k];
        if (mask)
            out.g_mask_logits[p] = scale * abs_res[a] * wt * (1.0 - wt);
    }
    out.value = pairwise_sum(terms) * scale;
    out.g_twist = detail::reduce_twist(twist_terms, na);
    return out;
}

/// Edge-aware smoothness on mean-normalized inverse depth dn = (1/d) / mean(1/d):
///   mean over pixels of |dx dn| exp(-|dx I|) + |dy dn| exp(-|dy I|)
/// with forward differences (no term past the last column / row). For
/// colour images |dI| is averaged over channels.
inline ComponentLoss smooth_loss(const DepthField& depth, const ImageBuffer& image) {
    const int w = depth.width(), h = depth.height();
    if (image.width() != w || image.height() != h)
        throw ConfigError("smoothness image does not match the depth field");
    const std::size_t n = depth.pixel_count();
    const int nc = image.channels();

    std::vector<double> inv(n), ex(n, 0.0), ey(n, 0.0);
    for (std::size_t p = 0; p < n; ++p)
        inv[p] = std::exp(-depth.log_depths()[p]);
    const double mean_inv = pairwise_sum(inv) / static_cast<double>(n);
    std::vector<double> dn(n);
    for (std::size_t p = 0; p < n; ++p)
        dn[p] = inv[p] / mean_inv;

    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * w + j;
            double gx = 0.0, gy = 0.0;
            for (int c = 0; c < nc; ++c) {
                if (j + 1 < w)
                    gx += std::abs(image.at(i, j + 1, c) - image.at(i, j, c));
                if (i + 1 < h)
                    gy += std::abs(image.at(i + 1, j, c) - image.at(i, j, c));
            }
            ex[p] = j + 1 < w ? std::exp(-gx / nc) : 0.0;
            ey[p] = i + 1 < h ? std::exp(-gy / nc) : 0.0;
        }

    const double scale = 1.0 / static_cast<double>(n);
    std::vector<double> terms(n, 0.0), g_dn(n, 0.0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * w + j;
            double t = 0.0, g = 0.0;
            if (j + 1 < w) {
                const double r = dn[p + 1] - dn[p];
                t += std::abs(r) * ex[p];
                g -= l1_sign(r) * ex[p];
            }
            if (i + 1 < h) {
                const double r = dn[p + w] - dn[p];
                t += std::abs(r) * ey[p];
                g -= l1_sign(r) * ey[p];
            }
            if (j > 0)
                g += l1_sign(dn[p] - dn[p - 1]) * ex[p - 1];
            if (i > 0)
                g += l1_sign(dn[p] - dn[p - w]) * ey[p - w];
            terms[p] = t;
            g_dn[p] = scale * g;
        }

    ComponentLoss out;
    out.count = n;
    out.value = pairwise_sum(terms) * scale;
    // dn_q = z_q / m with m = mean(z):  dS/dz_p = g_p / m - sum_q g_q z_q / (m^2 n)
    std::vector<double> gz(n);
    for (std::size_t p = 0; p < n; ++p)
        gz[p] = g_dn[p] * inv[p];
    const double coupling = pairwise_sum(gz) / (mean_inv * mean_inv * static_cast<double>(n));
    out.g_logdepth.resize(n);
    for (std::size_t p = 0; p < n; ++p)
        out.g_logdepth[p] = -inv[p] * (g_dn[p] / mean_inv - coupling);
    return out;
}

/// Mean over pixels of -ln(w), w = sigmoid(logit): cross-entropy against an
/// all-ones mask. Gradient w.r.t. each logit is (w - 1) / N.
inline ComponentLoss explainability_loss(const ExplainabilityMask& mask) {
    const std::size_t n = mask.pixel_count();
    ComponentLoss out;
    out.count = n;
    std::vector<double> terms(n);
    out.g_mask_logits.resize(n);
    for (std::size_t p = 0; p < n; ++p) {
        terms[p] = neg_log_sigmoid(mask.logits()[p]);
        out.g_mask_logits[p] = (mask.weight(p) - 1.0) / static_cast<double>(n);
    }
    out.value = pairwise_sum(terms) / static_cast<double>(n);
    return out;
}

struct LossModes {
    bool detector = true;             // anchor L_key on detected keypoints only
    bool mask = true;                 // learn the explainability mask
    bool normalize = true;            // means instead of raw sums
    bool mask_gates_keypoints = true; // mask also weights L_key anchors
    int border_margin = -1;           // see KeypointLossOptions
};

/// Everything that stays fixed while depth, poses and mask are optimized.
struct Problem {
    Intrinsics intrinsics;
    ImageBuffer target; // grayscale
    std::vector<ImageBuffer> sources;
    DescriptorGrid grid_target;
    std::vector<DescriptorGrid> grid_sources;
    KeypointSet keypoints; // detected on the target
    int patch_size = kDefaultPatchSize;
    double z_min = kDefaultZMin;

    int width() const { return target.width(); }
    int height() const { return target.height(); }
    std::size_t source_count() const { return sources.size(); }
};

/// Builds descriptor grids and detects target keypoints.
inline Problem make_problem(const Intrinsics& K, const ImageBuffer& target, const std::vector<ImageBuffer>& sources,
                            int patch_size = kDefaultPatchSize, const DetectorParams& detector = {}) {
    K.validate();
    if (sources.empty())
        throw ConfigError("at least one source view is required");
    Problem pb;
    pb.intrinsics = K;
    pb.patch_size = patch_size;
    pb.target = to_grayscale(target);
    for (const ImageBuffer& s : sources) {
        if (s.width() != target.width() || s.height() != target.height())
            throw ConfigError("source image dimensions differ from the target");
        pb.sources.push_back(to_grayscale(s));
    }
    pb.grid_target = compute_dense_grid(pb.target, patch_size);
    for (const ImageBuffer& s : pb.sources)
        pb.grid_sources.push_back(compute_dense_grid(s, patch_size));
    DetectorParams det = detector;
    det.keypoint_size = patch_size;
    pb.keypoints = detect_keypoints(pb.target, det);
    return pb;
}

/// The optimization variables.
struct Variables {
    DepthField depth;
    std::vector<Twist> twists; // one per source view
    ExplainabilityMask mask;
};

struct SourceLoss {
    double l_key = 0.0;
    double l_photo = 0.0;
};

struct LossBreakdown {
    double l_key = 0.0;
    double l_photo = 0.0;
    double l_smooth = 0.0;
    double l_expl = 0.0;
    double total = 0.0;
    std::vector<SourceLoss> per_source;
    bool photo_empty = false; // some source had no valid pixel
    bool key_empty = false;   // some source had no valid anchor
};

struct GradientSet {
    std::vector<double> g_logdepth;
    std::vector<Twist> g_twist;
    std::vector<double> g_mask_logits;
};

struct LossEvaluation {
    LossBreakdown breakdown;
    GradientSet gradients;
    std::vector<WarpField> warps;
};

inline void check_consistency(const Problem& pb, const Variables& vars) {
    const int w = pb.width(), h = pb.height();
    if (pb.sources.empty())
        throw ConfigError("at least one source view is required");
    if (pb.grid_sources.size() != pb.sources.size())
        throw ConfigError("one descriptor grid per source view is required");
    if (pb.grid_target.width() != w || pb.grid_target.height() != h)
        throw ConfigError("target descriptor grid does not match the target image");
    for (std::size_t s = 0; s < pb.sources.size(); ++s) {
        if (pb.sources[s].width() != w || pb.sources[s].height() != h)
            throw ConfigError("source image " + std::to_string(s) + " does not match the target");
        if (pb.grid_sources[s].width() != w || pb.grid_sources[s].height() != h)
            throw ConfigError("source grid " + std::to_string(s) + " does not match the target");
    }
    if (vars.depth.width() != w || vars.depth.height() != h)
        throw ConfigError("depth field does not match the target image");
    if (vars.twists.size() != pb.sources.size())
        throw ConfigError("one twist per source view is required");
    if (vars.mask.width() != w || vars.mask.height() != h)
        throw ConfigError("mask does not match the target image");
}

/// Evaluates every component per source where applicable and combines them.
/// A zero weight removes the component's gradient exactly; the component's
/// value is still reported.
inline LossEvaluation total_loss(const Problem& pb, const Variables& vars, const LossWeights& weights,
                                 const LossModes& modes) {
    weights.validate();
    check_consistency(pb, vars);
    const std::size_t n = vars.depth.pixel_count();
    const std::size_t ns = pb.sources.size();
    const ExplainabilityMask* mask = modes.mask ? &vars.mask : nullptr;
    const ExplainabilityMask* key_mask = modes.mask_gates_keypoints ? mask : nullptr;
    const KeypointSet* anchors = modes.detector ? &pb.keypoints : nullptr;
    KeypointLossOptions kopts;
    kopts.normalize = modes.normalize;
    kopts.border_margin = modes.border_margin >= 0 ? modes.border_margin : border_margin_for(pb.patch_size);

    LossEvaluation ev;
    LossBreakdown& bd = ev.breakdown;
    GradientSet& gs = ev.gradients;
    gs.g_logdepth.assign(n, 0.0);
    gs.g_twist.assign(ns, Twist::Zero());
    gs.g_mask_logits.assign(n, 0.0);
    bd.per_source.resize(ns);

    const auto accumulate = [&](const ComponentLoss& c, double weight, std::size_t source) {
        if (weight == 0.0)
            return;
        for (std::size_t p = 0; p < c.g_logdepth.size(); ++p)
            gs.g_logdepth[p] += weight * c.g_logdepth[p];
        for (std::size_t p = 0; p < c.g_mask_logits.size(); ++p)
            gs.g_mask_logits[p] += weight * c.g_mask_logits[p];
        if (source < ns)
            gs.g_twist[source] += weight * c.g_twist;
    };

    WarpOptions wopts;
    wopts.z_min = pb.z_min;
    for (std::size_t s = 0; s < ns; ++s) {
        ev.warps.push_back(compute_warp(vars.depth, pb.intrinsics, vars.twists[s], wopts));
        const WarpField& warp = ev.warps.back();
        const ComponentLoss key =
            keypoint_similarity_loss(pb.grid_target, pb.grid_sources[s], warp, anchors, key_mask, kopts);
        const ComponentLoss photo = photometric_loss(pb.target, pb.sources[s], warp, mask, modes.normalize);
        bd.per_source[s] = {key.value, photo.value};
        bd.key_empty = bd.key_empty || key.empty;
        bd.photo_empty = bd.photo_empty || photo.empty;
        accumulate(key, weights.alpha, s);
        accumulate(photo, weights.beta, s);
    }
    for (std::size_t s = 0; s < ns; ++s) {
        bd.l_key += bd.per_source[s].l_key;
        bd.l_photo += bd.per_source[s].l_photo;
    }

    const ComponentLoss smooth = smooth_loss(vars.depth, pb.target);
    bd.l_smooth = smooth.value;
    accumulate(smooth, weights.gamma, ns);
    if (mask) {
        const ComponentLoss expl = explainability_loss(*mask);
        bd.l_expl = expl.value;
        accumulate(expl, weights.delta, ns);
    }
    bd.total = weights.alpha * bd.l_key + weights.beta * bd.l_photo + weights.gamma * bd.l_smooth +
               weights.delta * bd.l_expl;
    return ev;
}

} // namespace kpdepth
