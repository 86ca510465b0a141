#pragma once

// Depth accuracy metrics: Abs Rel, Sq Rel and the delta < 1.25^k accuracies,
// with optional median scaling for scale-ambiguous predictions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kpdepth/errors.hpp"
#include "kpdepth/geometry.hpp"
#include "kpdepth/parallel.hpp"

namespace kpdepth {

struct EvalMetrics {
    double abs_rel = 0.0;
    double sq_rel = 0.0;
    double delta1 = 0.0;
    double delta2 = 0.0;
    double delta3 = 0.0;
    std::size_t n_pixels = 0;
    double scale = 1.0; // factor applied to the prediction
};

struct EvalOptions {
    bool median_scale = true;
    double min_depth = 0.0;                                  // predictions clamped below (0: off)
    double max_depth = std::numeric_limits<double>::infinity(); // and above
};

inline double median_of(std::vector<double> v) {
    const std::size_t n = v.size();
    const std::size_t mid = n / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (n % 2 == 1)
        return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

/// Metrics over pixels where `valid` is non-zero (an empty span selects all).
inline EvalMetrics compute_metrics(std::span<const double> pred, std::span<const double> gt,
                                   std::span<const unsigned char> valid, const EvalOptions& opts = {}) {
    if (pred.size() != gt.size())
        throw ConfigError("prediction and ground truth sizes differ");
    if (!valid.empty() && valid.size() != gt.size())
        throw ConfigError("valid mask size differs from the ground truth");
    std::vector<double> p, g;
    for (std::size_t k = 0; k < gt.size(); ++k) {
        if (!valid.empty() && !valid[k])
            continue;
        if (!(gt[k] > 0.0) || !std::isfinite(gt[k]))
            throw ConfigError("ground-truth depth must be positive inside the valid mask");
        if (!(pred[k] > 0.0) || !std::isfinite(pred[k]))
            throw ConfigError("predicted depth must be positive inside the valid mask");
        p.push_back(pred[k]);
        g.push_back(gt[k]);
    }
    if (g.empty())
        throw ConfigError("no valid pixels to evaluate");

    EvalMetrics m;
    m.n_pixels = g.size();
    if (opts.median_scale)
        m.scale = median_of(g) / median_of(p);
    const std::size_t n = g.size();
    std::vector<double> abs_rel(n), sq_rel(n);
    std::size_t c1 = 0, c2 = 0, c3 = 0;
    const double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
    for (std::size_t k = 0; k < n; ++k) {
        const double pk = std::clamp(p[k] * m.scale, opts.min_depth, opts.max_depth);
        const double diff = pk - g[k];
        abs_rel[k] = std::abs(diff) / g[k];
        sq_rel[k] = diff * diff / g[k];
        const double ratio = std::max(pk / g[k], g[k] / pk);
        c1 += ratio < t1;
        c2 += ratio < t2;
        c3 += ratio < t3;
    }
    m.abs_rel = pairwise_sum(abs_rel) / static_cast<double>(n);
    m.sq_rel = pairwise_sum(sq_rel) / static_cast<double>(n);
    m.delta1 = static_cast<double>(c1) / static_cast<double>(n);
    m.delta2 = static_cast<double>(c2) / static_cast<double>(n);
    m.delta3 = static_cast<double>(c3) / static_cast<double>(n);
    return m;
}

inline EvalMetrics compute_metrics(const DepthField& pred, const DepthField& gt, std::span<const unsigned char> valid,
                                   const EvalOptions& opts = {}) {
    if (pred.width() != gt.width() || pred.height() != gt.height())
        throw ConfigError("prediction and ground truth dimensions differ");
    const std::vector<double> p = pred.depths(), g = gt.depths();
    return compute_metrics(p, g, valid, opts);
}

inline std::string metrics_csv_header() { return "abs_rel,sq_rel,delta1,delta2,delta3"; }

inline std::string metrics_csv_row(const EvalMetrics& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%.6f", m.abs_rel, m.sq_rel, m.delta1, m.delta2, m.delta3);
    return buf;
}

/// Fixed-width table in the column order Abs Rel, Sq Rel, d<1.25, d<1.25^2, d<1.25^3.
inline std::string metrics_table(const std::vector<std::pair<std::string, EvalMetrics>>& rows) {
    std::size_t name_w = 10;
    for (const auto& r : rows)
        name_w = std::max(name_w, r.first.size());
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s | %8s | %8s | %8s | %8s | %8s\n", static_cast<int>(name_w), "Experiment",
                  "Abs Rel", "Sq Rel", "d<1.25", "d<1.25^2", "d<1.25^3");
    out += buf;
    out += std::string(name_w, '-') + "-+----------+----------+----------+----------+---------\n";
    for (const auto& [name, m] : rows) {
        std::snprintf(buf, sizeof buf, "%-*s | %8.4f | %8.4f | %8.4f | %8.4f | %8.4f\n", static_cast<int>(name_w),
                      name.c_str(), m.abs_rel, m.sq_rel, m.delta1, m.delta2, m.delta3);
        out += buf;
    }
    return out;
}

} // namespace kpdepth
