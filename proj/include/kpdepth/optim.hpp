#pragma once

// Direct optimization of log-depth, source twists and mask logits with
// bias-corrected adaptive-moment updates, plus the finite-difference
// gradient-check harness.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kpdepth/errors.hpp"
#include "kpdepth/geometry.hpp"
#include "kpdepth/loss.hpp"
#include "kpdepth/rng.hpp"

namespace kpdepth {

struct OptimConfig {
    double lr_depth = 1e-2;
    double lr_pose = 1e-3;
    double lr_mask = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int max_iters = 2000;
    double rel_tol = 1e-5;
    int window = 10;
    double mask_init_logit = 0.0;
    LossWeights weights;
    LossModes modes;

    void validate() const {
        if (!(lr_depth > 0.0 && lr_pose > 0.0 && lr_mask > 0.0))
            throw ConfigError("learning rates must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("moment decay constants must lie in [0, 1)");
        if (!(epsilon > 0.0))
            throw ConfigError("epsilon must be positive");
        if (max_iters < 1)
            throw ConfigError("max_iters must be at least 1");
        if (window < 1)
            throw ConfigError("convergence window must be at least 1");
        weights.validate();
    }
};

struct InitScheme {
    enum class Kind { GroundTruth, Perturbed, Constant };
    Kind kind = Kind::Perturbed;
    double sigma_depth = 0.1;  // log-depth noise
    double sigma_twist = 0.01; // per twist coordinate
    double constant_depth = 2.0;
    std::uint64_t seed = 0;
};

struct GroundTruth {
    DepthField depth;
    std::vector<Twist> twists;
};

/// Flattened parameter layout: [log-depth (N) | twists (6 S) | mask logits (N)].
struct OptimState {
    Variables vars;
    int step_count = 0;
    std::vector<double> m; // first moments
    std::vector<double> v; // second moments

    std::size_t parameter_count() const {
        return 2 * vars.depth.pixel_count() + 6 * vars.twists.size();
    }

    friend bool operator==(const OptimState&, const OptimState&) = default;
};

inline std::vector<double> flatten(const Variables& vars) {
    std::vector<double> x;
    x.reserve(2 * vars.depth.pixel_count() + 6 * vars.twists.size());
    x.insert(x.end(), vars.depth.log_depths().begin(), vars.depth.log_depths().end());
    for (const Twist& t : vars.twists)
        x.insert(x.end(), t.data(), t.data() + 6);
    x.insert(x.end(), vars.mask.logits().begin(), vars.mask.logits().end());
    return x;
}

inline void unflatten(std::span<const double> x, Variables& vars) {
    const std::size_t n = vars.depth.pixel_count();
    if (x.size() != 2 * n + 6 * vars.twists.size())
        throw ConfigError("parameter vector length mismatch");
    std::copy_n(x.begin(), n, vars.depth.log_depths().begin());
    std::size_t off = n;
    for (Twist& t : vars.twists) {
        for (int k = 0; k < 6; ++k)
            t[k] = x[off + k];
        off += 6;
    }
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(off), n, vars.mask.logits().begin());
}

inline std::vector<double> flatten(const GradientSet& g) {
    std::vector<double> x(g.g_logdepth);
    for (const Twist& t : g.g_twist)
        x.insert(x.end(), t.data(), t.data() + 6);
    x.insert(x.end(), g.g_mask_logits.begin(), g.g_mask_logits.end());
    return x;
}

inline OptimState init_state(const Problem& pb, const InitScheme& init, const OptimConfig& config,
                             const GroundTruth* gt = nullptr) {
    if (pb.sources.empty())
        throw ConfigError("at least one source view is required");
    const int w = pb.width(), h = pb.height();
    const std::size_t ns = pb.sources.size();
    OptimState st;
    st.vars.mask = ExplainabilityMask(w, h, config.mask_init_logit);
    switch (init.kind) {
    case InitScheme::Kind::Constant:
        if (!(init.constant_depth > 0.0) || !std::isfinite(init.constant_depth))
            throw ConfigError("constant initial depth must be positive");
        st.vars.depth = DepthField(w, h, init.constant_depth);
        st.vars.twists.assign(ns, Twist::Zero());
        break;
    case InitScheme::Kind::GroundTruth:
    case InitScheme::Kind::Perturbed: {
        if (!gt)
            throw ConfigError("ground-truth based initialization needs ground truth");
        if (gt->depth.width() != w || gt->depth.height() != h || gt->twists.size() != ns)
            throw ConfigError("ground truth does not match the problem");
        st.vars.depth = gt->depth;
        st.vars.twists = gt->twists;
        if (init.kind == InitScheme::Kind::Perturbed) {
            if (init.sigma_depth < 0.0 || init.sigma_twist < 0.0)
                throw ConfigError("perturbation scales must be non-negative");
            Rng rng(init.seed);
            for (double& ld : st.vars.depth.log_depths())
                ld += init.sigma_depth * rng.normal();
            for (Twist& t : st.vars.twists)
                for (int k = 0; k < 6; ++k)
                    t[k] += init.sigma_twist * rng.normal();
        }
        break;
    }
    }
    st.m.assign(st.parameter_count(), 0.0);
    st.v.assign(st.parameter_count(), 0.0);
    return st;
}

namespace detail {

inline void check_finite(const LossBreakdown& bd, const GradientSet& g) {
    const std::pair<const char*, double> parts[] = {
        {"l_key", bd.l_key}, {"l_photo", bd.l_photo}, {"l_smooth", bd.l_smooth}, {"l_expl", bd.l_expl}};
    for (const auto& [name, value] : parts)
        if (!std::isfinite(value))
            throw NumericalError(name, std::string("non-finite loss component ") + name);
    if (!std::isfinite(bd.total))
        throw NumericalError("total", "non-finite total loss");
    for (double x : flatten(g))
        if (!std::isfinite(x))
            throw NumericalError("gradient", "non-finite gradient entry");
}

} // namespace detail

/// One adaptive-moment update. Returns the loss breakdown evaluated before
/// the update.
inline LossBreakdown step(OptimState& st, const Problem& pb, const OptimConfig& config) {
    const LossEvaluation ev = total_loss(pb, st.vars, config.weights, config.modes);
    detail::check_finite(ev.breakdown, ev.gradients);
    const std::vector<double> g = flatten(ev.gradients);
    std::vector<double> x = flatten(st.vars);
    if (st.m.size() != x.size() || st.v.size() != x.size()) {
        st.m.assign(x.size(), 0.0);
        st.v.assign(x.size(), 0.0);
    }
    ++st.step_count;
    const double bc1 = 1.0 - std::pow(config.beta1, st.step_count);
    const double bc2 = 1.0 - std::pow(config.beta2, st.step_count);
    const std::size_t n = st.vars.depth.pixel_count();
    const std::size_t twist_end = n + 6 * st.vars.twists.size();
    for (std::size_t k = 0; k < x.size(); ++k) {
        st.m[k] = config.beta1 * st.m[k] + (1.0 - config.beta1) * g[k];
        st.v[k] = config.beta2 * st.v[k] + (1.0 - config.beta2) * g[k] * g[k];
        const double lr = k < n ? config.lr_depth : (k < twist_end ? config.lr_pose : config.lr_mask);
        const double mhat = st.m[k] / bc1;
        const double vhat = st.v[k] / bc2;
        x[k] -= lr * mhat / (std::sqrt(vhat) + config.epsilon);
    }
    unflatten(x, st.vars);
    return ev.breakdown;
}

struct RunResult {
    std::vector<LossBreakdown> history;
    bool converged = false;
};

/// Steps until max_iters, or until |L_k - L_{k-window}| <= rel_tol * |L_{k-window}|.
inline RunResult run(OptimState& st, const Problem& pb, const OptimConfig& config,
                     const std::function<void(int, const LossBreakdown&)>& on_step = {}) {
    config.validate();
    RunResult out;
    for (int it = 0; it < config.max_iters; ++it) {
        out.history.push_back(step(st, pb, config));
        if (on_step)
            on_step(it, out.history.back());
        const std::size_t k = out.history.size();
        if (k > static_cast<std::size_t>(config.window)) {
            const double now = out.history[k - 1].total;
            const double before = out.history[k - 1 - config.window].total;
            if (std::abs(now - before) <= config.rel_tol * std::abs(before)) {
                out.converged = true;
                break;
            }
        }
    }
    return out;
}

/// Writes iter,l_key,l_photo,l_smooth,l_expl,total with round-trip precision.
inline void write_history_csv(std::ostream& os, const std::vector<LossBreakdown>& history) {
    os << "iter,l_key,l_photo,l_smooth,l_expl,total\n";
    char buf[256];
    for (std::size_t k = 0; k < history.size(); ++k) {
        const LossBreakdown& b = history[k];
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", k, b.l_key, b.l_photo, b.l_smooth,
                      b.l_expl, b.total);
        os << buf;
    }
}

struct StallReport {
    int iterations = 0;
    double initial_total = 0.0;
    double final_total = 0.0;
    double relative_decrease = 0.0;
    bool stalled = false; // decrease below 5%
};

inline StallReport stall_report(const std::vector<LossBreakdown>& history, double threshold = 0.05) {
    StallReport r;
    if (history.empty())
        return r;
    r.iterations = static_cast<int>(history.size());
    r.initial_total = history.front().total;
    r.final_total = history.back().total;
    r.relative_decrease = r.initial_total > 0.0 ? (r.initial_total - r.final_total) / r.initial_total : 0.0;
    r.stalled = r.relative_decrease < threshold;
    return r;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradcheckOptions {
    double step = 1e-5;
    int samples = 200;
    std::uint64_t seed = 0;
    double boundary_px = 0.1; // log-depth samples this close to a cell boundary are skipped
    bool corrupt = false;     // scale the first checked analytic entry by 2 (fault injection)
};

struct GradcheckReport {
    double max_rel_error = 0.0;
    int checked = 0;
    int skipped = 0;
    std::size_t worst_index = 0;
};

/// Value plus a "regime signature": any change of the signature between
/// x - h and x + h means the perturbation crossed a non-smooth point.
struct ProbeResult {
    double value = 0.0;
    std::vector<std::int64_t> signature;
};

inline double relative_error(double analytic, double numeric) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double diff = std::abs(analytic - numeric);
    return scale < 1e-8 ? diff : diff / scale;
}

/// Generic central-difference checker. A sample is skipped when `pre_skip`
/// rejects it, when the probe signature changes across the stencil, or when
/// the h and h/2 stencils disagree (the stencil straddles a kink).
template <typename Probe>
GradcheckReport gradcheck_function(Probe&& probe, std::span<const double> x0, std::vector<double> analytic,
                                   std::span<const std::size_t> indices, const GradcheckOptions& opts,
                                   const std::function<bool(std::size_t)>& pre_skip = {}) {
    GradcheckReport rep;
    std::vector<double> x(x0.begin(), x0.end());
    const ProbeResult base = probe(std::span<const double>(x));
    const double h = opts.step;
    bool corrupted = false;
    for (std::size_t idx : indices) {
        if (pre_skip && pre_skip(idx)) {
            ++rep.skipped;
            continue;
        }
        const double orig = x[idx];
        const auto eval_at = [&](double delta) {
            x[idx] = orig + delta;
            ProbeResult r = probe(std::span<const double>(x));
            x[idx] = orig;
            return r;
        };
        const ProbeResult plus = eval_at(h), minus = eval_at(-h);
        if (plus.signature != base.signature || minus.signature != base.signature) {
            ++rep.skipped;
            continue;
        }
        const double fd = (plus.value - minus.value) / (2.0 * h);
        const double fd_half = (eval_at(0.5 * h).value - eval_at(-0.5 * h).value) / h;
        if (std::abs(fd - fd_half) > 1e-6 * std::max(std::abs(fd), std::abs(fd_half)) + 1e-10) {
            ++rep.skipped;
            continue;
        }
        if (opts.corrupt && !corrupted) {
            analytic[idx] *= 2.0;
            corrupted = true;
        }
        const double err = relative_error(analytic[idx], fd);
        ++rep.checked;
        if (err >= rep.max_rel_error) {
            rep.max_rel_error = err;
            rep.worst_index = idx;
        }
    }
    return rep;
}

/// Checks the full weighted objective at the given state. Samples are drawn
/// round-robin from the log-depth, twist and (when the mask is active)
/// mask-logit groups.
inline GradcheckReport gradcheck(const OptimState& st, const Problem& pb, const OptimConfig& config,
                                 const GradcheckOptions& opts = {}) {
    if (opts.samples < 1)
        throw ConfigError("gradcheck needs at least one sample");
    const std::size_t n = st.vars.depth.pixel_count();
    const std::size_t nt = 6 * st.vars.twists.size();
    const std::vector<double> x0 = flatten(st.vars);
    const LossEvaluation ev = total_loss(pb, st.vars, config.weights, config.modes);
    const std::vector<double> analytic = flatten(ev.gradients);

    Rng rng(opts.seed);
    std::vector<std::size_t> indices;
    const int groups = config.modes.mask ? 3 : 2;
    for (int s = 0; s < opts.samples; ++s) {
        const auto pick = [&](std::size_t count) {
            return std::min(count - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(count)));
        };
        switch (s % groups) {
        case 0: indices.push_back(pick(n)); break;
        case 1: indices.push_back(n + pick(nt)); break;
        default: indices.push_back(n + nt + pick(n)); break;
        }
    }

    Variables scratch = st.vars;
    const auto probe = [&](std::span<const double> x) {
        unflatten(x, scratch);
        const LossEvaluation e = total_loss(pb, scratch, config.weights, config.modes);
        ProbeResult r;
        r.value = e.breakdown.total;
        for (const WarpField& wf : e.warps)
            for (std::size_t p = 0; p < wf.pixel_count(); ++p) {
                if (!wf.is_valid(p)) {
                    r.signature.push_back(-1);
                    continue;
                }
                r.signature.push_back(static_cast<std::int64_t>(std::floor(wf.u[p])));
                r.signature.push_back(static_cast<std::int64_t>(std::floor(wf.v[p])));
            }
        return r;
    };
    const auto near_boundary = [&](std::size_t idx) {
        if (idx >= n)
            return false;
        for (const WarpField& wf : ev.warps) {
            if (!wf.is_valid(idx))
                continue;
            for (double c : {wf.u[idx], wf.v[idx]})
                if (std::abs(c - std::round(c)) < opts.boundary_px)
                    return true;
        }
        return false;
    };
    return gradcheck_function(probe, x0, analytic, indices, opts, near_boundary);
}

} // namespace kpdepth
