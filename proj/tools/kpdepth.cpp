// kpdepth: scene generation, descriptor caching, depth optimization,
// gradient checking and evaluation.
//
// Exit codes: 0 success, 1 numerical failure (including a failed gradient
// check), 2 configuration, usage or I/O error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kpdepth/kpdepth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kpdepth;

namespace {

constexpr int kExitNumerical = 1;
constexpr int kExitConfig = 2;
constexpr double kGradcheckTolerance = 1e-4;

bool parse_switch(const std::string& v, const char* flag) {
    if (v == "on")
        return true;
    if (v == "off")
        return false;
    throw ConfigError(std::string(flag) + " expects on or off, got '" + v + "'");
}

InitScheme::Kind parse_init(const std::string& v) {
    if (v == "gt")
        return InitScheme::Kind::GroundTruth;
    if (v == "perturbed")
        return InitScheme::Kind::Perturbed;
    if (v == "constant")
        return InitScheme::Kind::Constant;
    throw ConfigError("--init expects gt, perturbed or constant, got '" + v + "'");
}

/// Largest odd patch that leaves interior keypoint anchors, capped at the
/// default size.
int auto_patch(int width, int height) {
    int p = std::min(width, height) / 2 - 1;
    if (p % 2 == 0)
        --p;
    return std::clamp(p, 3, kDefaultPatchSize);
}

json metrics_json(const EvalMetrics& m) {
    return {{"abs_rel", m.abs_rel}, {"sq_rel", m.sq_rel}, {"delta1", m.delta1},
            {"delta2", m.delta2},   {"delta3", m.delta3}, {"n_pixels", m.n_pixels},
            {"scale", m.scale}};
}

std::string run_label(bool det, bool expl) {
    return std::string(det ? "Det" : "No det") + (expl ? " + expl" : " + no expl");
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string spec, out;
};

int cmd_synth(const SynthArgs& a) {
    const SceneSpec spec = read_scene_spec(a.spec);
    const SceneSample sc = make_scene(spec);
    write_scene(sc, spec, a.out);
    std::printf("wrote %dx%d scene with %zu source view(s) to %s\n", spec.width, spec.height, sc.sources.size(),
                a.out.c_str());
    return 0;
}

struct DescriptorArgs {
    std::string image, out;
    int size = kDefaultPatchSize;
};

int cmd_descriptors(const DescriptorArgs& a) {
    const ImageBuffer gray = to_grayscale(read_image(a.image));
    const DescriptorGrid grid = compute_dense_grid(gray, a.size);
    write_grid(grid, a.size, a.out);
    std::printf("wrote %dx%d descriptor grid (patch %d) to %s\n", grid.width(), grid.height(), a.size, a.out.c_str());
    return 0;
}

struct ProblemArgs {
    std::string scene;
    int patch = 0; // 0: default size, or auto_patch for gradcheck
    std::string det = "on", expl = "on";
    double alpha = 2.0, beta = 1.0, gamma = 0.5, delta = 0.2;
    std::uint64_t seed = 0;
};

struct OptimizeArgs : ProblemArgs {
    std::string init = "perturbed", out;
    int iters = 2000;
    double lr_depth = 1e-2, lr_pose = 1e-3, lr_mask = 1e-2, rel_tol = 1e-5;
    double sigma_depth = 0.1, sigma_twist = 0.01, init_depth = 2.0;
};

OptimConfig make_config(const ProblemArgs& a) {
    OptimConfig c;
    c.weights = {a.alpha, a.beta, a.gamma, a.delta};
    c.modes.detector = parse_switch(a.det, "--det");
    c.modes.mask = parse_switch(a.expl, "--expl");
    return c;
}

int cmd_optimize(const OptimizeArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    const SceneData sd = read_scene(a.scene);
    const int patch = a.patch > 0 ? a.patch : kDefaultPatchSize;
    const Problem pb = make_problem(sd.intrinsics, sd.target, sd.sources, patch);

    OptimConfig cfg = make_config(a);
    cfg.max_iters = a.iters;
    cfg.lr_depth = a.lr_depth;
    cfg.lr_pose = a.lr_pose;
    cfg.lr_mask = a.lr_mask;
    cfg.rel_tol = a.rel_tol;
    cfg.validate();

    InitScheme init;
    init.kind = parse_init(a.init);
    init.sigma_depth = a.sigma_depth;
    init.sigma_twist = a.sigma_twist;
    init.constant_depth = a.init_depth;
    init.seed = a.seed;
    const GroundTruth gt{sd.gt_depth, sd.gt_twists};
    if (init.kind != InitScheme::Kind::Constant && !sd.has_ground_truth)
        throw ConfigError("--init " + a.init + " needs a scene with ground truth");
    OptimState st = init_state(pb, init, cfg, sd.has_ground_truth ? &gt : nullptr);
    const RunResult res = run(st, pb, cfg);

    fs::create_directories(a.out);
    write_pfm(depth_to_image(st.vars.depth), fs::path(a.out) / "depth.pfm");
    write_pnm(inverse_depth_preview(st.vars.depth), fs::path(a.out) / "depth_vis.pgm");
    {
        std::ofstream csv(fs::path(a.out) / "history.csv");
        if (!csv)
            throw IoError("cannot write " + (fs::path(a.out) / "history.csv").string());
        write_history_csv(csv, res.history);
    }

    json m;
    m["config"] = {{"scene", a.scene},       {"det", a.det},           {"expl", a.expl},
                   {"alpha", a.alpha},       {"beta", a.beta},         {"gamma", a.gamma},
                   {"delta", a.delta},       {"init", a.init},         {"iters", a.iters},
                   {"patch", patch},         {"lr_depth", a.lr_depth}, {"lr_pose", a.lr_pose},
                   {"lr_mask", a.lr_mask},   {"rel_tol", a.rel_tol},   {"sigma_depth", a.sigma_depth},
                   {"sigma_twist", a.sigma_twist}, {"init_depth", a.init_depth}};
    m["seed"] = a.seed;
    m["label"] = run_label(cfg.modes.detector, cfg.modes.mask);
    m["history"] = "history.csv";
    m["depth"] = "depth.pfm";
    m["iterations"] = res.history.size();
    m["converged"] = res.converged;
    m["keypoints"] = pb.keypoints.size();
    const LossBreakdown& last = res.history.back();
    m["final_loss"] = {{"l_key", last.l_key},     {"l_photo", last.l_photo}, {"l_smooth", last.l_smooth},
                       {"l_expl", last.l_expl},   {"total", last.total}};
    m["twists"] = json::array();
    for (const Twist& t : st.vars.twists)
        m["twists"].push_back({t[0], t[1], t[2], t[3], t[4], t[5]});
    if (sd.has_ground_truth)
        m["metrics"] = metrics_json(compute_metrics(st.vars.depth, sd.gt_depth, {}));
    if (a.beta == 0.0 && a.gamma == 0.0 && a.delta == 0.0) {
        const StallReport r = stall_report(res.history);
        m["stall"] = {{"iterations", r.iterations},
                      {"initial_total", r.initial_total},
                      {"final_total", r.final_total},
                      {"relative_decrease", r.relative_decrease},
                      {"stalled", r.stalled}};
    }
    write_text_file(fs::path(a.out) / "manifest.json", m.dump(2) + "\n");

    // Wall time and thread count vary between identical runs, so they live
    // apart from the reproducible manifest.
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const json rt = {{"wall_time_seconds", secs}, {"threads", num_threads()}};
    write_text_file(fs::path(a.out) / "runtime.json", rt.dump(2) + "\n");

    std::printf("%zu iterations%s, final total %.6g\n", res.history.size(), res.converged ? " (converged)" : "",
                last.total);
    if (m.contains("metrics"))
        std::printf("abs_rel %.6f  delta1 %.6f\n", m["metrics"]["abs_rel"].get<double>(),
                    m["metrics"]["delta1"].get<double>());
    if (m.contains("stall"))
        std::printf("keypoint-only run: relative decrease %.4f (%s)\n", m["stall"]["relative_decrease"].get<double>(),
                    m["stall"]["stalled"].get<bool>() ? "stalled" : "moved");
    return 0;
}

struct GradcheckArgs : ProblemArgs {
    int samples = 200;
    double step = 1e-5;
    bool corrupt = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    if (a.samples < 1)
        throw ConfigError("--samples must be at least 1");
    if (!(a.step > 0.0))
        throw ConfigError("--step must be positive");
    const SceneData sd = read_scene(a.scene);
    const int patch = a.patch > 0 ? a.patch : auto_patch(sd.target.width(), sd.target.height());
    const Problem pb = make_problem(sd.intrinsics, sd.target, sd.sources, patch);
    const OptimConfig cfg = make_config(a);
    cfg.validate();

    // Check away from ground truth, where every term has a gradient.
    InitScheme init;
    init.kind = sd.has_ground_truth ? InitScheme::Kind::Perturbed : InitScheme::Kind::Constant;
    init.seed = a.seed;
    const GroundTruth gt{sd.gt_depth, sd.gt_twists};
    const OptimState st = init_state(pb, init, cfg, sd.has_ground_truth ? &gt : nullptr);

    GradcheckOptions opts;
    opts.samples = a.samples;
    opts.step = a.step;
    opts.seed = a.seed;
    opts.corrupt = a.corrupt;
    const GradcheckReport r = gradcheck(st, pb, cfg, opts);
    const bool ok = r.checked > 0 && r.max_rel_error < kGradcheckTolerance;
    std::printf("max_rel_error %.3e checked %d skipped %d patch %d keypoints %zu -> %s\n", r.max_rel_error, r.checked,
                r.skipped, patch, pb.keypoints.size(), ok ? "PASS" : "FAIL");
    return ok ? 0 : kExitNumerical;
}

struct EvalArgs {
    std::string pred, gt;
    std::vector<std::string> runs;
    bool no_median_scale = false;
    double min_depth = 0.0;
    double max_depth = std::numeric_limits<double>::infinity();
};

int cmd_eval(const EvalArgs& a) {
    EvalOptions opts;
    opts.median_scale = !a.no_median_scale;
    opts.min_depth = a.min_depth;
    opts.max_depth = a.max_depth;
    std::vector<std::pair<std::string, EvalMetrics>> rows;
    if (!a.runs.empty()) {
        if (!a.pred.empty())
            throw ConfigError("--pred and --run are mutually exclusive");
        for (const std::string& dir : a.runs) {
            const json m = read_json_file(fs::path(dir) / "manifest.json");
            fs::path gt_path = a.gt;
            if (gt_path.empty()) {
                const std::string scene = m.at("config").at("scene").get<std::string>();
                gt_path = fs::path(scene) / "gt_depth.pfm";
            }
            const DepthField pred = depth_from_image(read_pfm(fs::path(dir) / m.value("depth", "depth.pfm")));
            const DepthField gt = depth_from_image(read_pfm(gt_path));
            rows.emplace_back(m.value("label", dir), compute_metrics(pred, gt, {}, opts));
        }
    } else {
        if (a.pred.empty() || a.gt.empty())
            throw ConfigError("eval needs --pred and --gt, or one or more --run directories");
        const DepthField pred = depth_from_image(read_image(a.pred));
        const DepthField gt = depth_from_image(read_image(a.gt));
        if (pred.width() != gt.width() || pred.height() != gt.height())
            throw ConfigError("prediction and ground truth dimensions differ");
        rows.emplace_back(fs::path(a.pred).filename().string(), compute_metrics(pred, gt, {}, opts));
    }
    std::printf("%s\n", (rows.size() > 1 ? "run," + metrics_csv_header() : metrics_csv_header()).c_str());
    for (const auto& [name, m] : rows)
        std::printf("%s\n", (rows.size() > 1 ? name + "," + metrics_csv_row(m) : metrics_csv_row(m)).c_str());
    std::printf("\n%s", metrics_table(rows).c_str());
    return 0;
}

void add_problem_options(CLI::App* c, ProblemArgs& a) {
    c->add_option("--scene", a.scene, "Scene directory written by synth")->required();
    c->add_option("--patch", a.patch, "Descriptor patch size in pixels (odd)");
    c->add_option("--det", a.det, "Anchor the keypoint loss on detected keypoints (on|off)")->capture_default_str();
    c->add_option("--expl", a.expl, "Learn the explainability mask (on|off)")->capture_default_str();
    c->add_option("--alpha", a.alpha, "Keypoint similarity weight")->capture_default_str();
    c->add_option("--beta", a.beta, "Photometric weight")->capture_default_str();
    c->add_option("--gamma", a.gamma, "Smoothness weight")->capture_default_str();
    c->add_option("--delta", a.delta, "Explainability regularizer weight")->capture_default_str();
    c->add_option("--seed", a.seed, "Seed for initialization and sampling")->capture_default_str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Keypoint-guided self-supervised depth estimation"};
    app.require_subcommand(1);
    app.fallthrough(); // --threads may follow the subcommand
    unsigned threads = 0;
    app.add_option("--threads", threads, "Worker threads (0: logical cores)")->capture_default_str();

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Render a synthetic scene from a JSON spec");
    c_synth->add_option("--spec", synth.spec, "Scene spec JSON")->required();
    c_synth->add_option("--out", synth.out, "Output directory")->required();

    DescriptorArgs desc;
    auto* c_desc = app.add_subcommand("descriptors", "Precompute a dense descriptor grid");
    c_desc->add_option("--image", desc.image, "Input image (PGM, PPM or PFM)")->required();
    c_desc->add_option("--size", desc.size, "Patch size in pixels")->capture_default_str();
    c_desc->add_option("--out", desc.out, "Output .dgrid file")->required();

    OptimizeArgs opt;
    auto* c_opt = app.add_subcommand("optimize", "Optimize depth, poses and mask for a scene");
    add_problem_options(c_opt, opt);
    c_opt->add_option("--init", opt.init, "Initialization (gt|perturbed|constant)")->capture_default_str();
    c_opt->add_option("--iters", opt.iters, "Maximum iterations")->capture_default_str();
    c_opt->add_option("--out", opt.out, "Output directory")->required();
    c_opt->add_option("--lr-depth", opt.lr_depth, "Log-depth learning rate")->capture_default_str();
    c_opt->add_option("--lr-pose", opt.lr_pose, "Twist learning rate")->capture_default_str();
    c_opt->add_option("--lr-mask", opt.lr_mask, "Mask logit learning rate")->capture_default_str();
    c_opt->add_option("--rel-tol", opt.rel_tol, "Relative change over the convergence window")->capture_default_str();
    c_opt->add_option("--sigma-depth", opt.sigma_depth, "Perturbed init: log-depth noise")->capture_default_str();
    c_opt->add_option("--sigma-twist", opt.sigma_twist, "Perturbed init: twist noise")->capture_default_str();
    c_opt->add_option("--init-depth", opt.init_depth, "Constant init: depth value")->capture_default_str();

    GradcheckArgs gc;
    auto* c_gc = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
    add_problem_options(c_gc, gc);
    c_gc->add_option("--samples", gc.samples, "Number of sampled parameters")->capture_default_str();
    c_gc->add_option("--step", gc.step, "Finite-difference step")->capture_default_str();
    c_gc->add_flag("--corrupt-gradient", gc.corrupt, "Double one analytic entry (checks the checker)");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Depth metrics for one prediction or a set of runs");
    c_eval->add_option("--pred", ev.pred, "Predicted depth (PFM)");
    c_eval->add_option("--gt", ev.gt, "Ground-truth depth (PFM); defaults to each run's scene");
    c_eval->add_option("--run", ev.runs, "Optimize output directory (repeatable)");
    c_eval->add_flag("--no-median-scale", ev.no_median_scale, "Compare absolute depths");
    c_eval->add_option("--min-depth", ev.min_depth, "Clamp predictions below");
    c_eval->add_option("--max-depth", ev.max_depth, "Clamp predictions above");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        set_num_threads(threads);
        if (*c_synth)
            return cmd_synth(synth);
        if (*c_desc)
            return cmd_descriptors(desc);
        if (*c_opt)
            return cmd_optimize(opt);
        if (*c_gc)
            return cmd_gradcheck(gc);
        if (*c_eval)
            return cmd_eval(ev);
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error in %s: %s\n", e.component().c_str(), e.what());
        return kExitNumerical;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return kExitConfig;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return kExitConfig;
    }
    return kExitConfig;
}
