// End-to-end acceptance check. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails unexpectedly. Criteria listed in
// kKnownFailures are reported as FAIL but do not change the exit code; each
// one is analysed in the project's decision notes.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "kpdepth/kpdepth.hpp"
#include "oracles.hpp"

using namespace kpdepth;
namespace fs = std::filesystem;

namespace {

// Keypoint-only optimization from a constant start lowers the loss through the
// mask and the poses even though the depth barely changes; see criterion 5.
const std::set<int> kKnownFailures = {5};

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct Fixture {
    SceneSample scene;
    Problem problem;
    GroundTruth gt;

    explicit Fixture(const SceneSpec& spec, int patch = kDefaultPatchSize)
        : scene(make_scene(spec)), problem(make_problem(scene.intrinsics, scene.target, scene.sources, patch)),
          gt{scene.gt_depth, scene.gt_twists} {}
};

InitScheme perturbed(std::uint64_t seed) {
    InitScheme s;
    s.kind = InitScheme::Kind::Perturbed;
    s.seed = seed;
    return s;
}

// 1 -------------------------------------------------------------------------
Outcome gradient_correctness() {
    const Fixture f(presets::gradcheck(), presets::kGradcheckPatch);
    const OptimConfig cfg; // all four terms, detector and mask on
    const OptimState st = init_state(f.problem, perturbed(1), cfg, &f.gt);
    const LossBreakdown b = total_loss(f.problem, st.vars, cfg.weights, cfg.modes).breakdown;
    const bool all_active = b.l_key > 0 && b.l_photo > 0 && b.l_smooth > 0 && b.l_expl > 0;
    GradcheckOptions opts; // 200 samples, step 1e-5
    const GradcheckReport r = gradcheck(st, f.problem, cfg, opts);
    return {all_active && r.checked > 0 && r.max_rel_error < 1e-4,
            fmt("max rel error %.2e over %d samples (%d skipped), %zu keypoints", r.max_rel_error, r.checked,
                r.skipped, f.problem.keypoints.size())};
}

// 2 -------------------------------------------------------------------------
Outcome self_consistency() {
    const Fixture f(presets::lattice());
    Variables vars{f.gt.depth, f.gt.twists, ExplainabilityMask(f.problem.width(), f.problem.height())};
    double photo = 0.0, key = 0.0;
    for (bool det : {true, false}) {
        LossModes modes;
        modes.detector = det;
        const LossBreakdown b = total_loss(f.problem, vars, LossWeights{}, modes).breakdown;
        photo = std::max(photo, b.l_photo);
        key = std::max(key, b.l_key);
    }
    bool identity = true;
    const WarpField w = compute_warp(f.gt.depth, f.scene.intrinsics, Twist::Zero());
    for (int i = 0; i < f.problem.height(); ++i)
        for (int j = 0; j < f.problem.width(); ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * f.problem.width() + j;
            identity = identity && w.valid[p] && w.u[p] == j && w.v[p] == i;
        }
    return {photo < 1e-6 && key < 1e-4 && identity,
            fmt("l_photo %.2e, l_key %.2e, identity warp %s", photo, key, identity ? "exact" : "inexact")};
}

// 3 -------------------------------------------------------------------------
Outcome synthetic_recovery() {
    const Fixture f(presets::recovery());
    OptimConfig cfg;
    cfg.max_iters = 2000;
    OptimState st = init_state(f.problem, perturbed(1), cfg, &f.gt);
    const RunResult r = run(st, f.problem, cfg);
    const EvalMetrics m = compute_metrics(st.vars.depth, f.gt.depth, {});
    return {m.abs_rel < 0.05 && m.delta1 > 0.95,
            fmt("Abs Rel %.4f, delta1 %.4f after %zu iterations", m.abs_rel, m.delta1, r.history.size())};
}

// 4 -------------------------------------------------------------------------
Outcome ablation_ordering() {
    const int seeds = 10;
    int wins = 0;
    double mean[2][2] = {};
    for (int s = 0; s < seeds; ++s) {
        const Fixture f(presets::ablation(static_cast<std::uint64_t>(s)));
        double abs_rel[2][2] = {};
        for (int det = 0; det < 2; ++det)
            for (int expl = 0; expl < 2; ++expl) {
                OptimConfig cfg;
                cfg.max_iters = 500;
                cfg.modes.detector = det;
                cfg.modes.mask = expl;
                OptimState st = init_state(f.problem, perturbed(static_cast<std::uint64_t>(s)), cfg, &f.gt);
                run(st, f.problem, cfg);
                abs_rel[det][expl] = compute_metrics(st.vars.depth, f.gt.depth, {}).abs_rel;
            }
        wins += abs_rel[1][0] <= abs_rel[0][0];
        for (int det = 0; det < 2; ++det)
            for (int expl = 0; expl < 2; ++expl)
                mean[det][expl] += abs_rel[det][expl] / seeds;
    }
    return {wins >= 7, fmt("Det+no-expl <= No-det+no-expl in %d of %d seeds; mean Abs Rel: No det+expl %.4f, "
                           "No det+no expl %.4f, Det+expl %.4f, Det+no expl %.4f",
                           wins, seeds, mean[0][1], mean[0][0], mean[1][1], mean[1][0])};
}

// 5 -------------------------------------------------------------------------
// The pass rule is the total-loss decrease. The detail also reports what
// moved: the same run with the mask disabled, and the depth error before and
// after, since the claim being tested concerns the depth.
Outcome keypoint_only_stall() {
    const Fixture f(presets::recovery());
    InitScheme init;
    init.kind = InitScheme::Kind::Constant;
    const auto run_once = [&](bool mask, double& abs_rel) {
        OptimConfig cfg;
        cfg.weights = {2.0, 0.0, 0.0, 0.0};
        cfg.max_iters = 200;
        cfg.rel_tol = 0.0;
        cfg.modes.mask = mask;
        OptimState st = init_state(f.problem, init, cfg);
        const StallReport r = stall_report(run(st, f.problem, cfg).history);
        abs_rel = compute_metrics(st.vars.depth, f.gt.depth, {}).abs_rel;
        return r;
    };
    double abs_rel = 0.0, abs_rel_nomask = 0.0;
    const StallReport r = run_once(true, abs_rel);
    const StallReport nomask = run_once(false, abs_rel_nomask);
    const double abs_rel0 = compute_metrics(DepthField(f.problem.width(), f.problem.height(), init.constant_depth),
                                            f.gt.depth, {})
                                .abs_rel;
    return {r.stalled && r.iterations == 200,
            fmt("total decreased by %.1f%% over %d iterations (threshold 5%%), %.1f%% with the mask off; "
                "Abs Rel %.4f -> %.4f",
                100.0 * r.relative_decrease, r.iterations, 100.0 * nomask.relative_decrease, abs_rel0, abs_rel)};
}

// 6 -------------------------------------------------------------------------
Outcome detector_masking() {
    SceneSpec spec = presets::recovery();
    spec.noise_sigma = 0.01;
    spec.noise_seed = 11;
    const Fixture f(spec);
    Variables vars{f.gt.depth, f.gt.twists, ExplainabilityMask(f.problem.width(), f.problem.height())};
    Rng rng(12);
    for (double& l : vars.depth.log_depths())
        l += 0.05 * rng.normal();
    for (Twist& t : vars.twists)
        for (int k = 0; k < 6; ++k)
            t[k] += 0.005 * rng.normal();
    LossModes modes; // detector on
    const LossEvaluation ev = total_loss(f.problem, vars, LossWeights{2.0, 0.0, 0.0, 0.0}, modes);
    std::vector<char> is_kp(vars.depth.pixel_count(), 0);
    for (const Keypoint& k : f.problem.keypoints.keypoints)
        is_kp[static_cast<std::size_t>(std::lround(k.y)) * f.problem.width() +
              static_cast<std::size_t>(std::lround(k.x))] = 1;
    std::size_t leaks = 0, live = 0;
    for (std::size_t p = 0; p < is_kp.size(); ++p) {
        if (!is_kp[p])
            leaks += ev.gradients.g_logdepth[p] != 0.0;
        else
            live += ev.gradients.g_logdepth[p] != 0.0;
    }
    return {leaks == 0 && live > 0, fmt("%zu non-zero gradients off keypoints, %zu of %zu keypoints carry gradient",
                                        leaks, live, f.problem.keypoints.size())};
}

// 7 -------------------------------------------------------------------------
Outcome oracle_equivalences() {
    Rng rng(7);
    double bilinear = 0.0, binning = 0.0, jac = 0.0, metric = 0.0, smooth = 0.0;

    const ImageBuffer img = oracle::random_image(9, 7, 1);
    for (int k = 0; k < 500; ++k) {
        const double u = rng.uniform() * 8.0, v = rng.uniform() * 6.0;
        bilinear = std::max(bilinear, std::abs(bilinear_sample(img, u, v).value - oracle::four_corner(img, u, v)));
    }

    const ImageBuffer tex = oracle::random_image(24, 20, 2);
    const SiftGradients g = sift_gradients(tex);
    for (int t = 0; t < 6; ++t) {
        const double x = rng.uniform() * 23, y = rng.uniform() * 19, orient = (rng.uniform() - 0.5) * 4.0;
        const Descriptor lib = descriptor_histogram(g, x, y, 15.0, orient);
        const Descriptor ref = oracle::histogram(tex, x, y, 15.0, orient);
        for (int l = 0; l < kDescriptorDim; ++l)
            binning = std::max(binning, std::abs(lib[l] - ref[l]));
    }

    const Intrinsics K{30, 30, 11.5, 9.5};
    DepthField d(24, 20);
    for (double& l : d.log_depths())
        l = std::log(1.5 + rng.uniform());
    Twist tw;
    tw << 0.02, -0.03, 0.01, 0.08, -0.05, 0.03;
    const WarpField w = compute_warp(d, K, tw);
    const double h = 1e-6;
    const auto rel = [](double a, double b) {
        const double s = std::max(std::abs(a), std::abs(b));
        return s < 1e-8 ? std::abs(a - b) : std::abs(a - b) / s;
    };
    for (std::size_t p = 0; p < d.pixel_count(); p += 11) {
        if (!w.valid[p] || w.u[p] < 0.5 || w.v[p] < 0.5 || w.u[p] > 22.5 || w.v[p] > 18.5)
            continue;
        DepthField dp = d, dm = d;
        dp.log_depths()[p] += h;
        dm.log_depths()[p] -= h;
        const WarpField fp = compute_warp(dp, K, tw), fm = compute_warp(dm, K, tw);
        jac = std::max(jac, rel(w.j_depth[2 * p], (fp.u[p] - fm.u[p]) / (2 * h)));
        jac = std::max(jac, rel(w.j_depth[2 * p + 1], (fp.v[p] - fm.v[p]) / (2 * h)));
        for (int k = 0; k < 6; ++k) {
            Twist tp = tw, tm = tw;
            tp[k] += h;
            tm[k] -= h;
            const WarpField gp = compute_warp(d, K, tp), gm = compute_warp(d, K, tm);
            jac = std::max(jac, rel(w.j_twist[12 * p + k], (gp.u[p] - gm.u[p]) / (2 * h)));
            jac = std::max(jac, rel(w.j_twist[12 * p + 6 + k], (gp.v[p] - gm.v[p]) / (2 * h)));
        }
    }

    for (int t = 0; t < 10; ++t) {
        std::vector<double> p(64), gt(64);
        std::vector<unsigned char> valid(64, 1);
        for (int k = 0; k < 64; ++k) {
            gt[k] = 0.5 + 5.0 * rng.uniform();
            p[k] = gt[k] * std::exp(0.4 * rng.normal());
            valid[k] = k == 0 || rng.uniform() < 0.8;
        }
        const EvalMetrics a = compute_metrics(p, gt, valid), b = oracle::metrics(p, gt, valid);
        for (double e : {a.abs_rel - b.abs_rel, a.sq_rel - b.sq_rel, a.delta1 - b.delta1, a.delta2 - b.delta2,
                         a.delta3 - b.delta3})
            metric = std::max(metric, std::abs(e));
    }

    for (int t = 0; t < 5; ++t) {
        std::vector<double> depths(8 * 6);
        for (double& x : depths)
            x = 0.5 + 3.0 * rng.uniform();
        const ImageBuffer im = oracle::random_image(8, 6, 30 + t);
        smooth = std::max(smooth, std::abs(smooth_loss(DepthField::from_depths(8, 6, depths), im).value -
                                           oracle::smoothness(depths, im)));
    }

    const bool ok = bilinear < 1e-14 && binning < 1e-12 && jac < 1e-5 && metric < 1e-12 && smooth < 1e-12;
    return {ok, fmt("bilinear %.1e, binning %.1e, warp Jacobian rel %.1e, metrics %.1e, smoothness %.1e", bilinear,
                    binning, jac, metric, smooth)};
}

// 8 -------------------------------------------------------------------------
Outcome store_integrity() {
    Rng rng(8);
    DescriptorGrid grid(4, 4);
    for (double& v : grid.values())
        v = static_cast<float>(rng.uniform() * 0.3); // float32-representable
    const fs::path path = fs::temp_directory_path() / "kpdepth_acceptance.dgrid";
    write_grid(grid, 15, path);
    const std::uintmax_t size = fs::file_size(path);
    const GridFile back = read_grid(path);
    fs::remove(path);
    const bool exact = back.grid == grid && back.patch_size == 15;

    const std::vector<unsigned char> good = encode_grid(grid, 15);
    std::size_t missed = 0;
    for (std::size_t k = 0; k < good.size(); ++k)
        for (unsigned bit = 0; bit < 8; ++bit) {
            std::vector<unsigned char> bad = good;
            bad[k] ^= static_cast<unsigned char>(1u << bit);
            try {
                decode_grid(bad);
                ++missed;
            } catch (const StoreError&) {
            }
        }
    return {size == 8216 && exact && missed == 0,
            fmt("file %ju bytes, roundtrip %s, %zu of %zu single-bit corruptions undetected", size,
                exact ? "exact" : "inexact", missed, good.size() * 8)};
}

// 9 -------------------------------------------------------------------------
std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism() {
    const Fixture f(presets::recovery());
    OptimConfig cfg;
    cfg.max_iters = 50;
    std::vector<std::string> outputs;
    for (unsigned threads : {1u, 2u, 4u}) {
        set_num_threads(threads);
        OptimState st = init_state(f.problem, perturbed(3), cfg, &f.gt);
        const RunResult r = run(st, f.problem, cfg);
        std::ostringstream csv;
        write_history_csv(csv, r.history);
        const fs::path pfm = fs::temp_directory_path() / "kpdepth_acceptance_depth.pfm";
        write_pfm(depth_to_image(st.vars.depth), pfm);
        outputs.push_back(csv.str() + slurp(pfm));
        fs::remove(pfm);
    }
    set_num_threads(0);
    bool same = outputs[0] == outputs[1] && outputs[0] == outputs[2];
    std::string detail = "library history and depth identical across 1/2/4 threads";

#ifdef KPDEPTH_CLI_PATH
    const fs::path root = fs::temp_directory_path() / "kpdepth_acceptance_cli";
    fs::remove_all(root);
    fs::create_directories(root);
    const SceneSpec spec = presets::recovery();
    write_scene(f.scene, spec, root / "scene");
    const auto cli = [&](const std::string& args) {
        const std::string cmd = std::string("\"") + KPDEPTH_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    };
    bool cli_same = true;
    for (unsigned threads : {1u, 4u}) {
        const fs::path out = root / ("run" + std::to_string(threads));
        cli_same = cli_same && cli("optimize --scene \"" + (root / "scene").string() + "\" --iters 50 --seed 3 --threads " +
                                   std::to_string(threads) + " --out \"" + out.string() + "\"") == 0;
    }
    for (const char* file : {"manifest.json", "history.csv", "depth.pfm", "depth_vis.pgm"})
        cli_same = cli_same && slurp(root / "run1" / file) == slurp(root / "run4" / file) &&
                   !slurp(root / "run1" / file).empty();
    fs::remove_all(root);
    same = same && cli_same;
    detail += cli_same ? "; tool manifest, history and depth byte-identical for 1/4 threads"
                       : "; tool outputs differ across thread counts";
#endif
    return {same, same ? detail : "outputs differ across thread counts"};
}

struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> check;
};

} // namespace

int main() {
    const Criterion criteria[] = {
        {1, "gradient correctness", 30, gradient_correctness},
        {2, "self-consistency zeros", 5, self_consistency},
        {3, "synthetic recovery", 60, synthetic_recovery},
        {4, "ablation ordering", 600, ablation_ordering},
        {5, "keypoint-only stall", 60, keypoint_only_stall},
        {6, "detector gradient masking", 60, detector_masking},
        {7, "oracle equivalences", 60, oracle_equivalences},
        {8, "store integrity", 60, store_integrity},
        {9, "determinism", 120, determinism},
    };
    int unexpected = 0;
    for (const Criterion& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs < c.budget_s;
        const bool pass = o.pass && in_time;
        const bool known = kKnownFailures.contains(c.id);
        std::printf("%s %d %s: %s; %.1f s of %.0f s budget%s\n", pass ? "PASS" : "FAIL", c.id, c.name,
                    o.detail.c_str(), secs, c.budget_s, !pass && known ? " [known failure]" : "");
        std::fflush(stdout);
        if (!pass && !known)
            ++unexpected;
    }
    return unexpected == 0 ? 0 : 1;
}
