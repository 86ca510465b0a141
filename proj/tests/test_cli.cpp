#include "catch_amalgamated.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "kpdepth/image_io.hpp"
#include "kpdepth/store.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kSamples = KPDEPTH_SAMPLES_DIR;

struct Result {
    int code = -1;
    std::string output;
};

Result cli(const std::string& args) {
    static const fs::path log = fs::temp_directory_path() / "kpdepth_cli_test.log";
    const std::string cmd = std::string("\"") + KPDEPTH_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("kpdepth_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

} // namespace

TEST_CASE("synth writes a scene directory") {
    const fs::path out = scratch("synth");
    const Result r = cli("synth --spec " + q(kSamples / "slanted.json") + " --out " + q(out));
    REQUIRE(r.code == 0);
    for (const char* f : {"target.pgm", "source_0.pgm", "source_1.pgm", "gt_depth.pfm", "manifest.json"})
        CHECK(fs::exists(out / f));

    const fs::path flat = scratch("flat");
    REQUIRE(cli("synth --spec " + q(kSamples / "flat.json") + " --out " + q(flat)).code == 0);
    for (double v : kpdepth::read_pfm(flat / "target.pfm").data())
        CHECK(v == 0.5);

    const Result bad = cli("synth --spec " + q(kSamples / "invalid_plane.json") + " --out " + q(scratch("bad")));
    CHECK(bad.code == 2);
    CHECK(bad.output.find("row 0, col 0") != std::string::npos);
    CHECK(cli("synth --spec " + q(kSamples / "missing.json") + " --out " + q(scratch("x"))).code == 2);
}

TEST_CASE("descriptors are deterministic and zero on a constant image") {
    const fs::path flat = scratch("desc_scene");
    REQUIRE(cli("synth --spec " + q(kSamples / "flat.json") + " --out " + q(flat)).code == 0);
    const fs::path a = flat / "a.dgrid", b = flat / "b.dgrid";
    REQUIRE(cli("descriptors --image " + q(flat / "target.pgm") + " --out " + q(a)).code == 0);
    REQUIRE(cli("descriptors --image " + q(flat / "target.pgm") + " --out " + q(b) + " --threads 3").code == 0);
    CHECK(slurp(a) == slurp(b));
    const kpdepth::GridFile g = kpdepth::read_grid(a);
    CHECK(g.patch_size == 15);
    for (double v : g.grid.values())
        CHECK(v == 0.0);
}

TEST_CASE("gradcheck exit codes") {
    const fs::path scene = scratch("gc_scene");
    REQUIRE(cli("synth --spec " + q(kSamples / "gradcheck16.json") + " --out " + q(scene)).code == 0);
    const Result ok = cli("gradcheck --scene " + q(scene));
    CHECK(ok.code == 0);
    CHECK(ok.output.find("PASS") != std::string::npos);
    CHECK(cli("gradcheck --scene " + q(scene) + " --corrupt-gradient").code == 1);
    CHECK(cli("gradcheck --scene " + q(scene) + " --samples 0").code == 2);
    CHECK(cli("gradcheck --scene " + q(scene) + " --det maybe").code == 2);
    CHECK(cli("gradcheck").code == 2);
    CHECK(cli("frobnicate").code == 2);
}

TEST_CASE("optimize and eval") {
    const fs::path scene = scratch("opt_scene");
    REQUIRE(cli("synth --spec " + q(kSamples / "lattice.json") + " --out " + q(scene)).code == 0);
    const fs::path run = scratch("opt_gt");
    REQUIRE(cli("optimize --scene " + q(scene) + " --init gt --iters 1 --out " + q(run)).code == 0);
    for (const char* f : {"depth.pfm", "depth_vis.pgm", "history.csv", "manifest.json", "runtime.json"})
        CHECK(fs::exists(run / f));
    std::ifstream hist(run / "history.csv");
    std::string header, row;
    std::getline(hist, header);
    std::getline(hist, row);
    CHECK(header == "iter,l_key,l_photo,l_smooth,l_expl,total");
    std::vector<double> cols;
    std::stringstream ss(row);
    for (std::string cell; std::getline(ss, cell, ',');)
        cols.push_back(std::stod(cell));
    REQUIRE(cols.size() == 6);
    CHECK(cols[2] < 1e-6);

    const nlohmann::json m = nlohmann::json::parse(slurp(run / "manifest.json"));
    CHECK(m["config"]["alpha"] == 2.0);
    CHECK(m["config"]["det"] == "on");
    CHECK(m["label"] == "Det + expl");
    CHECK_FALSE(m.contains("stall"));

    const Result ev = cli("eval --pred " + q(run / "depth.pfm") + " --gt " + q(scene / "gt_depth.pfm"));
    CHECK(ev.code == 0);
    CHECK(ev.output.find("0.000000,0.000000,1.000000,1.000000,1.000000") != std::string::npos);
    CHECK(cli("eval --run " + q(run)).code == 0);
    CHECK(cli("eval --pred " + q(run / "depth.pfm")).code == 2);

    const fs::path kp = scratch("opt_kp");
    REQUIRE(cli("optimize --scene " + q(scene) + " --init constant --beta 0 --gamma 0 --delta 0 --iters 5 --out " + q(kp))
                .code == 0);
    const nlohmann::json mk = nlohmann::json::parse(slurp(kp / "manifest.json"));
    REQUIRE(mk.contains("stall"));
    CHECK(mk["stall"]["iterations"] == 5);
    CHECK(cli("optimize --scene " + q(scene) + " --init sideways --out " + q(kp)).code == 2);
}

TEST_CASE("eval hand cases through the tool") {
    const fs::path dir = scratch("eval");
    fs::create_directories(dir);
    kpdepth::write_pfm(kpdepth::ImageBuffer(2, 2, 1, {1.0, 1.0, 2.0, 2.0}), dir / "gt.pfm");
    kpdepth::write_pfm(kpdepth::ImageBuffer(2, 2, 1, {1.1, 0.9, 2.6, 2.0}), dir / "mixed.pfm");
    kpdepth::write_pfm(kpdepth::ImageBuffer(2, 2, 1, {2.0, 2.0, 4.0, 4.0}), dir / "double.pfm");
    const Result mixed = cli("eval --pred " + q(dir / "mixed.pfm") + " --gt " + q(dir / "gt.pfm") + " --no-median-scale");
    CHECK(mixed.code == 0);
    CHECK(mixed.output.find("0.125000,") != std::string::npos);
    CHECK(mixed.output.find(",0.750000,") != std::string::npos);
    const Result dbl = cli("eval --pred " + q(dir / "double.pfm") + " --gt " + q(dir / "gt.pfm"));
    CHECK(dbl.output.find("0.000000,0.000000,1.000000,1.000000,1.000000") != std::string::npos);
}

TEST_CASE("optimize outputs are identical across thread counts") {
    const fs::path scene = scratch("det_scene");
    REQUIRE(cli("synth --spec " + q(kSamples / "slanted.json") + " --out " + q(scene)).code == 0);
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    REQUIRE(cli("--threads 1 optimize --scene " + q(scene) + " --iters 20 --seed 4 --out " + q(a)).code == 0);
    REQUIRE(cli("optimize --scene " + q(scene) + " --iters 20 --seed 4 --threads 4 --out " + q(b)).code == 0);
    for (const char* f : {"manifest.json", "history.csv", "depth.pfm", "depth_vis.pgm"})
        CHECK(slurp(a / f) == slurp(b / f));
}
