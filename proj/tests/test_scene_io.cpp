#include "catch_amalgamated.hpp"

#include <filesystem>

#include "kpdepth/presets.hpp"
#include "kpdepth/scene_io.hpp"

using namespace kpdepth;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("kpdepth_test_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("scene spec json roundtrip") {
    const SceneSpec s = presets::ablation(2);
    const SceneSpec r = scene_spec_from_json(scene_spec_to_json(s));
    CHECK(scene_spec_to_json(r) == scene_spec_to_json(s));
    CHECK(r.texture.kind == TextureKind::LowTexture);
    CHECK(r.texture.blob_count == 4);
}

TEST_CASE("scene spec json defaults and validation") {
    const SceneSpec d = scene_spec_from_json(nlohmann::json::parse(R"({"width": 32, "height": 24})"));
    CHECK(d.intrinsics.cx == 15.5);
    CHECK(d.intrinsics.cy == 11.5);
    CHECK(d.source_twists.size() == 2);
    CHECK(scene_spec_from_json(nlohmann::json::parse(R"({"texture": "blobs"})")).texture.blob_count == 1);
    CHECK(scene_spec_from_json(nlohmann::json::parse(R"({"texture": "low-texture"})")).texture.blob_count == 4);
    CHECK(scene_spec_from_json(nlohmann::json::parse(R"({"texture": "smoothed-noise"})")).texture.blob_count == 0);

    CHECK_THROWS_AS(scene_spec_from_json(nlohmann::json::parse(R"({"widht": 3})")), ConfigError);
    CHECK_THROWS_AS(scene_spec_from_json(nlohmann::json::parse(R"({"plane_normal": [0, 1]})")), ConfigError);
    CHECK_THROWS_AS(scene_spec_from_json(nlohmann::json::parse(R"({"plane_normal": [0, 0, 2]})")), ConfigError);
    CHECK_THROWS_AS(scene_spec_from_json(nlohmann::json::parse(R"({"texture": "marble"})")), ConfigError);
    CHECK_THROWS_AS(scene_spec_from_json(nlohmann::json::parse(R"({"width": "wide"})")), ConfigError);
    CHECK_THROWS_AS(scene_spec_from_json(nlohmann::json::parse("[1, 2]")), ConfigError);
}

TEST_CASE("scene directory roundtrip is exact") {
    const fs::path dir = scratch("scene_rt");
    const SceneSpec s = presets::recovery();
    const SceneSample sc = make_scene(s);
    write_scene(sc, s, dir);
    for (const char* f : {"target.pgm", "target.pfm", "source_0.pgm", "source_1.pfm", "gt_depth.pfm", "manifest.json"})
        CHECK(fs::exists(dir / f));
    const SceneData sd = read_scene(dir);
    CHECK(sd.has_ground_truth);
    CHECK(sd.intrinsics.fx == s.intrinsics.fx);
    REQUIRE(sd.sources.size() == 2);
    // PFM stores float32
    for (std::size_t k = 0; k < sc.target.data().size(); ++k)
        CHECK(sd.target.data()[k] == static_cast<float>(sc.target.data()[k]));
    for (std::size_t k = 0; k < sc.gt_depth.pixel_count(); ++k)
        CHECK(sd.gt_depth.depths()[k] == static_cast<float>(sc.gt_depth.depths()[k]));
    for (std::size_t k = 0; k < 2; ++k)
        CHECK(sd.gt_twists[k] == sc.gt_twists[k]);
    fs::remove_all(dir);
}

TEST_CASE("scene reader falls back to PGM and reports malformed manifests") {
    const fs::path dir = scratch("scene_pgm");
    const SceneSpec s = SceneSpec::defaults();
    write_scene(make_scene(s), s, dir);
    fs::remove(dir / "target.pfm");
    const SceneData sd = read_scene(dir);
    for (double v : sd.target.data())
        CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);

    write_text_file(dir / "manifest.json", R"({"intrinsics": {"fx": 1}})");
    CHECK_THROWS_AS(read_scene(dir), ConfigError);
    write_text_file(dir / "manifest.json", "{ nope");
    CHECK_THROWS_AS(read_scene(dir), ConfigError);
    CHECK_THROWS_AS(read_scene(dir / "missing"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("inverse depth preview spans the unit range") {
    const DepthField d = DepthField::from_depths(3, 1, std::vector<double>{1.0, 2.0, 4.0});
    const ImageBuffer p = inverse_depth_preview(d);
    CHECK(p.at(0, 0) == 1.0);
    CHECK(p.at(0, 2) == 0.0);
    CHECK(p.at(0, 1) == Catch::Approx(1.0 / 3.0));
    CHECK(inverse_depth_preview(DepthField(2, 2, 3.0)).at(1, 1) == 0.5);
}
