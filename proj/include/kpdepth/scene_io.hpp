#pragma once

// Scene specifications as flat JSON documents, and scene directories on disk:
//
//   target.pgm / target.pfm          8-bit preview and exact float copy
//   source_<k>.pgm / source_<k>.pfm
//   gt_depth.pfm
//   manifest.json                    file names, intrinsics, source twists
//
// Readers prefer the PFM copies so a scene survives a roundtrip exactly.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpdepth/errors.hpp"
#include "kpdepth/geometry.hpp"
#include "kpdepth/image_io.hpp"
#include "kpdepth/synth.hpp"

namespace kpdepth {

namespace detail {

inline std::vector<double> json_doubles(const nlohmann::json& j, std::size_t expected, const std::string& key) {
    if (!j.is_array() || j.size() != expected)
        throw ConfigError("'" + key + "' must be an array of " + std::to_string(expected) + " numbers");
    std::vector<double> out;
    for (const auto& x : j) {
        if (!x.is_number())
            throw ConfigError("'" + key + "' must contain numbers only");
        out.push_back(x.get<double>());
    }
    return out;
}

template <typename T>
T json_get(const nlohmann::json& j, const std::string& key) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid value for '" + key + "': " + e.what());
    }
}

inline nlohmann::json twist_json(const Twist& t) {
    return nlohmann::json::array({t[0], t[1], t[2], t[3], t[4], t[5]});
}

inline Twist twist_from_json(const nlohmann::json& j, const std::string& key) {
    const std::vector<double> v = json_doubles(j, 6, key);
    Twist t;
    for (int k = 0; k < 6; ++k)
        t[k] = v[k];
    return t;
}

} // namespace detail

/// Parses a flat scene document. Missing fields take the default rig's
/// values; unknown fields are rejected so typos do not pass silently.
inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object())
        throw ConfigError("scene spec must be a JSON object");
    static const std::set<std::string> known = {
        "width",    "height",       "fx",         "fy",         "cx",        "cy",          "plane_normal",
        "plane_distance", "texture", "seed",      "feature_size", "sigma_blur", "gain",     "contrast",
        "blob_count", "blob_sigma", "blob_amplitude", "extent", "source_poses", "noise_sigma", "noise_seed",
        "z_min"};
    for (const auto& [key, value] : j.items())
        if (!known.contains(key))
            throw ConfigError("unknown scene spec field '" + key + "'");

    SceneSpec s = SceneSpec::defaults();
    const auto num = [&](const char* key, double& dst) {
        if (j.contains(key))
            dst = detail::json_get<double>(j, key);
    };
    const auto integer = [&](const char* key, int& dst) {
        if (j.contains(key))
            dst = detail::json_get<int>(j, key);
    };
    integer("width", s.width);
    integer("height", s.height);
    // Principal point follows the image centre unless given.
    s.intrinsics.cx = 0.5 * (s.width - 1);
    s.intrinsics.cy = 0.5 * (s.height - 1);
    num("fx", s.intrinsics.fx);
    num("fy", s.intrinsics.fy);
    num("cx", s.intrinsics.cx);
    num("cy", s.intrinsics.cy);
    if (j.contains("plane_normal")) {
        const std::vector<double> n = detail::json_doubles(j["plane_normal"], 3, "plane_normal");
        s.plane_normal = Vec3(n[0], n[1], n[2]);
    }
    num("plane_distance", s.plane_distance);
    if (j.contains("texture"))
        s.texture.kind = texture_kind_from_string(detail::json_get<std::string>(j, "texture"));
    // Low-texture scenes carry a few blobs so the detector has features.
    s.texture.blob_count = s.texture.kind == TextureKind::Blobs ? 1 : s.texture.kind == TextureKind::LowTexture ? 4 : 0;
    if (j.contains("seed"))
        s.texture.seed = detail::json_get<std::uint64_t>(j, "seed");
    num("feature_size", s.texture.feature_size);
    num("sigma_blur", s.texture.sigma_blur);
    num("gain", s.texture.gain);
    num("contrast", s.texture.contrast);
    integer("blob_count", s.texture.blob_count);
    num("blob_sigma", s.texture.blob_sigma);
    num("blob_amplitude", s.texture.blob_amplitude);
    num("extent", s.texture.extent);
    if (s.texture.blob_count < 0)
        throw ConfigError("blob_count must be non-negative");
    if (j.contains("source_poses")) {
        const auto& poses = j["source_poses"];
        if (!poses.is_array())
            throw ConfigError("'source_poses' must be an array of twists");
        s.source_twists.clear();
        for (const auto& p : poses)
            s.source_twists.push_back(detail::twist_from_json(p, "source_poses"));
    }
    num("noise_sigma", s.noise_sigma);
    if (j.contains("noise_seed"))
        s.noise_seed = detail::json_get<std::uint64_t>(j, "noise_seed");
    num("z_min", s.z_min);
    validate_spec(s);
    return s;
}

inline nlohmann::json scene_spec_to_json(const SceneSpec& s) {
    nlohmann::json j;
    j["width"] = s.width;
    j["height"] = s.height;
    j["fx"] = s.intrinsics.fx;
    j["fy"] = s.intrinsics.fy;
    j["cx"] = s.intrinsics.cx;
    j["cy"] = s.intrinsics.cy;
    j["plane_normal"] = {s.plane_normal.x(), s.plane_normal.y(), s.plane_normal.z()};
    j["plane_distance"] = s.plane_distance;
    j["texture"] = to_string(s.texture.kind);
    j["seed"] = s.texture.seed;
    j["feature_size"] = s.texture.feature_size;
    j["sigma_blur"] = s.texture.sigma_blur;
    j["gain"] = s.texture.gain;
    j["contrast"] = s.texture.contrast;
    j["blob_count"] = s.texture.blob_count;
    j["blob_sigma"] = s.texture.blob_sigma;
    j["blob_amplitude"] = s.texture.blob_amplitude;
    j["extent"] = s.texture.extent;
    j["source_poses"] = nlohmann::json::array();
    for (const Twist& t : s.source_twists)
        j["source_poses"].push_back(detail::twist_json(t));
    j["noise_sigma"] = s.noise_sigma;
    j["noise_seed"] = s.noise_seed;
    j["z_min"] = s.z_min;
    return j;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out)
        throw IoError("write failed: " + path.string());
}

inline SceneSpec read_scene_spec(const std::filesystem::path& path) {
    return scene_spec_from_json(read_json_file(path));
}

/// A scene as loaded from disk.
struct SceneData {
    Intrinsics intrinsics;
    ImageBuffer target;
    std::vector<ImageBuffer> sources;
    DepthField gt_depth;
    std::vector<Twist> gt_twists;
    bool has_ground_truth = false;
};

inline DepthField depth_from_image(const ImageBuffer& img) {
    if (img.channels() != 1)
        throw ConfigError("depth maps must be single-channel");
    return DepthField::from_depths(img.width(), img.height(), img.data());
}

inline ImageBuffer depth_to_image(const DepthField& d) {
    return ImageBuffer(d.width(), d.height(), 1, d.depths());
}

/// 8-bit inverse-depth preview normalized to the map's own range.
inline ImageBuffer inverse_depth_preview(const DepthField& d) {
    std::vector<double> inv = d.depths();
    for (double& x : inv)
        x = 1.0 / x;
    const auto [lo, hi] = std::minmax_element(inv.begin(), inv.end());
    const double a = *lo, b = *hi;
    for (double& x : inv)
        x = b > a ? (x - a) / (b - a) : 0.5;
    return ImageBuffer(d.width(), d.height(), 1, std::move(inv));
}

inline void write_scene(const SceneSample& sc, const SceneSpec& spec, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json m;
    m["spec"] = scene_spec_to_json(spec);
    m["intrinsics"] = {{"fx", sc.intrinsics.fx}, {"fy", sc.intrinsics.fy}, {"cx", sc.intrinsics.cx},
                       {"cy", sc.intrinsics.cy}};
    m["width"] = sc.target.width();
    m["height"] = sc.target.height();
    write_pnm(sc.target, dir / "target.pgm");
    write_pfm(sc.target, dir / "target.pfm");
    m["target"] = {{"pgm", "target.pgm"}, {"pfm", "target.pfm"}};
    m["sources"] = nlohmann::json::array();
    for (std::size_t k = 0; k < sc.sources.size(); ++k) {
        const std::string stem = "source_" + std::to_string(k);
        write_pnm(sc.sources[k], dir / (stem + ".pgm"));
        write_pfm(sc.sources[k], dir / (stem + ".pfm"));
        m["sources"].push_back({{"pgm", stem + ".pgm"}, {"pfm", stem + ".pfm"}, {"twist", detail::twist_json(sc.gt_twists[k])}});
    }
    write_pfm(depth_to_image(sc.gt_depth), dir / "gt_depth.pfm");
    m["gt_depth"] = "gt_depth.pfm";
    write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

inline SceneData read_scene(const std::filesystem::path& dir) {
    const nlohmann::json m = read_json_file(dir / "manifest.json");
    SceneData sd;
    try {
        const auto& k = m.at("intrinsics");
        sd.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                         k.at("cy").get<double>()};
        const auto load = [&](const nlohmann::json& entry) {
            if (entry.contains("pfm") && std::filesystem::exists(dir / entry["pfm"].get<std::string>()))
                return read_pfm(dir / entry["pfm"].get<std::string>());
            return to_grayscale(read_pnm(dir / entry.at("pgm").get<std::string>()));
        };
        sd.target = to_grayscale(load(m.at("target")));
        bool all_twists = true;
        for (const auto& s : m.at("sources")) {
            sd.sources.push_back(to_grayscale(load(s)));
            if (s.contains("twist"))
                sd.gt_twists.push_back(detail::twist_from_json(s["twist"], "twist"));
            else
                all_twists = false;
        }
        if (m.contains("gt_depth") && all_twists) {
            sd.gt_depth = depth_from_image(read_pfm(dir / m["gt_depth"].get<std::string>()));
            sd.has_ground_truth = true;
        } else {
            sd.gt_twists.clear();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed scene manifest in " + dir.string() + ": " + e.what());
    }
    sd.intrinsics.validate();
    if (sd.sources.empty())
        throw ConfigError("scene " + dir.string() + " lists no source views");
    return sd;
}

} // namespace kpdepth
