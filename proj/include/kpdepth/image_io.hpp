#pragma once

// Netpbm (P5/P6, 8-bit) and PFM (Pf/PF, little-endian) readers and writers.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kpdepth/errors.hpp"
#include "kpdepth/image.hpp"

namespace kpdepth {

namespace detail {

inline std::string read_token(std::istream& in) {
    std::string tok;
    char c = 0;
    while (in.get(c)) {
        if (c == '#') {
            std::string skip;
            std::getline(in, skip);
            continue;
        }
        if (!std::isspace(static_cast<unsigned char>(c))) {
            tok.push_back(c);
            break;
        }
    }
    while (in.get(c) && !std::isspace(static_cast<unsigned char>(c)))
        tok.push_back(c);
    return tok;
}

inline int parse_positive(const std::string& tok, const std::filesystem::path& path) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used == tok.size() && v > 0)
            return v;
    } catch (const std::exception&) {
    }
    throw IoError("malformed header field '" + tok + "' in " + path.string());
}

inline std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big)
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    return v;
}

} // namespace detail

/// Reads an 8-bit binary PGM (P5) or PPM (P6); intensities are divided by 255.
inline ImageBuffer read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    const std::string magic = detail::read_token(in);
    int channels = 0;
    if (magic == "P5")
        channels = 1;
    else if (magic == "P6")
        channels = 3;
    else
        throw IoError("unsupported netpbm magic '" + magic + "' in " + path.string());
    const int w = detail::parse_positive(detail::read_token(in), path);
    const int h = detail::parse_positive(detail::read_token(in), path);
    const int maxval = detail::parse_positive(detail::read_token(in), path);
    if (maxval != 255)
        throw IoError("only maxval 255 is supported: " + path.string());
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IoError("truncated pixel data in " + path.string());
    std::vector<double> data(raw.size());
    for (std::size_t k = 0; k < raw.size(); ++k)
        data[k] = raw[k] / 255.0;
    return ImageBuffer(w, h, channels, std::move(data));
}

/// Writes P5 (1 channel) or P6 (3 channels); values are clamped to [0,1] and
/// rounded to the nearest 8-bit level.
inline void write_pnm(const ImageBuffer& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out << (img.channels() == 1 ? "P5" : "P6") << '\n'
        << img.width() << ' ' << img.height() << "\n255\n";
    std::vector<unsigned char> raw(img.data().size());
    for (std::size_t k = 0; k < raw.size(); ++k) {
        const double v = std::clamp(img.data()[k], 0.0, 1.0);
        raw[k] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out)
        throw IoError("write failed: " + path.string());
}

/// Writes a little-endian PFM (scale -1.0). Rows are stored bottom-to-top.
inline void write_pfm(const ImageBuffer& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out << (img.channels() == 1 ? "Pf" : "PF") << '\n'
        << img.width() << ' ' << img.height() << "\n-1.0\n";
    const int nc = img.channels();
    std::vector<std::uint32_t> row(static_cast<std::size_t>(img.width()) * nc);
    for (int i = img.height() - 1; i >= 0; --i) {
        for (int j = 0; j < img.width(); ++j)
            for (int c = 0; c < nc; ++c) {
                const float f = static_cast<float>(img.at(i, j, c));
                row[static_cast<std::size_t>(j) * nc + c] =
                    detail::to_little_endian(std::bit_cast<std::uint32_t>(f));
            }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(std::uint32_t)));
    }
    if (!out)
        throw IoError("write failed: " + path.string());
}

inline ImageBuffer read_pfm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    const std::string magic = detail::read_token(in);
    int channels = 0;
    if (magic == "Pf")
        channels = 1;
    else if (magic == "PF")
        channels = 3;
    else
        throw IoError("unsupported PFM magic '" + magic + "' in " + path.string());
    const int w = detail::parse_positive(detail::read_token(in), path);
    const int h = detail::parse_positive(detail::read_token(in), path);
    const std::string scale_tok = detail::read_token(in);
    double scale = 0.0;
    try {
        scale = std::stod(scale_tok);
    } catch (const std::exception&) {
        throw IoError("malformed PFM scale in " + path.string());
    }
    const bool little = scale < 0.0;
    ImageBuffer img(w, h, channels);
    std::vector<std::uint32_t> row(static_cast<std::size_t>(w) * channels);
    for (int i = h - 1; i >= 0; --i) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(std::uint32_t)));
        if (in.gcount() != static_cast<std::streamsize>(row.size() * sizeof(std::uint32_t)))
            throw IoError("truncated PFM data in " + path.string());
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < channels; ++c) {
                std::uint32_t bits = row[static_cast<std::size_t>(j) * channels + c];
                const bool file_matches_host =
                    little == (std::endian::native == std::endian::little);
                if (!file_matches_host)
                    bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) |
                           ((bits >> 8) & 0xff00u) | (bits >> 24);
                img.at(i, j, c) = std::bit_cast<float>(bits);
            }
    }
    return img;
}

/// Dispatches on extension: .pfm goes through the float reader, everything
/// else through the 8-bit netpbm reader.
inline ImageBuffer read_image(const std::filesystem::path& path) {
    if (path.extension() == ".pfm")
        return read_pfm(path);
    return read_pnm(path);
}

} // namespace kpdepth
