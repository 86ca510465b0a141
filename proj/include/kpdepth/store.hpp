#pragma once

// DGRID001: on-disk cache for dense descriptor grids.
//
//   offset  size  field
//   0       8     magic "DGRID001"
//   8       2     width            (u16, little-endian)
//   10      2     height           (u16)
//   12      2     descriptor_dim   (u16, always 128)
//   14      2     patch_size       (u16)
//   16      8     checksum         (u64, FNV-1a over bytes 0..15, then the payload)
//   24      ...   width*height*128 float32, little-endian, row-major
//
// A 4x4 grid is 24 + 4*4*128*4 = 8216 bytes.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "kpdepth/errors.hpp"
#include "kpdepth/sift.hpp"

namespace kpdepth {

inline constexpr std::array<char, 8> kGridMagic{'D', 'G', 'R', 'I', 'D', '0', '0', '1'};
inline constexpr std::size_t kGridHeaderSize = 24;

class StoreError : public IoError {
public:
    enum class Kind { Io, BadMagic, Dimension, PayloadLength, Checksum };

    StoreError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t hash = 0xcbf29ce484222325ULL) {
    for (unsigned char b : bytes) {
        hash ^= b;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& buf, std::size_t offset, T value) {
    for (std::size_t k = 0; k < sizeof(T); ++k)
        buf[offset + k] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * k)) & 0xffu);
}

template <typename T>
T get_le(std::span<const unsigned char> buf, std::size_t offset) {
    std::uint64_t v = 0;
    for (std::size_t k = 0; k < sizeof(T); ++k)
        v |= static_cast<std::uint64_t>(buf[offset + k]) << (8 * k);
    return static_cast<T>(v);
}

} // namespace detail

/// Serializes the grid into the DGRID001 byte layout.
inline std::vector<unsigned char> encode_grid(const DescriptorGrid& grid, int patch_size) {
    if (grid.width() > 0xffff || grid.height() > 0xffff || patch_size < 0 || patch_size > 0xffff)
        throw ConfigError("grid dimensions or patch size exceed the 16-bit header fields");
    const std::size_t count = grid.values().size();
    std::vector<unsigned char> buf(kGridHeaderSize + 4 * count);
    std::memcpy(buf.data(), kGridMagic.data(), kGridMagic.size());
    detail::put_le<std::uint16_t>(buf, 8, static_cast<std::uint16_t>(grid.width()));
    detail::put_le<std::uint16_t>(buf, 10, static_cast<std::uint16_t>(grid.height()));
    detail::put_le<std::uint16_t>(buf, 12, static_cast<std::uint16_t>(kDescriptorDim));
    detail::put_le<std::uint16_t>(buf, 14, static_cast<std::uint16_t>(patch_size));
    for (std::size_t k = 0; k < count; ++k)
        detail::put_le<std::uint32_t>(buf, kGridHeaderSize + 4 * k,
                                      std::bit_cast<std::uint32_t>(static_cast<float>(grid.values()[k])));
    const std::span<const unsigned char> bytes(buf);
    const std::uint64_t sum = fnv1a64(bytes.subspan(kGridHeaderSize), fnv1a64(bytes.first(16)));
    detail::put_le<std::uint64_t>(buf, 16, sum);
    return buf;
}

struct GridFile {
    DescriptorGrid grid;
    int patch_size = 0;
};

inline GridFile decode_grid(std::span<const unsigned char> bytes, const std::string& origin = "<memory>") {
    using Kind = StoreError::Kind;
    if (bytes.size() < kGridHeaderSize)
        throw StoreError(Kind::PayloadLength, "truncated header in " + origin);
    if (!std::equal(kGridMagic.begin(), kGridMagic.end(), bytes.begin()))
        throw StoreError(Kind::BadMagic, "bad magic in " + origin + " (expected DGRID001)");
    const int width = detail::get_le<std::uint16_t>(bytes, 8);
    const int height = detail::get_le<std::uint16_t>(bytes, 10);
    const int dim = detail::get_le<std::uint16_t>(bytes, 12);
    const int patch = detail::get_le<std::uint16_t>(bytes, 14);
    if (dim != kDescriptorDim)
        throw StoreError(Kind::Dimension, "descriptor dimension mismatch in " + origin + ": expected " +
                                              std::to_string(kDescriptorDim) + ", found " + std::to_string(dim));
    if (width == 0 || height == 0)
        throw StoreError(Kind::Dimension, "zero grid dimension in " + origin);
    const std::size_t count = static_cast<std::size_t>(width) * height * kDescriptorDim;
    if (bytes.size() != kGridHeaderSize + 4 * count)
        throw StoreError(Kind::PayloadLength, "payload length mismatch in " + origin + ": expected " +
                                                  std::to_string(4 * count) + " bytes, found " +
                                                  std::to_string(bytes.size() - kGridHeaderSize));
    const std::uint64_t stored = detail::get_le<std::uint64_t>(bytes, 16);
    const std::uint64_t actual = fnv1a64(bytes.subspan(kGridHeaderSize), fnv1a64(bytes.first(16)));
    if (stored != actual)
        throw StoreError(Kind::Checksum, "checksum mismatch in " + origin);
    GridFile f{DescriptorGrid(width, height), patch};
    auto values = f.grid.values();
    for (std::size_t k = 0; k < count; ++k)
        values[k] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, kGridHeaderSize + 4 * k));
    return f;
}

inline void write_grid(const DescriptorGrid& grid, int patch_size, const std::filesystem::path& path) {
    const std::vector<unsigned char> buf = encode_grid(grid, patch_size);
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw StoreError(StoreError::Kind::Io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out)
        throw StoreError(StoreError::Kind::Io, "write failed: " + path.string());
}

inline GridFile read_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw StoreError(StoreError::Kind::Io, "cannot open " + path.string());
    const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_grid(buf, path.string());
}

} // namespace kpdepth
