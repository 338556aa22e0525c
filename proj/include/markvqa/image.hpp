#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace markvqa {

/// Interleaved 8-bit RGB raster, row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // height * width * 3

    Image() = default;
    Image(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

    std::uint8_t* at(int row, int col) { return &pixels[(static_cast<std::size_t>(row) * width + col) * 3]; }
    const std::uint8_t* at(int row, int col) const {
        return &pixels[(static_cast<std::size_t>(row) * width + col) * 3];
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Binary H x W grid, row-major, one byte per cell (0 or 1).
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

    bool get(int row, int col) const { return bits[static_cast<std::size_t>(row) * width + col] != 0; }
    void set(int row, int col, bool v = true) { bits[static_cast<std::size_t>(row) * width + col] = v ? 1 : 0; }
    std::size_t count() const;

    friend bool operator==(const Mask&, const Mask&) = default;
};

/// Run-length encoding of a mask in row-major order. Runs alternate starting
/// with a (possibly zero-length) run of unset cells.
std::vector<std::uint32_t> rle_encode(const Mask& mask);
Mask rle_decode(std::span<const std::uint32_t> runs, int height, int width);

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

}  // namespace markvqa
