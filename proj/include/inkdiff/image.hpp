#pragma once

#include <filesystem>
#include <vector>

namespace inkdiff {

/// Row-major grayscale raster with intensities in [0,1], 1 = white.
struct ImageBuffer {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    ImageBuffer() = default;
    ImageBuffer(int h, int w, float fill = 1.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

    float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
    float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
    std::size_t size() const { return pixels.size(); }

    /// Throws ShapeMismatch / InvalidRange if the invariants are broken.
    void validate() const;

    bool operator==(const ImageBuffer&) const = default;
};

/// 8-bit quantisation used by the PGM writer: round(v * 255) after clamping.
unsigned char to_byte(float v);

/// Binary P5 PGM, maxval 255, 255 = white.
void write_pgm(const std::filesystem::path& path, const ImageBuffer& img);
ImageBuffer read_pgm(const std::filesystem::path& path);

}  // namespace inkdiff
