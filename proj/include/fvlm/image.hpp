#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fvlm {

/// Interleaved RGB image, channels as reals in [0,1], row-major.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> pixels;  // height * width * 3

    std::size_t size() const { return pixels.size(); }
    bool valid() const { return pixels.size() == width * height * 3; }
};

/// Pulls every channel toward/away from the mean gray luminance
/// (0.299 R + 0.587 G + 0.114 B averaged over the image), clamped to [0,1].
/// factor 1.0 returns the input bit-identically; factor 0.0 is constant gray.
Image enhance_contrast(const Image& img, double factor);

/// Hexcone conversions; H, S, V all live in [0,1].
Image rgb_to_hsv(const Image& img);
Image hsv_to_rgb(const Image& img);

// Binary PPM (P6, maxval 255).
Image read_ppm(const std::string& path);
void write_ppm(const Image& img, const std::string& path);

/// Deterministic synthetic fundus-like test pattern keyed by a seed.
Image synthetic_image(std::size_t side, std::uint64_t seed);

}  // namespace fvlm
