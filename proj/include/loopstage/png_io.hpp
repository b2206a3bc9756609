#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "loopstage/image.hpp"

namespace loopstage {

// Reads any 8-bit PNG (gray, gray+alpha, RGB, RGBA) as RGB.
Image read_png_rgb(const std::filesystem::path& path);
// Reads a PNG as a binary mask: any nonzero luminance is foreground.
Mask read_png_mask(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image& image);
// Foreground is written as 255, background as 0.
void write_png(const std::filesystem::path& path, const Mask& mask);

std::vector<std::uint8_t> encode_png(const Image& image);
// RGBA PNG: opaque where `alpha` is foreground, transparent elsewhere.
std::vector<std::uint8_t> encode_png_rgba(const Image& image, const Mask& alpha);

// "%06d.png" naming used for frame and mask directories.
std::string numbered_png_name(int index);

}  // namespace loopstage
