#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace loopstage {

// Interleaved 8-bit RGB image, row-major.
class Image {
 public:
  Image() = default;
  Image(int width, int height, std::uint8_t fill = 0)
      : width_(width), height_(height),
        pixels_(static_cast<std::size_t>(width) * height * 3, fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return pixels_.empty(); }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width_) * height_;
  }

  std::uint8_t* at(int x, int y) {
    return pixels_.data() + (static_cast<std::size_t>(y) * width_ + x) * 3;
  }
  const std::uint8_t* at(int x, int y) const {
    return pixels_.data() + (static_cast<std::size_t>(y) * width_ + x) * 3;
  }
  void set(int x, int y, std::array<std::uint8_t, 3> rgb) {
    auto* p = at(x, y);
    p[0] = rgb[0];
    p[1] = rgb[1];
    p[2] = rgb[2];
  }

  std::span<std::uint8_t> data() { return pixels_; }
  std::span<const std::uint8_t> data() const { return pixels_; }

  bool same_size(const Image& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }
  friend bool operator==(const Image&, const Image&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

// Binary foreground mask; nonzero means foreground.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height, std::uint8_t fill = 0)
      : width_(width), height_(height),
        bits_(static_cast<std::size_t>(width) * height, fill) {}

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return bits_.empty(); }

  bool fg(int x, int y) const {
    return bits_[static_cast<std::size_t>(y) * width_ + x] != 0;
  }
  void set(int x, int y, bool value) {
    bits_[static_cast<std::size_t>(y) * width_ + x] = value ? 1 : 0;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits_) n += b != 0;
    return n;
  }

  std::span<std::uint8_t> data() { return bits_; }
  std::span<const std::uint8_t> data() const { return bits_; }
  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Squared L2 distance between two RGB pixels.
inline double squared_color_distance(const std::uint8_t* a,
                                     const std::uint8_t* b) {
  double sum = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double d = static_cast<double>(a[c]) - static_cast<double>(b[c]);
    sum += d * d;
  }
  return sum;
}

}  // namespace loopstage
