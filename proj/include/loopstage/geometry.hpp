#pragma once

#include <algorithm>
#include <cmath>

namespace loopstage {

// Integer pixel rectangle [x0, x1) x [y0, y1).
struct Rect {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return std::max(0, x1 - x0); }
  int height() const { return std::max(0, y1 - y0); }
  bool empty() const { return width() == 0 || height() == 0; }
  bool contains(int x, int y) const {
    return x >= x0 && x < x1 && y >= y0 && y < y1;
  }
  Rect clipped(int w, int h) const {
    return {std::clamp(x0, 0, w), std::clamp(y0, 0, h), std::clamp(x1, 0, w),
            std::clamp(y1, 0, h)};
  }
  Rect united(const Rect& o) const {
    if (empty()) return o;
    if (o.empty()) return *this;
    return {std::min(x0, o.x0), std::min(y0, o.y0), std::max(x1, o.x1),
            std::max(y1, o.y1)};
  }
};

// Pixels added around each tracked box: masks may extend this far (soft
// shadows kept by segmentation) and frame differences are summed over it.
inline constexpr double kBoxDilation = 8.0;

// Tracker output: a rectangle of size (width, height) centred on (cx, cy)
// and rotated by `angle` radians.
struct OrientedBox {
  double cx = 0.0;
  double cy = 0.0;
  double width = 0.0;
  double height = 0.0;
  double angle = 0.0;

  // Tests the pixel centre (x + 0.5, y + 0.5) against the box grown by
  // `dilation` pixels on every side.
  bool contains(int x, int y, double dilation = 0.0) const {
    const double dx = x + 0.5 - cx;
    const double dy = y + 0.5 - cy;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) <= width / 2.0 + dilation &&
           std::abs(v) <= height / 2.0 + dilation;
  }

  // Axis-aligned pixel bounds of the (dilated) rotated rectangle.
  Rect bounds(double dilation = 0.0) const {
    const double hw = width / 2.0 + dilation;
    const double hh = height / 2.0 + dilation;
    const double c = std::abs(std::cos(angle));
    const double s = std::abs(std::sin(angle));
    const double ex = c * hw + s * hh;
    const double ey = s * hw + c * hh;
    return {static_cast<int>(std::floor(cx - ex)) - 1,
            static_cast<int>(std::floor(cy - ey)) - 1,
            static_cast<int>(std::ceil(cx + ex)) + 1,
            static_cast<int>(std::ceil(cy + ey)) + 1};
  }

  double diagonal() const { return std::hypot(width, height); }

  friend bool operator==(const OrientedBox&, const OrientedBox&) = default;
};

}  // namespace loopstage
