// Anti-aliased rasterization of the benchmark's shape vocabulary plus the
// procedural background textures. Everything is evaluated in double precision
// from explicit analytic forms; no platform-dependent drawing code.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "adr/common.hpp"

namespace adr::draw {

struct Color {
  double r = 0, g = 0, b = 0;
};

inline Color hsv(double h, double s, double v) {
  h = h - std::floor(h);  // wrap hue into [0, 1)
  const double hf = h * 6.0;
  const int i = static_cast<int>(hf) % 6;
  const double f = hf - std::floor(hf);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline Color mix(const Color& a, const Color& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

inline double luma(const Color& c) { return 0.299 * c.r + 0.587 * c.g + 0.114 * c.b; }

// Color of the given hue/saturation whose luma equals `target` exactly
// (value scales linearly with luma). Keeps chroma as the only label signal
// when a grayscale transform is applied downstream.
inline Color hsv_with_luma(double h, double s, double target) {
  const Color unit = hsv(h, s, 1.0);
  const double l1 = luma(unit);
  const double v = l1 > 0 ? std::min(1.0, target / l1) : 0.0;
  return {unit.r * v, unit.g * v, unit.b * v};
}

struct Canvas {
  int size = 64;
  std::vector<double> rgb;  // size*size*3, values in [0,1]

  explicit Canvas(int n) : size(n), rgb(static_cast<std::size_t>(n) * n * 3, 0.0) {}

  void set(int x, int y, const Color& c) {
    const std::size_t i = (static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)) * 3;
    rgb[i] = c.r;
    rgb[i + 1] = c.g;
    rgb[i + 2] = c.b;
  }
  Color get(int x, int y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  void blend(int x, int y, const Color& c, double alpha) {
    if (alpha <= 0.0) return;
    set(x, y, mix(get(x, y), c, std::min(1.0, alpha)));
  }

  std::vector<std::uint8_t> to_u8() const {
    std::vector<std::uint8_t> out(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) {
      const double v = std::clamp(rgb[i], 0.0, 1.0);
      out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
  }
};

// --- background textures -----------------------------------------------------

enum class Texture { kHStripes, kVStripes, kChecker, kDots, kDiagonal, kRings };
inline constexpr int kTextureCount = 6;

// Pattern weight in [0, 1] at pixel (x, y).
inline double texture_weight(Texture t, double x, double y, double period, double phase,
                             double cx, double cy) {
  switch (t) {
    case Texture::kHStripes: return std::fmod(y + phase, period) < period / 2 ? 0.0 : 1.0;
    case Texture::kVStripes: return std::fmod(x + phase, period) < period / 2 ? 0.0 : 1.0;
    case Texture::kChecker: {
      const int px = static_cast<int>(std::floor((x + phase) / period));
      const int py = static_cast<int>(std::floor((y + phase) / period));
      return ((px + py) & 1) ? 1.0 : 0.0;
    }
    case Texture::kDots: {
      const double lx = std::fmod(x + phase, period) - period / 2;
      const double ly = std::fmod(y + phase, period) - period / 2;
      return std::sqrt(lx * lx + ly * ly) < period * 0.28 ? 1.0 : 0.0;
    }
    case Texture::kDiagonal: return std::fmod(x + y + phase, period) < period / 2 ? 0.0 : 1.0;
    case Texture::kRings: {
      const double r = std::hypot(x - cx, y - cy);
      return std::fmod(r + phase, period) < period / 2 ? 0.0 : 1.0;
    }
  }
  return 0.0;
}

inline void fill_texture(Canvas& canvas, Texture t, const Color& base, const Color& alt,
                         double period, double phase) {
  const double cx = canvas.size / 2.0, cy = canvas.size / 2.0;
  for (int y = 0; y < canvas.size; ++y)
    for (int x = 0; x < canvas.size; ++x)
      canvas.set(x, y, mix(base, alt, texture_weight(t, x + 0.5, y + 0.5, period, phase, cx, cy)));
}

// --- shapes -------------------------------------------------------------------

enum class Shape { kCircle, kSquare, kTriangle, kStar, kPlus, kRing, kDiamond };
inline constexpr int kShapeCount = 7;

// Signed distance (negative inside) in shape-local coordinates; `radius` is
// the nominal half-extent in pixels.
inline double shape_sdf(Shape s, double x, double y, double radius) {
  switch (s) {
    case Shape::kCircle: return std::hypot(x, y) - radius * 0.92;
    case Shape::kSquare: return std::max(std::fabs(x), std::fabs(y)) - radius * 0.8;
    case Shape::kTriangle: {
      // Equilateral triangle, apex up.
      const double r = radius * 1.05;
      const double d1 = -y - r * 0.5;                          // bottom edge
      const double d2 = 0.866025403784 * x + 0.5 * y - r * 0.5;  // right edge
      const double d3 = -0.866025403784 * x + 0.5 * y - r * 0.5; // left edge
      return std::max({d1, d2, d3});
    }
    case Shape::kStar: {
      const double r = std::hypot(x, y);
      double theta = std::atan2(y, x);
      // Five-pointed star via a radial tooth profile.
      const double teeth = 5.0;
      double saw = std::fmod(theta * teeth / (2.0 * 3.14159265358979323846) + 10.0, 1.0);
      saw = saw < 0.5 ? saw * 2.0 : (1.0 - saw) * 2.0;  // triangle wave in [0,1]
      const double boundary = radius * (0.45 + 0.55 * (1.0 - saw));
      return r - boundary;
    }
    case Shape::kPlus: {
      const double bar1 = std::max(std::fabs(x) - radius, std::fabs(y) - radius * 0.34);
      const double bar2 = std::max(std::fabs(y) - radius, std::fabs(x) - radius * 0.34);
      return std::min(bar1, bar2);
    }
    case Shape::kRing: return std::fabs(std::hypot(x, y) - radius * 0.68) - radius * 0.26;
    case Shape::kDiamond: return (std::fabs(x) + std::fabs(y)) - radius * 1.1;
  }
  return 1e9;
}

enum class Stroke { kFilled, kOutline, kFilledRim, kHollow };
inline constexpr int kStrokeCount = 4;

// Coverage in [0,1] of the stroked shape at a pixel, 2x2 supersampled.
inline double shape_coverage(Shape s, Stroke stroke, double px, double py, double cx, double cy,
                             double radius, double rotation, double outline_w) {
  const double cosr = std::cos(rotation), sinr = std::sin(rotation);
  int hit = 0;
  static const double offs[2] = {-0.25, 0.25};
  for (double dx : offs)
    for (double dy : offs) {
      const double gx = px + 0.5 + dx - cx;
      const double gy = py + 0.5 + dy - cy;
      const double lx = cosr * gx + sinr * gy;
      const double ly = -sinr * gx + cosr * gy;
      const double d = shape_sdf(s, lx, ly, radius);
      bool inside = false;
      switch (stroke) {
        case Stroke::kFilled: inside = d < 0; break;
        case Stroke::kOutline: inside = std::fabs(d) < outline_w; break;
        case Stroke::kFilledRim: inside = d < 0; break;  // rim handled by caller color
        case Stroke::kHollow: inside = d < 0 && d > -radius * 0.38; break;
      }
      if (inside) ++hit;
    }
  return hit / 4.0;
}

// Rim band coverage used by Stroke::kFilledRim.
inline double rim_coverage(Shape s, double px, double py, double cx, double cy, double radius,
                           double rotation, double band) {
  const double cosr = std::cos(rotation), sinr = std::sin(rotation);
  int hit = 0;
  static const double offs[2] = {-0.25, 0.25};
  for (double dx : offs)
    for (double dy : offs) {
      const double gx = px + 0.5 + dx - cx;
      const double gy = py + 0.5 + dy - cy;
      const double lx = cosr * gx + sinr * gy;
      const double ly = -sinr * gx + cosr * gy;
      if (std::fabs(shape_sdf(s, lx, ly, radius)) < band) ++hit;
    }
  return hit / 4.0;
}

inline void draw_shape(Canvas& canvas, Shape s, Stroke stroke, double cx, double cy, double radius,
                       double rotation, const Color& fill) {
  const double outline_w = std::max(2.0, radius * 0.22);
  const int lo_x = std::max(0, static_cast<int>(cx - radius * 1.6));
  const int hi_x = std::min(canvas.size - 1, static_cast<int>(cx + radius * 1.6));
  const int lo_y = std::max(0, static_cast<int>(cy - radius * 1.6));
  const int hi_y = std::min(canvas.size - 1, static_cast<int>(cy + radius * 1.6));
  const Color rim = {fill.r * 0.45, fill.g * 0.45, fill.b * 0.45};
  for (int y = lo_y; y <= hi_y; ++y)
    for (int x = lo_x; x <= hi_x; ++x) {
      const double cov = shape_coverage(s, stroke, x, y, cx, cy, radius, rotation, outline_w);
      if (cov > 0) canvas.blend(x, y, fill, cov);
      if (stroke == Stroke::kFilledRim) {
        const double rimcov = rim_coverage(s, x, y, cx, cy, radius, rotation, outline_w * 0.6);
        if (rimcov > 0) canvas.blend(x, y, rim, rimcov);
      }
    }
}

inline void fill_rect(Canvas& canvas, int x0, int y0, int w, int h, const Color& c) {
  for (int y = std::max(0, y0); y < std::min(canvas.size, y0 + h); ++y)
    for (int x = std::max(0, x0); x < std::min(canvas.size, x0 + w); ++x) canvas.set(x, y, c);
}

}  // namespace adr::draw
