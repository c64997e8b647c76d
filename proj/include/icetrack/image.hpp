#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "icetrack/errors.hpp"

namespace icetrack {

// Grayscale image, values in [0, 1], row-major.
struct ImageF {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  ImageF() = default;
  ImageF(int w, int h, float fill = 0.0f) : width(w), height(h), data(std::size_t(w) * h, fill) {}

  float& at(int x, int y) { return data[std::size_t(y) * width + x]; }
  float at(int x, int y) const { return data[std::size_t(y) * width + x]; }
  std::size_t size() const { return data.size(); }
};

// 8-bit RGB image for overlay output.
struct ImageRgb8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // 3 bytes per pixel

  ImageRgb8() = default;
  ImageRgb8(int w, int h) : width(w), height(h), data(std::size_t(w) * h * 3, 0) {}

  static ImageRgb8 from_gray(const ImageF& g) {
    ImageRgb8 rgb(g.width, g.height);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto v = static_cast<std::uint8_t>(
          std::lround(std::clamp(g.data[i], 0.0f, 1.0f) * 255.0f));
      rgb.data[3 * i] = rgb.data[3 * i + 1] = rgb.data[3 * i + 2] = v;
    }
    return rgb;
  }

  void set(int x, int y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const std::size_t i = (std::size_t(y) * width + x) * 3;
    data[i] = c[0];
    data[i + 1] = c[1];
    data[i + 2] = c[2];
  }
};

// Area-average resampling; exact mean for integer ratios, deterministic.
inline ImageF resize_area(const ImageF& src, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw ShapeMismatch("resize target must be positive");
  if (src.width == out_w && src.height == out_h) return src;
  ImageF dst(out_w, out_h);
  const double sx = double(src.width) / out_w;
  const double sy = double(src.height) / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    const int iy0 = int(std::floor(y0)), iy1 = std::min(int(std::ceil(y1)), src.height);
    for (int ox = 0; ox < out_w; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      const int ix0 = int(std::floor(x0)), ix1 = std::min(int(std::ceil(x1)), src.width);
      double acc = 0.0, wsum = 0.0;
      for (int iy = iy0; iy < iy1; ++iy) {
        const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
        for (int ix = ix0; ix < ix1; ++ix) {
          const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
          acc += wy * wx * src.at(ix, iy);
          wsum += wy * wx;
        }
      }
      dst.at(ox, oy) = float(wsum > 0.0 ? acc / wsum : 0.0);
    }
  }
  return dst;
}

// Separable Gaussian blur; kernel radius 3 sigma.
inline void gaussian_blur(ImageF& img, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (auto& k : kernel) k /= sum;

  ImageF tmp(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = std::clamp(x + i, 0, img.width - 1);
        acc += kernel[i + radius] * img.at(xx, y);
      }
      tmp.at(x, y) = float(acc);
    }
  }
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = std::clamp(y + i, 0, img.height - 1);
        acc += kernel[i + radius] * tmp.at(x, yy);
      }
      img.at(x, y) = float(acc);
    }
  }
}

inline void draw_line(ImageRgb8& img, double x0, double y0, double x1, double y1,
                      const std::array<std::uint8_t, 3>& color) {
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int steps = std::max(1, int(std::ceil(len)));
  for (int i = 0; i <= steps; ++i) {
    const double t = double(i) / steps;
    img.set(int(std::lround(x0 + t * (x1 - x0))), int(std::lround(y0 + t * (y1 - y0))), color);
  }
}

inline void draw_rect(ImageRgb8& img, double x0, double y0, double x1, double y1,
                      const std::array<std::uint8_t, 3>& color) {
  draw_line(img, x0, y0, x1, y0, color);
  draw_line(img, x1, y0, x1, y1, color);
  draw_line(img, x1, y1, x0, y1, color);
  draw_line(img, x0, y1, x0, y0, color);
}

inline void draw_arrow(ImageRgb8& img, double x0, double y0, double angle_rad, double length,
                       const std::array<std::uint8_t, 3>& color) {
  const double x1 = x0 + length * std::cos(angle_rad);
  const double y1 = y0 + length * std::sin(angle_rad);
  draw_line(img, x0, y0, x1, y1, color);
  const double head = std::max(3.0, length * 0.25);
  for (double side : {0.75, -0.75}) {
    draw_line(img, x1, y1, x1 - head * std::cos(angle_rad + side),
              y1 - head * std::sin(angle_rad + side), color);
  }
}

}  // namespace icetrack
