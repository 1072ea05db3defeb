#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "edadet/errors.hpp"

namespace edadet {

// RGB image, height x width x 3, interleaved row-major, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool empty() const { return pixels.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

// Bilinear resampling with half-pixel centers and edge clamping.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  require(!src.empty(), "resize_bilinear: empty image");
  require(out_h > 0 && out_w > 0, "resize_bilinear: non-positive output size");
  if (out_h == src.height && out_w == src.width) return src;
  Image dst(out_h, out_w);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c);
        const double bot = (1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c);
        dst.at(y, x, c) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return dst;
}

inline Image flip_horizontal(const Image& src) {
  Image dst(src.height, src.width);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < 3; ++c) dst.at(y, src.width - 1 - x, c) = src.at(y, x, c);
  return dst;
}

// Pixel rectangle [x0, x1) x [y0, y1), clamped to the image.
inline Image crop(const Image& src, int x0, int y0, int x1, int y1) {
  x0 = std::clamp(x0, 0, src.width - 1);
  y0 = std::clamp(y0, 0, src.height - 1);
  x1 = std::clamp(x1, x0 + 1, src.width);
  y1 = std::clamp(y1, y0 + 1, src.height);
  Image dst(y1 - y0, x1 - x0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      for (int c = 0; c < 3; ++c) dst.at(y - y0, x - x0, c) = src.at(y, x, c);
  return dst;
}

}  // namespace edadet
