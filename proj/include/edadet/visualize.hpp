#pragma once

// Raster outputs: per-category heatmaps, argmax and cluster label maps,
// detection overlays.

#include <array>
#include <cstdint>
#include <vector>

#include "edadet/dense_scoring.hpp"
#include "edadet/image.hpp"
#include "edadet/image_io.hpp"
#include "edadet/objectives.hpp"

namespace edadet {

// Cell-resolution grayscale heatmap of one channel: round(255 * prob).
inline std::vector<std::uint8_t> heatmap_bytes(const DenseScoreMap& map, int channel) {
  require(channel >= 0 && channel < map.num_categories(), "heatmap_bytes: channel out of range");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(map.h) * map.w);
  for (int i = 0; i < map.h * map.w; ++i) out[static_cast<std::size_t>(i)] = to_byte(map.probs(i, channel));
  return out;
}

// Per-cell argmax; ties resolve to the lowest channel.
inline std::vector<std::uint8_t> argmax_labels(const DenseScoreMap& map) {
  require(map.num_categories() <= 256, "argmax_labels: at most 256 categories");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(map.h) * map.w);
  for (int i = 0; i < map.h * map.w; ++i) {
    Eigen::Index c = 0;
    map.probs.row(i).maxCoeff(&c);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(c);
  }
  return out;
}

// Fixed, well-separated colors; cycles past 12.
inline std::vector<std::array<std::uint8_t, 3>> label_palette(int n) {
  static const std::array<std::array<std::uint8_t, 3>, 12> base{{{230, 25, 75},
                                                                 {60, 180, 75},
                                                                 {0, 130, 200},
                                                                 {255, 225, 25},
                                                                 {245, 130, 48},
                                                                 {145, 30, 180},
                                                                 {70, 240, 240},
                                                                 {240, 50, 230},
                                                                 {210, 245, 60},
                                                                 {250, 190, 212},
                                                                 {0, 128, 128},
                                                                 {128, 128, 128}}};
  std::vector<std::array<std::uint8_t, 3>> p;
  for (int i = 0; i < n; ++i) p.push_back(base[static_cast<std::size_t>(i) % base.size()]);
  return p;
}

// Copy of `im` with each detection's rectangle outlined in its label color.
inline Image draw_detections(const Image& im, const std::vector<Detection>& dets, int num_labels) {
  Image out = im;
  const auto pal = label_palette(std::max(num_labels, 1));
  for (const auto& d : dets) {
    const auto& c = pal[static_cast<std::size_t>(std::max(d.label, 0)) % pal.size()];
    const int x0 = std::clamp(static_cast<int>(d.box.x1 * im.width), 0, im.width - 1);
    const int x1 = std::clamp(static_cast<int>(d.box.x2 * im.width), 0, im.width - 1);
    const int y0 = std::clamp(static_cast<int>(d.box.y1 * im.height), 0, im.height - 1);
    const int y1 = std::clamp(static_cast<int>(d.box.y2 * im.height), 0, im.height - 1);
    auto put = [&](int y, int x) {
      for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = c[static_cast<std::size_t>(ch)] / 255.0f;
    };
    for (int x = x0; x <= x1; ++x) put(y0, x), put(y1, x);
    for (int y = y0; y <= y1; ++y) put(y, x0), put(y, x1);
  }
  return out;
}

}  // namespace edadet
