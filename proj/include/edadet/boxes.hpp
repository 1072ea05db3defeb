#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "edadet/errors.hpp"

namespace edadet {

// Corner box (x1, y1, x2, y2). Normalized to [0, 1] unless stated otherwise.
struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  friend bool operator==(const BoxXYXY&, const BoxXYXY&) = default;
};

// Center box (cx, cy, w, h).
struct BoxCXCYWH {
  double cx = 0, cy = 0, w = 0, h = 0;
  friend bool operator==(const BoxCXCYWH&, const BoxCXCYWH&) = default;
};

inline BoxXYXY to_xyxy(const BoxCXCYWH& b) { return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2}; }

inline BoxCXCYWH to_cxcywh(const BoxXYXY& b) {
  return {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1};
}

inline void check_box(const BoxXYXY& b, const char* who) {
  require(std::isfinite(b.x1) && std::isfinite(b.y1) && std::isfinite(b.x2) && std::isfinite(b.y2),
          std::string(who) + ": non-finite box");
  require(b.x2 >= b.x1 && b.y2 >= b.y1, std::string(who) + ": box has negative area");
}

inline double intersection_area(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return std::max(0.0, iw) * std::max(0.0, ih);
}

inline double iou(const BoxXYXY& a, const BoxXYXY& b) {
  check_box(a, "iou");
  check_box(b, "iou");
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// IoU - |hull \ union| / |hull|.
inline double giou(const BoxXYXY& a, const BoxXYXY& b) {
  check_box(a, "giou");
  check_box(b, "giou");
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  const double i = uni > 0 ? inter / uni : 0.0;
  if (hull <= 0) return i;
  return i - (hull - uni) / hull;
}

// Class-agnostic proposal: a normalized center box and an object confidence.
struct Proposal {
  BoxCXCYWH box;
  double objectness = 0.0;

  void validate() const {
    require(box.w > 0 && box.w <= 1 && box.h > 0 && box.h <= 1, "Proposal: width/height must lie in (0, 1]");
    require(box.cx >= 0 && box.cx <= 1 && box.cy >= 0 && box.cy <= 1, "Proposal: center outside [0, 1]^2");
    require(std::isfinite(objectness) && objectness >= 0 && objectness <= 1, "Proposal: objectness outside [0, 1]");
  }
};

// Intersection with the unit square.
inline BoxXYXY clip_unit(const BoxXYXY& b) {
  return {std::clamp(b.x1, 0.0, 1.0), std::clamp(b.y1, 0.0, 1.0), std::clamp(b.x2, 0.0, 1.0), std::clamp(b.y2, 0.0, 1.0)};
}

inline BoxXYXY flip_box_horizontal(const BoxXYXY& b) { return {1.0 - b.x2, b.y1, 1.0 - b.x1, b.y2}; }

inline BoxXYXY scale_box(const BoxXYXY& b, double sx, double sy) { return {b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy}; }

}  // namespace edadet
