#pragma once

// The attribute world shared by the synthetic renderer and the stub encoders:
// every category is a "<color> <shape>" pair, colors are flat RGB fills and
// each shape carries its own texture so shape identity is visible locally.

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

namespace edadet::synth {

struct ColorDef {
  std::string_view name;
  std::array<float, 3> rgb;
};

inline constexpr std::array<ColorDef, 4> kColors{{
    {"red", {0.90f, 0.15f, 0.15f}},
    {"green", {0.15f, 0.85f, 0.20f}},
    {"blue", {0.20f, 0.30f, 0.95f}},
    {"yellow", {0.90f, 0.85f, 0.10f}},
}};

enum class Shape { circle = 0, square = 1, triangle = 2 };

inline constexpr std::array<std::string_view, 3> kShapeNames{"circle", "square", "triangle"};

inline constexpr float kBackgroundLevel = 0.08f;
inline constexpr float kBackgroundJitter = 0.03f;
inline constexpr float kTextureLow = 0.55f;

// Circle: horizontal stripes. Square: vertical stripes. Triangle: checkerboard.
// Period 4 px in absolute image coordinates.
inline bool texture_on(Shape s, int x, int y) {
  switch (s) {
    case Shape::circle:
      return (y / 2) % 2 == 0;
    case Shape::square:
      return (x / 2) % 2 == 0;
    case Shape::triangle:
      return ((x / 2) + (y / 2)) % 2 == 0;
  }
  return false;
}

struct Attributes {
  int color;  // index into kColors
  Shape shape;
};

// Parses "<color> <shape>"; nullopt when the renderer cannot express it.
inline std::optional<Attributes> parse_category(std::string_view name) {
  std::istringstream is{std::string(name)};
  std::string c, s, extra;
  if (!(is >> c >> s) || (is >> extra)) return std::nullopt;
  std::optional<int> ci;
  for (std::size_t i = 0; i < kColors.size(); ++i)
    if (kColors[i].name == c) ci = static_cast<int>(i);
  std::optional<Shape> si;
  for (std::size_t i = 0; i < kShapeNames.size(); ++i)
    if (kShapeNames[i] == s) si = static_cast<Shape>(i);
  if (!ci || !si) return std::nullopt;
  return Attributes{*ci, *si};
}

inline std::string category_name(int color, Shape shape) {
  return std::string(kColors[static_cast<std::size_t>(color)].name) + " " +
         std::string(kShapeNames[static_cast<std::size_t>(shape)]);
}

}  // namespace edadet::synth
