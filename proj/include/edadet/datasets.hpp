#pragma once

// COCO-format annotation loading with base/novel filtering, the synthetic
// attribute-shapes dataset, and seeded batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "edadet/boxes.hpp"
#include "edadet/encoders.hpp"
#include "edadet/errors.hpp"
#include "edadet/image.hpp"
#include "edadet/image_io.hpp"
#include "edadet/synth_attributes.hpp"
#include "edadet/vocab.hpp"
#include "json.hpp"

namespace edadet {

struct BoxAnnotation {
  std::string category;
  BoxXYXY box;  // normalized
};

struct ImageSample {
  std::int64_t image_id = 0;
  Image pixels;                // empty until loaded for file-backed samples
  std::filesystem::path file;  // empty for in-memory samples
  int orig_width = 0;
  int orig_height = 0;
  std::vector<BoxAnnotation> annotations;

  void validate() const {
    if (!pixels.empty()) require(pixels.height >= 8 && pixels.width >= 8, "ImageSample: image smaller than 8x8");
    for (const auto& a : annotations) {
      require(a.box.x1 < a.box.x2 && a.box.y1 < a.box.y2, "ImageSample: degenerate annotation box");
      require(a.box.x1 >= 0 && a.box.y1 >= 0 && a.box.x2 <= 1 && a.box.y2 <= 1,
              "ImageSample: annotation box outside the image");
    }
  }
};

enum class SplitMode { train_base_only, eval_all };

inline SplitMode parse_split_mode(std::string_view s) {
  if (s == "train_base_only") return SplitMode::train_base_only;
  if (s == "eval_all") return SplitMode::eval_all;
  throw ConfigError("unknown split mode '" + std::string(s) + "'");
}

struct Dataset {
  std::vector<std::string> categories;  // every category that may appear in annotations
  std::vector<ImageSample> samples;
  int image_size = 128;                 // square side samples are resized to

  std::size_t size() const { return samples.size(); }
  std::size_t annotation_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.annotations.size();
    return n;
  }
};

// Square-resized pixels of a sample; reads the file when not held in memory.
inline Image sample_image(const ImageSample& s, int side) {
  Image im = s.pixels.empty() ? read_image(s.file) : s.pixels;
  if (im.height != side || im.width != side) im = resize_bilinear(im, side, side);
  return im;
}

// COCO-JSON: images/annotations/categories, boxes as [x, y, w, h] pixels.
// Crowd annotations are skipped. Unlisted categories are dropped, or rejected
// when strict.
inline Dataset load_coco_annotations(const std::filesystem::path& json_path, const CategoryVocabulary& vocab,
                                     SplitMode mode, const std::filesystem::path& image_dir = {},
                                     bool strict = false, int image_size = 128) {
  const nlohmann::json j = read_json_file(json_path);
  Dataset ds;
  ds.image_size = image_size;
  try {
    std::map<std::int64_t, std::string> cat_names;
    for (const auto& c : j.at("categories")) cat_names[c.at("id").get<std::int64_t>()] = c.at("name").get<std::string>();
    std::map<std::int64_t, std::size_t> index;
    for (const auto& im : j.at("images")) {
      ImageSample s;
      s.image_id = im.at("id").get<std::int64_t>();
      s.orig_width = im.at("width").get<int>();
      s.orig_height = im.at("height").get<int>();
      if (s.orig_width <= 0 || s.orig_height <= 0) throw ConfigError("COCO image with non-positive size");
      s.file = image_dir / im.at("file_name").get<std::string>();
      if (!index.emplace(s.image_id, ds.samples.size()).second)
        throw ConfigError("COCO: duplicate image id " + std::to_string(s.image_id));
      ds.samples.push_back(std::move(s));
    }
    for (const auto& a : j.at("annotations")) {
      if (a.value("iscrowd", 0) != 0) continue;
      const auto cid = a.at("category_id").get<std::int64_t>();
      auto cn = cat_names.find(cid);
      if (cn == cat_names.end()) throw ConfigError("COCO: annotation references unknown category id " + std::to_string(cid));
      const Category* cat = vocab.find(cn->second);
      if (!cat) {
        if (strict) throw ConfigError("COCO: category '" + cn->second + "' is not in the vocabulary");
        continue;
      }
      if (mode == SplitMode::train_base_only && cat->split == Split::novel) continue;
      auto it = index.find(a.at("image_id").get<std::int64_t>());
      if (it == index.end()) throw ConfigError("COCO: annotation references unknown image id");
      auto& s = ds.samples[it->second];
      const auto b = a.at("bbox").get<std::vector<double>>();
      if (b.size() != 4) throw ConfigError("COCO: bbox must have 4 numbers");
      BoxXYXY nb = clip_unit({b[0] / s.orig_width, b[1] / s.orig_height, (b[0] + b[2]) / s.orig_width,
                              (b[1] + b[3]) / s.orig_height});
      if (!(nb.x2 > nb.x1 && nb.y2 > nb.y1)) continue;
      s.annotations.push_back({cat->name, nb});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("COCO annotations " + json_path.string() + ": " + e.what());
  }
  if (mode == SplitMode::train_base_only) {
    std::erase_if(ds.samples, [](const ImageSample& s) { return s.annotations.empty(); });
    ds.categories = vocab.names(SplitFilter::base);
  } else {
    ds.categories = vocab.names(SplitFilter::all);
  }
  return ds;
}

// ---- synthetic shapes --------------------------------------------------------

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_images = 100;
  int image_size = 128;
  std::vector<std::string> base_cats;
  std::vector<std::string> novel_cats;
  // Train splits draw from base categories only; eval splits from base + novel.
  bool eval_split = false;
  int min_objects = 1;
  int max_objects = 4;
  double min_side = 0.22;  // object side as a fraction of the image side
  double max_side = 0.40;
};

inline std::vector<std::string> default_synth_base() {
  return {"red circle",  "red square",    "green circle", "green triangle", "blue square",
          "blue triangle", "yellow circle", "yellow square", "yellow triangle"};
}

inline std::vector<std::string> default_synth_novel() { return {"red triangle", "green square", "blue circle"}; }

namespace detail {

inline bool shape_covers(synth::Shape s, double u, double v) {
  // (u, v) in [0, 1]^2 relative to the object box, v downwards
  switch (s) {
    case synth::Shape::circle:
      return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case synth::Shape::square:
      return true;
    case synth::Shape::triangle:
      return std::abs(u - 0.5) <= 0.5 * v;
  }
  return false;
}

}  // namespace detail

// Renders one sample; the box is the tight bound of the painted pixels.
inline ImageSample render_synth_sample(std::uint64_t seed, std::int64_t image_id, const SynthOptions& opt,
                                       const std::vector<std::string>& pool) {
  std::mt19937_64 rng(detail::fnv1a("synth/" + std::to_string(image_id), seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = opt.image_size;
  ImageSample s;
  s.image_id = image_id;
  s.orig_width = s.orig_height = n;
  s.pixels = Image(n, n);
  for (auto& p : s.pixels.pixels)
    p = synth::kBackgroundLevel + static_cast<float>((2 * unit(rng) - 1) * synth::kBackgroundJitter);

  const int want = std::uniform_int_distribution<int>(opt.min_objects, opt.max_objects)(rng);
  std::vector<std::array<int, 4>> placed;  // x0, y0, x1, y1 pixel bounds (exclusive end)
  for (int attempt = 0; attempt < 200 && static_cast<int>(placed.size()) < want; ++attempt) {
    const int side = static_cast<int>(std::lround((opt.min_side + unit(rng) * (opt.max_side - opt.min_side)) * n));
    const int x0 = std::uniform_int_distribution<int>(0, n - side)(rng);
    const int y0 = std::uniform_int_distribution<int>(0, n - side)(rng);
    const std::array<int, 4> r{x0, y0, x0 + side, y0 + side};
    const int gap = 2;
    const bool overlaps = std::any_of(placed.begin(), placed.end(), [&](const auto& q) {
      return r[0] < q[2] + gap && q[0] < r[2] + gap && r[1] < q[3] + gap && q[1] < r[3] + gap;
    });
    const std::string& name = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    if (overlaps) continue;
    const auto attr = synth::parse_category(name);
    const auto& rgb = synth::kColors[static_cast<std::size_t>(attr->color)].rgb;
    int bx0 = n, by0 = n, bx1 = -1, by1 = -1;
    for (int y = r[1]; y < r[3]; ++y) {
      for (int x = r[0]; x < r[2]; ++x) {
        const double u = (x + 0.5 - r[0]) / side, v = (y + 0.5 - r[1]) / side;
        if (!detail::shape_covers(attr->shape, u, v)) continue;
        const float level = synth::kTextureLow + (synth::texture_on(attr->shape, x, y) ? 1.0f - synth::kTextureLow : 0.0f);
        for (int c = 0; c < 3; ++c) s.pixels.at(y, x, c) = rgb[static_cast<std::size_t>(c)] * level;
        bx0 = std::min(bx0, x);
        by0 = std::min(by0, y);
        bx1 = std::max(bx1, x);
        by1 = std::max(by1, y);
      }
    }
    placed.push_back(r);
    s.annotations.push_back({name, {static_cast<double>(bx0) / n, static_cast<double>(by0) / n,
                                    static_cast<double>(bx1 + 1) / n, static_cast<double>(by1 + 1) / n}});
  }
  return s;
}

inline Dataset synth_shapes(const SynthOptions& opt) {
  require(opt.n_images >= 0, "synth_shapes: n_images must be >= 0");
  require(opt.image_size >= 16, "synth_shapes: image_size must be >= 16");
  require(opt.min_objects >= 1 && opt.max_objects >= opt.min_objects, "synth_shapes: invalid object count range");
  require(opt.min_side > 0 && opt.max_side >= opt.min_side && opt.max_side <= 0.5,
          "synth_shapes: object side fractions must satisfy 0 < min <= max <= 0.5");
  require(!opt.base_cats.empty(), "synth_shapes: base categories required");
  for (const auto* list : {&opt.base_cats, &opt.novel_cats})
    for (const auto& c : *list)
      if (!synth::parse_category(c)) throw ConfigError("synth_shapes: renderer cannot draw category '" + c + "'");
  for (const auto& c : opt.novel_cats)
    if (std::find(opt.base_cats.begin(), opt.base_cats.end(), c) != opt.base_cats.end())
      throw ConfigError("synth_shapes: '" + c + "' is both base and novel");

  Dataset ds;
  ds.image_size = opt.image_size;
  ds.categories = opt.base_cats;
  if (opt.eval_split) ds.categories.insert(ds.categories.end(), opt.novel_cats.begin(), opt.novel_cats.end());
  const std::uint64_t split_seed = detail::fnv1a(opt.eval_split ? "eval" : "train", opt.seed);
  for (int i = 0; i < opt.n_images; ++i) ds.samples.push_back(render_synth_sample(split_seed, i, opt, ds.categories));
  return ds;
}

// ---- batching -------------------------------------------------------------------

inline ImageSample flip_sample(const ImageSample& s) {
  ImageSample out = s;
  out.pixels = flip_horizontal(s.pixels);
  for (auto& a : out.annotations) a.box = flip_box_horizontal(a.box);
  return out;
}

using Batch = std::vector<ImageSample>;

// Endless stream of batches. Each epoch is a seeded permutation of the whole
// dataset cut into consecutive batches (the last one may be short).
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, int batch_size, std::uint64_t seed, bool augment)
      : ds_(ds), batch_size_(batch_size), seed_(seed), augment_(augment) {
    if (batch_size < 1) throw InvalidArgument("batch_iterator: batch_size must be >= 1");
    require(!ds.samples.empty(), "batch_iterator: empty dataset");
  }

  std::vector<std::vector<std::size_t>> epoch_indices(std::int64_t epoch) const {
    std::vector<std::size_t> order(ds_.samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(detail::fnv1a("epoch/" + std::to_string(epoch), seed_));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size_))
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size_)));
    return out;
  }

  Batch next() {
    if (pos_ >= current_.size()) {
      current_ = epoch_indices(epoch_++);
      pos_ = 0;
    }
    const auto& idx = current_[pos_];
    std::mt19937_64 flip_rng(detail::fnv1a("flip/" + std::to_string(epoch_) + "/" + std::to_string(pos_), seed_));
    ++pos_;
    Batch b;
    for (auto i : idx) {
      ImageSample s = ds_.samples[i];
      s.pixels = sample_image(s, ds_.image_size);
      if (augment_ && (flip_rng() & 1u)) s = flip_sample(s);
      b.push_back(std::move(s));
    }
    return b;
  }

  std::int64_t epoch() const { return epoch_; }

 private:
  const Dataset& ds_;
  int batch_size_;
  std::uint64_t seed_;
  bool augment_;
  std::int64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::vector<std::size_t>> current_;
};

}  // namespace edadet
