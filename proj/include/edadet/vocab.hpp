#pragma once

// Category vocabularies, prompt templates and text-embedding classifiers.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "edadet/encoders.hpp"
#include "edadet/errors.hpp"
#include "edadet/tensor_io.hpp"
#include "json.hpp"

namespace edadet {

enum class Split { base, novel };

inline std::string_view to_string(Split s) { return s == Split::base ? "base" : "novel"; }

inline Split parse_split(std::string_view s) {
  if (s == "base") return Split::base;
  if (s == "novel") return Split::novel;
  throw ConfigError("unknown split '" + std::string(s) + "' (expected base or novel)");
}

enum class SplitFilter { base, novel, all };

inline SplitFilter parse_split_filter(std::string_view s) {
  if (s == "base") return SplitFilter::base;
  if (s == "novel") return SplitFilter::novel;
  if (s == "all" || s == "target") return SplitFilter::all;
  throw ConfigError("unknown split filter '" + std::string(s) + "' (expected base, novel or all)");
}

// The 80 ImageNet prompt templates widely used with CLIP zero-shot classifiers.
inline const std::vector<std::string>& imagenet_templates() {
  static const std::vector<std::string> t = {
      "a bad photo of a {}.", "a photo of many {}.", "a sculpture of a {}.",
      "a photo of the hard to see {}.", "a low resolution photo of the {}.", "a rendering of a {}.",
      "graffiti of a {}.", "a bad photo of the {}.", "a cropped photo of the {}.", "a tattoo of a {}.",
      "the embroidered {}.", "a photo of a hard to see {}.", "a bright photo of a {}.",
      "a photo of a clean {}.", "a photo of a dirty {}.", "a dark photo of the {}.", "a drawing of a {}.",
      "a photo of my {}.", "the plastic {}.", "a photo of the cool {}.", "a close-up photo of a {}.",
      "a black and white photo of the {}.", "a painting of the {}.", "a painting of a {}.",
      "a pixelated photo of the {}.", "a sculpture of the {}.", "a bright photo of the {}.",
      "a cropped photo of a {}.", "a plastic {}.", "a photo of the dirty {}.",
      "a jpeg corrupted photo of a {}.", "a blurry photo of the {}.", "a photo of the {}.",
      "a good photo of the {}.", "a rendering of the {}.", "a {} in a video game.", "a photo of one {}.",
      "a doodle of a {}.", "a close-up photo of the {}.", "a photo of a {}.", "the origami {}.",
      "the {} in a video game.", "a sketch of a {}.", "a doodle of the {}.", "a origami {}.",
      "a low resolution photo of a {}.", "the toy {}.", "a rendition of the {}.",
      "a photo of the clean {}.", "a photo of a large {}.", "a rendition of a {}.",
      "a photo of a nice {}.", "a photo of a weird {}.", "a blurry photo of a {}.", "a cartoon {}.",
      "art of a {}.", "a sketch of the {}.", "a embroidered {}.", "a pixelated photo of a {}.",
      "itap of the {}.", "a jpeg corrupted photo of the {}.", "a good photo of a {}.", "a plushie {}.",
      "a photo of the nice {}.", "a photo of the small {}.", "a photo of the weird {}.",
      "the cartoon {}.", "art of the {}.", "a drawing of the {}.", "a photo of the large {}.",
      "a black and white photo of a {}.", "the plushie {}.", "a dark photo of a {}.", "itap of a {}.",
      "graffiti of the {}.", "a toy {}.", "itap of my {}.", "a photo of a cool {}.",
      "a photo of a small {}.", "a tattoo of the {}.",
  };
  return t;
}

inline std::size_t count_placeholders(std::string_view t) {
  std::size_t n = 0;
  for (auto pos = t.find("{}"); pos != std::string_view::npos; pos = t.find("{}", pos + 2)) ++n;
  return n;
}

inline std::string fill_template(std::string_view t, std::string_view name) {
  const auto pos = t.find("{}");
  require(pos != std::string_view::npos, "template has no placeholder: " + std::string(t));
  std::string out(t.substr(0, pos));
  out += name;
  out += t.substr(pos + 2);
  return out;
}

struct Category {
  std::string name;
  Split split = Split::base;
};

class CategoryVocabulary {
 public:
  CategoryVocabulary() = default;
  CategoryVocabulary(std::vector<Category> categories, std::vector<std::string> templates)
      : categories_(std::move(categories)), templates_(std::move(templates)) {
    validate();
  }

  const std::vector<Category>& categories() const { return categories_; }
  const std::vector<std::string>& templates() const { return templates_; }
  std::size_t size() const { return categories_.size(); }

  std::vector<std::string> names(SplitFilter f = SplitFilter::all) const {
    std::vector<std::string> out;
    for (const auto& c : categories_)
      if (matches(c, f)) out.push_back(c.name);
    return out;
  }

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(categories_.begin(), categories_.end(), [s](const Category& c) { return c.split == s; }));
  }

  const Category* find(std::string_view name) const {
    for (const auto& c : categories_)
      if (c.name == name) return &c;
    return nullptr;
  }

  bool is_novel(std::string_view name) const {
    const auto* c = find(name);
    return c != nullptr && c->split == Split::novel;
  }

  static bool matches(const Category& c, SplitFilter f) {
    return f == SplitFilter::all || (f == SplitFilter::base && c.split == Split::base) ||
           (f == SplitFilter::novel && c.split == Split::novel);
  }

 private:
  void validate() const {
    std::set<std::string> seen;
    for (const auto& c : categories_) {
      if (c.name.empty()) throw ConfigError("vocabulary: empty category name");
      if (c.name.find('\n') != std::string::npos) throw ConfigError("vocabulary: category name contains newline");
      if (!seen.insert(c.name).second) throw ConfigError("vocabulary: duplicate category name '" + c.name + "'");
    }
    if (templates_.empty()) throw ConfigError("vocabulary: at least one prompt template is required");
    for (const auto& t : templates_) {
      if (count_placeholders(t) != 1)
        throw ConfigError("vocabulary: template must contain exactly one {} placeholder: '" + t + "'");
    }
    if (count(Split::base) == 0) throw ConfigError("vocabulary: base split is empty");
  }

  std::vector<Category> categories_;
  std::vector<std::string> templates_;
};

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("JSON parse error in " + path.string() + ": " + e.what());
  }
}

inline CategoryVocabulary vocabulary_from_json(const nlohmann::json& j) {
  try {
    std::vector<Category> cats;
    for (const auto& c : j.at("categories")) cats.push_back({c.at("name").get<std::string>(), parse_split(c.at("split").get<std::string>())});
    auto templates = j.at("templates").get<std::vector<std::string>>();
    return CategoryVocabulary(std::move(cats), std::move(templates));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("vocabulary: ") + e.what());
  }
}

// Vocabulary file: {"categories": [{"name", "split"}], "templates": ["... {} ..."]}.
inline CategoryVocabulary build_vocabulary(const std::filesystem::path& spec_file) {
  return vocabulary_from_json(read_json_file(spec_file));
}

inline nlohmann::json vocabulary_to_json(const CategoryVocabulary& v) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : v.categories()) cats.push_back({{"name", c.name}, {"split", std::string(to_string(c.split))}});
  return {{"categories", cats}, {"templates", v.templates()}};
}

// Keeps the order of `all_names`; names listed in neither split are dropped.
// Split file: {"base": [names], "novel": [names]}.
inline CategoryVocabulary vocabulary_from_split(const std::vector<std::string>& all_names,
                                                const nlohmann::json& split_file,
                                                std::vector<std::string> templates = imagenet_templates()) {
  std::set<std::string> base, novel;
  try {
    for (const auto& n : split_file.at("base")) base.insert(n.get<std::string>());
    for (const auto& n : split_file.at("novel")) novel.insert(n.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("split file: ") + e.what());
  }
  std::vector<Category> cats;
  for (const auto& n : all_names) {
    if (base.count(n) && novel.count(n)) throw ConfigError("split file lists '" + n + "' as both base and novel");
    if (base.count(n)) cats.push_back({n, Split::base});
    else if (novel.count(n)) cats.push_back({n, Split::novel});
  }
  return CategoryVocabulary(std::move(cats), std::move(templates));
}

// ---- embedding matrices ---------------------------------------------------

struct EmbeddingMatrix {
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows;
  std::vector<std::string> category_names;

  int size() const { return static_cast<int>(rows.rows()); }
  int dim() const { return static_cast<int>(rows.cols()); }

  Mat as_double() const { return rows.cast<double>(); }

  void validate() const {
    require(dim() > 0, "EmbeddingMatrix: dimension must be positive");
    require(static_cast<std::size_t>(size()) == category_names.size(), "EmbeddingMatrix: row/name count mismatch");
    for (int i = 0; i < size(); ++i) {
      const double n = rows.row(i).cast<double>().norm();
      require(std::abs(n - 1.0) <= 1e-5, "EmbeddingMatrix: row '" + category_names[static_cast<std::size_t>(i)] +
                                             "' is not unit norm (" + std::to_string(n) + ")");
    }
  }

  // Rows whose names appear in `names`, in that order.
  EmbeddingMatrix subset(const std::vector<std::string>& names) const {
    EmbeddingMatrix out;
    out.rows.resize(static_cast<Eigen::Index>(names.size()), dim());
    for (std::size_t i = 0; i < names.size(); ++i) {
      auto it = std::find(category_names.begin(), category_names.end(), names[i]);
      require(it != category_names.end(), "EmbeddingMatrix: unknown category '" + names[i] + "'");
      out.rows.row(static_cast<Eigen::Index>(i)) = rows.row(it - category_names.begin());
    }
    out.category_names = names;
    return out;
  }
};

// Per category: encode every filled template, normalize each, average, re-normalize.
inline EmbeddingMatrix ensemble_prompt_embeddings(const CategoryVocabulary& vocab, const TextEncoder& encoder,
                                                  SplitFilter subset) {
  const auto names = vocab.names(subset);
  require(!names.empty(), "ensemble_prompt_embeddings: selected subset is empty");
  const int d = encoder.dim();
  EmbeddingMatrix m;
  m.rows.resize(static_cast<Eigen::Index>(names.size()), d);
  m.category_names = names;
  for (std::size_t i = 0; i < names.size(); ++i) {
    Vec acc = Vec::Zero(d);
    for (const auto& t : vocab.templates()) {
      Vec e = encoder.encode(fill_template(t, names[i]));
      require(e.size() == d, "text encoder returned a vector of the wrong dimension");
      const double n = e.norm();
      if (!(n > 0.0) || !e.allFinite()) throw NumericError("text encoder returned a degenerate vector for '" + names[i] + "'");
      acc += e / n;
    }
    acc /= static_cast<double>(vocab.templates().size());
    const double n = acc.norm();
    if (n < 1e-8) throw NumericError("prompt ensemble for '" + names[i] + "' averages to the zero vector");
    m.rows.row(static_cast<Eigen::Index>(i)) = (acc / n).cast<float>().transpose();
  }
  return m;
}

// Embedding file: "EDAEMB v1 <rows> <cols>\n", one line per category name,
// then row-major little-endian float32 payload.
inline void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  require(static_cast<std::size_t>(m.size()) == m.category_names.size(), "save_embeddings: row/name count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "EDAEMB v1 " << m.size() << " " << m.dim() << "\n";
  for (const auto& n : m.category_names) {
    require(n.find('\n') == std::string::npos, "save_embeddings: category name contains newline");
    os << n << "\n";
  }
  detail::write_f32(os, m.rows.data(), static_cast<std::size_t>(m.rows.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty embedding file: " + path.string());
  std::istringstream hs(line);
  std::string magic, version, extra;
  long long rows = -1, cols = -1;
  hs >> magic >> version >> rows >> cols;
  if (!hs || magic != "EDAEMB" || version != "v1" || rows < 0 || cols <= 0 || (hs >> extra))
    throw IoError("malformed embedding header in " + path.string() + ": '" + line + "'");
  EmbeddingMatrix m;
  for (long long i = 0; i < rows; ++i) {
    if (!std::getline(is, line)) throw IoError("embedding file " + path.string() + ": missing category name lines");
    m.category_names.push_back(line);
  }
  m.rows.resize(rows, cols);
  const auto bytes = static_cast<std::streamsize>(rows * cols * static_cast<long long>(sizeof(float)));
  is.read(reinterpret_cast<char*>(m.rows.data()), bytes);
  if (is.gcount() != bytes) throw IoError("embedding file " + path.string() + ": payload shorter than header declares");
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("embedding file " + path.string() + ": payload longer than header declares");
  if (!m.rows.allFinite()) throw IoError("embedding file " + path.string() + ": non-finite values");
  return m;
}

}  // namespace edadet
