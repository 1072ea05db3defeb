#pragma once

// Frozen vision-language encoder interfaces plus a deterministic stub pair
// whose text and image semantics share one space by construction.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "edadet/autograd.hpp"
#include "edadet/errors.hpp"
#include "edadet/image.hpp"
#include "edadet/synth_attributes.hpp"

namespace edadet {

using ag::Mat;
using Vec = Eigen::VectorXd;

// h x w grid of d-vectors, stored as (h*w) x d rows in row-major cell order.
struct PatchGrid {
  int h = 0;
  int w = 0;
  int stride = 1;
  Mat values;

  int dim() const { return static_cast<int>(values.cols()); }
  int cells() const { return h * w; }
  auto cell(int y, int x) const { return values.row(y * w + x); }
  auto cell(int y, int x) { return values.row(y * w + x); }

  void validate() const {
    require(h >= 1 && w >= 1, "PatchGrid: grid must be at least 1x1");
    require(stride >= 1, "PatchGrid: stride must be >= 1");
    require(values.rows() == static_cast<Eigen::Index>(h) * w, "PatchGrid: row count != h*w");
    require(values.allFinite(), "PatchGrid: non-finite values");
  }
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int dim() const = 0;
  virtual Vec encode(std::string_view text) const = 0;
};

class FrozenImageEncoder {
 public:
  virtual ~FrozenImageEncoder() = default;
  virtual int dim() const = 0;
  virtual int stride() const = 0;
  // Patch tokens before the pooling layer.
  virtual PatchGrid backbone(const Image& image) const = 0;
  // Global attention pooling; returns the class-token output.
  virtual Vec pool_global(const PatchGrid& tokens) const = 0;
  // Pooling with a diagonal attention mask: every output cell depends on its own token only.
  virtual PatchGrid pool_masked(const PatchGrid& tokens) const = 0;

  Vec pooled_class_token(const Image& image) const { return pool_global(backbone(image)); }
  PatchGrid masked_patch_embeddings(const Image& image) const { return pool_masked(backbone(image)); }
};

// Single-head attention pooling layer. The class token is the mean of the
// patch tokens; it queries [cls; patches]. Under the diagonal mask a patch
// only sees itself (and optionally the class token), so softmax over a single
// key is 1 and the output reduces to the value path followed by the output
// projection.
class AttentionPool {
 public:
  AttentionPool() = default;
  AttentionPool(Mat wq, Mat wk, Mat wv, Mat wo, bool include_cls_in_masked_pass = false)
      : wq_(std::move(wq)), wk_(std::move(wk)), wv_(std::move(wv)), wo_(std::move(wo)),
        include_cls_(include_cls_in_masked_pass) {
    require(wq_.rows() == wk_.rows() && wq_.cols() == wk_.cols(), "AttentionPool: query/key shape mismatch");
    require(wv_.rows() == wq_.rows(), "AttentionPool: value projection input dim mismatch");
    require(wo_.rows() == wv_.cols(), "AttentionPool: output projection input dim mismatch");
  }

  int in_dim() const { return static_cast<int>(wv_.rows()); }
  int out_dim() const { return static_cast<int>(wo_.cols()); }
  bool include_cls() const { return include_cls_; }

  Vec global(const PatchGrid& tokens) const {
    check(tokens);
    const Eigen::Index n = tokens.values.rows();
    Mat seq(n + 1, tokens.dim());
    seq.row(0) = tokens.values.colwise().mean();
    seq.bottomRows(n) = tokens.values;
    const Eigen::RowVectorXd q = seq.row(0) * wq_;
    const Mat k = seq * wk_;
    Eigen::RowVectorXd logits = (k * q.transpose()).transpose() / std::sqrt(static_cast<double>(wq_.cols()));
    logits.array() -= logits.maxCoeff();
    Eigen::RowVectorXd a = logits.array().exp();
    a /= a.sum();
    const Eigen::RowVectorXd pooled = a * seq;
    return ((pooled * wv_) * wo_).transpose();
  }

  PatchGrid masked(const PatchGrid& tokens) const {
    check(tokens);
    PatchGrid out{tokens.h, tokens.w, tokens.stride, Mat()};
    Mat mixed = tokens.values;
    if (include_cls_) {
      const Eigen::RowVectorXd cls = tokens.values.colwise().mean();
      const Eigen::RowVectorXd kc = cls * wk_;
      const double scale = 1.0 / std::sqrt(static_cast<double>(wq_.cols()));
      for (Eigen::Index i = 0; i < mixed.rows(); ++i) {
        const Eigen::RowVectorXd q = tokens.values.row(i) * wq_;
        const double self = q.dot(tokens.values.row(i) * wk_) * scale;
        const double other = q.dot(kc) * scale;
        const double m = std::max(self, other);
        const double es = std::exp(self - m), eo = std::exp(other - m);
        mixed.row(i) = (es * tokens.values.row(i) + eo * cls) / (es + eo);
      }
    }
    out.values = (mixed * wv_) * wo_;
    return out;
  }

 private:
  void check(const PatchGrid& tokens) const {
    tokens.validate();
    require(tokens.dim() == in_dim(), "AttentionPool: token dim " + std::to_string(tokens.dim()) +
                                          " != pooling input dim " + std::to_string(in_dim()));
  }

  Mat wq_, wk_, wv_, wo_;
  bool include_cls_ = false;
};

// ---- stub pair --------------------------------------------------------------

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline Vec gaussian_vector(std::uint64_t seed, int dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec v(dim);
  for (int i = 0; i < dim; ++i) v[i] = nd(rng);
  return v;
}

inline std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalpha(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline bool is_attribute_word(std::string_view w) {
  if (w == "background") return true;
  for (const auto& c : synth::kColors)
    if (c.name == w) return true;
  for (const auto& s : synth::kShapeNames)
    if (s == w) return true;
  return false;
}

}  // namespace detail

// Fixed unit vector for a word, shared by the stub text and image encoders.
inline Vec stub_word_vector(std::uint64_t seed, int dim, std::string_view word) {
  Vec v = detail::gaussian_vector(detail::fnv1a(word, seed), dim);
  return v / v.norm();
}

struct StubEncoderOptions {
  std::uint64_t seed = 0;
  int dim = 64;
  double noise = 0.05;
  // Weight of non-attribute words ("a", "photo", ...) in the text embedding.
  double filler_weight = 0.15;
  bool identity_projections = false;
  bool include_cls_in_masked_pass = false;
};

class StubTextEncoder final : public TextEncoder {
 public:
  explicit StubTextEncoder(StubEncoderOptions opt) : opt_(opt) {
    require(opt_.dim >= 4, "stub encoder: dim must be >= 4");
  }

  int dim() const override { return opt_.dim; }

  Vec encode(std::string_view text) const override {
    Vec v = Vec::Zero(opt_.dim);
    for (const auto& w : detail::words_of(text)) {
      const double weight = detail::is_attribute_word(w) ? 1.0 : opt_.filler_weight;
      v += weight * stub_word_vector(opt_.seed, opt_.dim, w);
    }
    const double n = v.norm();
    require(n > 0.0, "stub text encoder: text has no words: '" + std::string(text) + "'");
    return v / n;
  }

 private:
  StubEncoderOptions opt_;
};

// Reads color and texture of each 8x8 patch analytically and emits the sum of
// the matching attribute word vectors (mixed with a background vector by the
// foreground fraction) plus fixed per-position noise. Tokens are rotated by a
// seeded orthogonal matrix that the value projection undoes.
class StubImageEncoder final : public FrozenImageEncoder {
 public:
  static constexpr int kStride = 8;

  explicit StubImageEncoder(StubEncoderOptions opt) : opt_(opt) {
    require(opt_.dim >= 4, "stub encoder: dim must be >= 4");
    const int d = opt_.dim;
    Mat rot = Mat::Identity(d, d);
    if (!opt_.identity_projections) {
      Mat gauss(d, d);
      std::mt19937_64 rng(detail::fnv1a("rotation", opt_.seed));
      std::normal_distribution<double> nd(0.0, 1.0);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) gauss(i, j) = nd(rng);
      Eigen::HouseholderQR<Mat> qr(gauss);
      rot = qr.householderQ() * Mat::Identity(d, d);
    }
    rotation_ = rot;
    pool_ = AttentionPool(Mat::Identity(d, d), Mat::Identity(d, d), rot.transpose(), Mat::Identity(d, d),
                          opt_.include_cls_in_masked_pass);
    background_ = stub_word_vector(opt_.seed, d, "background");
    for (const auto& c : synth::kColors) colors_.push_back(stub_word_vector(opt_.seed, d, c.name));
    for (const auto& s : synth::kShapeNames) shapes_.push_back(stub_word_vector(opt_.seed, d, s));
    noise_table_.resize(kNoiseTable * kNoiseTable, d);
    for (int y = 0; y < kNoiseTable; ++y)
      for (int x = 0; x < kNoiseTable; ++x) noise_table_.row(y * kNoiseTable + x) = compute_noise(y, x).transpose();
  }

  int dim() const override { return opt_.dim; }
  int stride() const override { return kStride; }
  const AttentionPool& pool() const { return pool_; }

  PatchGrid backbone(const Image& image) const override {
    require(image.height >= kStride && image.width >= kStride, "stub image encoder: image smaller than one patch");
    PatchGrid g{image.height / kStride, image.width / kStride, kStride, Mat()};
    g.values.resize(g.cells(), opt_.dim);
    for (int py = 0; py < g.h; ++py) {
      for (int px = 0; px < g.w; ++px) {
        Vec sem = patch_semantics(image, py, px);
        sem += position_noise(py, px);
        g.cell(py, px) = sem.transpose() * rotation_;
      }
    }
    return g;
  }

  Vec pool_global(const PatchGrid& tokens) const override { return pool_.global(tokens); }
  PatchGrid pool_masked(const PatchGrid& tokens) const override { return pool_.masked(tokens); }

  // Noise-free semantic vector of one patch (before rotation).
  Vec patch_semantics(const Image& im, int py, int px) const {
    constexpr float kFg = 0.3f;
    int n_fg = 0;
    double rgb[3] = {0, 0, 0};
    auto lum = [&](int y, int x) { return (im.at(y, x, 0) + im.at(y, x, 1) + im.at(y, x, 2)) / 3.0; };
    auto fg = [&](int y, int x) {
      return std::max({im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2)}) > kFg;
    };
    const int y0 = py * kStride, x0 = px * kStride;
    for (int y = y0; y < y0 + kStride; ++y) {
      for (int x = x0; x < x0 + kStride; ++x) {
        if (!fg(y, x)) continue;
        ++n_fg;
        for (int c = 0; c < 3; ++c) rgb[c] += im.at(y, x, c);
      }
    }
    if (n_fg == 0) return background_;
    const double frac = static_cast<double>(n_fg) / (kStride * kStride);

    const double peak = std::max({rgb[0], rgb[1], rgb[2]});
    Eigen::Vector3d chroma(rgb[0] / peak, rgb[1] / peak, rgb[2] / peak);
    std::vector<double> wc;
    for (const auto& c : synth::kColors) {
      const double cp = std::max({c.rgb[0], c.rgb[1], c.rgb[2]});
      Eigen::Vector3d ref(c.rgb[0] / cp, c.rgb[1] / cp, c.rgb[2] / cp);
      wc.push_back(std::exp(-(chroma - ref).squaredNorm() / 0.02));
    }

    double dx = 0, dy = 0;
    for (int y = y0; y < y0 + kStride; ++y) {
      for (int x = x0; x < x0 + kStride; ++x) {
        if (!fg(y, x)) continue;
        if (x + 1 < x0 + kStride && fg(y, x + 1)) dx += std::abs(lum(y, x + 1) - lum(y, x));
        if (y + 1 < y0 + kStride && fg(y + 1, x)) dy += std::abs(lum(y + 1, x) - lum(y, x));
      }
    }
    std::vector<double> ws(3, 1.0);
    if (dx + dy > 0.05) {
      const double r = dx / (dx + dy);
      ws = {std::exp(-r * r / 0.02), std::exp(-(r - 1) * (r - 1) / 0.02), std::exp(-(r - 0.5) * (r - 0.5) / 0.02)};
    }

    Vec obj = Vec::Zero(opt_.dim);
    const double sc = std::accumulate(wc.begin(), wc.end(), 0.0);
    const double ss = std::accumulate(ws.begin(), ws.end(), 0.0);
    for (std::size_t i = 0; i < colors_.size(); ++i) obj += (sc > 0 ? wc[i] / sc : 0.25) * colors_[i];
    for (std::size_t i = 0; i < shapes_.size(); ++i) obj += (ws[i] / ss) * shapes_[i];
    obj /= obj.norm();
    return frac * obj + (1.0 - frac) * background_;
  }

 private:
  static constexpr int kNoiseTable = 32;

  Vec position_noise(int py, int px) const {
    if (py < kNoiseTable && px < kNoiseTable) return noise_table_.row(py * kNoiseTable + px).transpose();
    return compute_noise(py, px);
  }

  Vec compute_noise(int py, int px) const {
    const std::string key = "noise/" + std::to_string(py) + "/" + std::to_string(px);
    return detail::gaussian_vector(detail::fnv1a(key, opt_.seed), opt_.dim) * (opt_.noise / std::sqrt(opt_.dim));
  }

  StubEncoderOptions opt_;
  Mat rotation_;
  AttentionPool pool_;
  Vec background_;
  std::vector<Vec> colors_;
  std::vector<Vec> shapes_;
  Mat noise_table_;
};

struct EncoderPair {
  std::shared_ptr<const TextEncoder> text;
  std::shared_ptr<const FrozenImageEncoder> image;
};

inline EncoderPair stub_encoder_pair(std::uint64_t seed, int dim) {
  StubEncoderOptions opt;
  opt.seed = seed;
  opt.dim = dim;
  return {std::make_shared<StubTextEncoder>(opt), std::make_shared<StubImageEncoder>(opt)};
}

inline EncoderPair stub_encoder_pair(const StubEncoderOptions& opt) {
  return {std::make_shared<StubTextEncoder>(opt), std::make_shared<StubImageEncoder>(opt)};
}

// ---- operations ---------------------------------------------------------

inline double cosine(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), "cosine: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  require(na > 0 && nb > 0, "cosine: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// Cosine between the pooled class-token feature and a text embedding.
inline double clip_similarity(const FrozenImageEncoder& enc, const Image& image, const Vec& text_emb) {
  require(text_emb.size() == enc.dim(), "clip_similarity: text embedding dim " + std::to_string(text_emb.size()) +
                                            " != encoder dim " + std::to_string(enc.dim()));
  return cosine(enc.pooled_class_token(image), text_emb);
}

inline PatchGrid masked_dense_embeddings(const FrozenImageEncoder& enc, const Image& image) {
  return enc.masked_patch_embeddings(image);
}

}  // namespace edadet
