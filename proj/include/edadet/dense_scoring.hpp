#pragma once

// Early dense alignment: per-location category probabilities from detector
// features and from the frozen encoder, their geometric fusion, and
// classification of class-agnostic proposals by top-k pooling of RoI-aligned
// scores.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "edadet/autograd.hpp"
#include "edadet/boxes.hpp"
#include "edadet/encoders.hpp"
#include "edadet/errors.hpp"
#include "edadet/vocab.hpp"

namespace edadet {

struct DenseScoreMap {
  int h = 0;
  int w = 0;
  int stride = 1;
  std::vector<std::string> category_names;
  Mat probs;  // (h*w) x C
  // Fused maps are products of powers and are not renormalized per location.
  bool fused = false;

  int num_categories() const { return static_cast<int>(probs.cols()); }
  double at(int y, int x, int c) const { return probs(y * w + x, c); }

  void validate() const {
    require(h >= 1 && w >= 1, "DenseScoreMap: empty grid");
    require(probs.rows() == static_cast<Eigen::Index>(h) * w, "DenseScoreMap: row count != h*w");
    require(static_cast<std::size_t>(probs.cols()) == category_names.size(), "DenseScoreMap: category count mismatch");
    require(probs.allFinite(), "DenseScoreMap: non-finite entries");
    require(probs.minCoeff() >= 0.0 && probs.maxCoeff() <= 1.0 + 1e-12, "DenseScoreMap: entries outside [0, 1]");
    if (!fused) {
      const Eigen::VectorXd s = probs.rowwise().sum();
      require(((s.array() - 1.0).abs() <= 1e-5).all(), "DenseScoreMap: location does not sum to 1");
    }
  }
};

struct EdaConfig {
  double tau = 0.01;
  double lam = 0.25;
  int roi_h = 14;
  int roi_w = 14;
  int k = 144;
  // Backbone stages fused for the dense features (2 -> stride 8, 3 -> stride 16).
  std::vector<int> fuse_levels{2, 3};

  int roi_area() const { return roi_h * roi_w; }

  void validate() const {
    require(tau > 0 && std::isfinite(tau), "EdaConfig: tau must be positive");
    require(lam >= 0 && lam <= 1, "EdaConfig: lam must lie in [0, 1]");
    require(roi_h >= 1 && roi_w >= 1, "EdaConfig: roi size must be positive");
    require(k >= 1 && k <= roi_area(), "EdaConfig: k must lie in [1, roi_h*roi_w]");
    require(!fuse_levels.empty(), "EdaConfig: at least one fuse level");
    for (int l : fuse_levels) require(l == 2 || l == 3, "EdaConfig: fuse levels must be 2 or 3");
  }
};

// ---- differentiable kernels ---------------------------------------------------

// softmax(cos(features, emb) / tau) per row; features (N x d), emb (C x d).
inline ag::Var dense_probs(const ag::Var& features, const ag::Var& emb, double tau) {
  require(tau > 0, "dense probabilities: tau must be positive");
  require(features.cols() == emb.cols(), "dense probabilities: feature dim " + std::to_string(features.cols()) +
                                             " != embedding dim " + std::to_string(emb.cols()));
  ag::Var cos = ag::matmul_bt(ag::l2_normalize_rows(features), ag::l2_normalize_rows(emb));
  return ag::softmax_rows(ag::scale(cos, 1.0 / tau));
}

// s_det^(1 - lam) .* s_clip^lam; s_clip is a constant of the frozen encoder.
inline ag::Var fuse_probs(const ag::Var& s_det, const Mat& s_clip, double lam) {
  require(lam >= 0 && lam <= 1, "fuse: lam must lie in [0, 1]");
  require(s_det.rows() == s_clip.rows() && s_det.cols() == s_clip.cols(), "fuse: shape mismatch");
  ag::Graph* g = s_det.graph();
  if (lam == 0.0) return s_det;
  if (lam == 1.0) return g->constant(s_clip);
  Mat clip_pow = s_clip.unaryExpr([lam](double x) { return std::pow(x, lam); });
  return ag::mul(ag::pow(s_det, 1.0 - lam), g->constant(std::move(clip_pow)));
}

// ---- plain-value API ------------------------------------------------------

inline DenseScoreMap detector_dense_probs(const PatchGrid& features, const EmbeddingMatrix& emb, double tau) {
  features.validate();
  if (!(tau > 0)) throw InvalidArgument("detector_dense_probs: tau must be positive");
  require(features.dim() == emb.dim(), "detector_dense_probs: feature dim " + std::to_string(features.dim()) +
                                           " != embedding dim " + std::to_string(emb.dim()));
  ag::Graph g(false);
  ag::Var p = dense_probs(g.constant(features.values), g.constant(emb.as_double()), tau);
  return DenseScoreMap{features.h, features.w, features.stride, emb.category_names, p.value(), false};
}

inline DenseScoreMap clip_dense_probs(const FrozenImageEncoder& enc, const Image& image, const EmbeddingMatrix& emb,
                                      double tau) {
  return detector_dense_probs(masked_dense_embeddings(enc, image), emb, tau);
}

inline DenseScoreMap fuse_score_maps(const DenseScoreMap& s_det, const DenseScoreMap& s_clip, double lam) {
  require(s_det.h == s_clip.h && s_det.w == s_clip.w && s_det.probs.cols() == s_clip.probs.cols(),
          "fuse_score_maps: shape mismatch");
  require(s_det.category_names == s_clip.category_names, "fuse_score_maps: category order mismatch");
  ag::Graph g(false);
  ag::Var s = fuse_probs(g.constant(s_det.probs), s_clip.probs, lam);
  return DenseScoreMap{s_det.h, s_det.w, s_det.stride, s_det.category_names, s.value(), true};
}

// Bilinear sampling matrix (out_h*out_w) x (h*w) for a normalized xyxy box:
// one sample at the center of each output cell, map cells centered at
// half-integer coordinates, sample positions clamped to the map border.
inline Mat roi_align_weights(int h, int w, const BoxXYXY& box, int out_h, int out_w) {
  require(h >= 1 && w >= 1, "roi_align: empty map");
  require(out_h >= 1 && out_w >= 1, "roi_align: output size must be positive");
  constexpr double tol = 1e-9;
  require(box.x1 >= -tol && box.y1 >= -tol && box.x2 <= 1 + tol && box.y2 <= 1 + tol,
          "roi_align: box outside the unit square");
  if (!(box.x2 > box.x1 && box.y2 > box.y1)) throw InvalidArgument("roi_align: degenerate box (non-positive area)");
  Mat wts = Mat::Zero(static_cast<Eigen::Index>(out_h) * out_w, static_cast<Eigen::Index>(h) * w);
  const double bx = box.x1 * w, by = box.y1 * h;
  const double bin_w = (box.x2 - box.x1) * w / out_w;
  const double bin_h = (box.y2 - box.y1) * h / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double sy = std::clamp(by + (oy + 0.5) * bin_h - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int ox = 0; ox < out_w; ++ox) {
      const double sx = std::clamp(bx + (ox + 0.5) * bin_w - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      const Eigen::Index o = static_cast<Eigen::Index>(oy) * out_w + ox;
      wts(o, y0 * w + x0) += (1 - fy) * (1 - fx);
      wts(o, y0 * w + x1) += (1 - fy) * fx;
      wts(o, y1 * w + x0) += fy * (1 - fx);
      wts(o, y1 * w + x1) += fy * fx;
    }
  }
  return wts;
}

// (out_h*out_w) x C RoI-aligned scores.
inline Mat roi_align(const DenseScoreMap& map, const BoxXYXY& box, int out_h, int out_w) {
  return roi_align_weights(map.h, map.w, box, out_h, out_w) * map.probs;
}

struct TopKMask {
  int cells = 0;
  int categories = 0;
  int k = 0;
  std::vector<std::uint8_t> mask;  // cells x categories, row-major

  bool at(int cell, int c) const { return mask[static_cast<std::size_t>(cell) * categories + c] != 0; }
};

inline TopKMask topk_mask(const Mat& roi_scores, int k) {
  require(k >= 1 && k <= roi_scores.rows(), "topk_mask: k out of range");
  TopKMask m{static_cast<int>(roi_scores.rows()), static_cast<int>(roi_scores.cols()), k,
             std::vector<std::uint8_t>(static_cast<std::size_t>(roi_scores.size()), 0)};
  const auto sel = ag::topk_rows_per_col(roi_scores, k);
  for (int c = 0; c < m.categories; ++c)
    for (auto r : sel[static_cast<std::size_t>(c)]) m.mask[static_cast<std::size_t>(r) * m.categories + c] = 1;
  return m;
}

// Per category, the mean of its k highest RoI scores.
inline Eigen::RowVectorXd topk_masked_mean(const Mat& roi_scores, int k) {
  if (k < 1 || k > roi_scores.rows()) throw InvalidArgument("topk_masked_mean: k out of range");
  ag::Graph g(false);
  return ag::topk_mean_cols(g.constant(roi_scores), k).value().row(0);
}

struct ProposalScores {
  std::vector<double> scores;  // per category, vocabulary order
  int label = -1;
  double confidence = 0.0;  // scores[label] * objectness
};

inline ProposalScores make_proposal_scores(const Eigen::RowVectorXd& s, double objectness) {
  ProposalScores ps;
  ps.scores.assign(s.data(), s.data() + s.size());
  Eigen::Index arg = 0;
  s.maxCoeff(&arg);
  ps.label = static_cast<int>(arg);
  ps.confidence = s[arg] * objectness;
  return ps;
}

// RoI-align each proposal box (clipped to the image) on the fused map and take
// the top-k mean per category.
inline std::vector<ProposalScores> classify_proposals(const DenseScoreMap& map, const std::vector<Proposal>& proposals,
                                                      const EdaConfig& cfg) {
  cfg.validate();
  std::vector<ProposalScores> out;
  out.reserve(proposals.size());
  for (const auto& p : proposals) {
    p.validate();
    const BoxXYXY b = clip_unit(to_xyxy(p.box));
    const Mat roi = roi_align(map, b, cfg.roi_h, cfg.roi_w);
    out.push_back(make_proposal_scores(topk_masked_mean(roi, cfg.k), p.objectness));
  }
  return out;
}

// ---- backbone level fusion ------------------------------------------------------

// Bilinear resampling matrix (dst_h*dst_w) x (src_h*src_w), half-pixel
// centers, border clamped.
inline Mat bilinear_resize_matrix(int src_h, int src_w, int dst_h, int dst_w) {
  require(src_h >= 1 && src_w >= 1 && dst_h >= 1 && dst_w >= 1, "bilinear_resize_matrix: empty grid");
  Mat m = Mat::Zero(static_cast<Eigen::Index>(dst_h) * dst_w, static_cast<Eigen::Index>(src_h) * src_w);
  for (int y = 0; y < dst_h; ++y) {
    const double sy = std::clamp((y + 0.5) * src_h / dst_h - 0.5, 0.0, src_h - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, src_h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < dst_w; ++x) {
      const double sx = std::clamp((x + 0.5) * src_w / dst_w - 0.5, 0.0, src_w - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, src_w - 1);
      const double fx = sx - x0;
      const Eigen::Index o = static_cast<Eigen::Index>(y) * dst_w + x;
      m(o, y0 * src_w + x0) += (1 - fy) * (1 - fx);
      m(o, y0 * src_w + x1) += (1 - fy) * fx;
      m(o, y1 * src_w + x0) += fy * (1 - fx);
      m(o, y1 * src_w + x1) += fy * fx;
    }
  }
  return m;
}

struct LevelShape {
  int h, w, stride;
};

// Projects each level with its own linear map, upsamples every level to the
// finest one (smallest stride) and averages.
inline ag::Var fuse_levels(const std::vector<ag::Var>& levels, const std::vector<LevelShape>& shapes,
                           const std::vector<ag::Var>& weights, const std::vector<ag::Var>& biases,
                           LevelShape* out_shape = nullptr) {
  if (levels.empty()) throw InvalidArgument("fuse_backbone_levels: no levels");
  require(shapes.size() == levels.size() && weights.size() == levels.size() && biases.size() == levels.size(),
          "fuse_backbone_levels: one shape, weight and bias per level");
  std::size_t finest = 0;
  for (std::size_t i = 1; i < shapes.size(); ++i)
    if (shapes[i].stride < shapes[finest].stride) finest = i;
  const LevelShape target = shapes[finest];
  ag::Graph* g = levels.front().graph();
  ag::Var acc;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    require(levels[i].rows() == static_cast<Eigen::Index>(shapes[i].h) * shapes[i].w,
            "fuse_backbone_levels: level row count != h*w");
    ag::Var proj = ag::add_row(ag::matmul(levels[i], weights[i]), biases[i]);
    if (shapes[i].h != target.h || shapes[i].w != target.w) {
      proj = ag::matmul(g->constant(bilinear_resize_matrix(shapes[i].h, shapes[i].w, target.h, target.w)), proj);
    }
    acc = acc.valid() ? ag::add(acc, proj) : proj;
  }
  if (out_shape) *out_shape = target;
  return levels.size() == 1 ? acc : ag::scale(acc, 1.0 / static_cast<double>(levels.size()));
}

struct LevelProjection {
  Mat weight;                 // d_level x d
  Eigen::RowVectorXd bias;    // 1 x d
};

inline PatchGrid fuse_backbone_levels(const std::vector<PatchGrid>& levels, const std::vector<LevelProjection>& proj) {
  if (levels.empty()) throw InvalidArgument("fuse_backbone_levels: no levels");
  require(proj.size() == levels.size(), "fuse_backbone_levels: one projection per level");
  ag::Graph g(false);
  std::vector<ag::Var> xs, ws, bs;
  std::vector<LevelShape> shapes;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    levels[i].validate();
    require(proj[i].weight.rows() == levels[i].dim(), "fuse_backbone_levels: projection input dim mismatch");
    xs.push_back(g.constant(levels[i].values));
    ws.push_back(g.constant(proj[i].weight));
    bs.push_back(g.constant(Mat(proj[i].bias)));
    shapes.push_back({levels[i].h, levels[i].w, levels[i].stride});
  }
  LevelShape out{};
  ag::Var f = fuse_levels(xs, shapes, ws, bs, &out);
  return PatchGrid{out.h, out.w, out.stride, f.value()};
}

}  // namespace edadet
