#pragma once

// Trainable detector network: a small two-stage convolution-free backbone
// (patch MLP at stride 8, pooled MLP at stride 16), level fusion into dense
// features in the encoder space, and the query decoder.
//
// The stride-8 stage can start from the frozen encoder's patch tokens through
// a trainable linear map initialized to identity, the toy counterpart of a
// detector backbone initialized from the vision-language model.

#include <cstdint>
#include <string>
#include <vector>

#include "edadet/autograd.hpp"
#include "edadet/dense_scoring.hpp"
#include "edadet/encoders.hpp"
#include "edadet/image.hpp"
#include "edadet/params.hpp"
#include "edadet/proposals.hpp"

namespace edadet {

struct BackboneConfig {
  int patch = 8;
  int hidden = 64;
  bool vlm_tokens = true;
  int vlm_dim = 64;  // token width of the frozen encoder backbone

  void validate() const {
    require(patch >= 2, "BackboneConfig: patch must be >= 2");
    require(hidden >= 1, "BackboneConfig: hidden must be >= 1");
    require(!vlm_tokens || vlm_dim >= 1, "BackboneConfig: vlm_dim must be >= 1");
  }
};

// (h/p * w/p) x (p*p*3) matrix of centered pixel values, one row per patch.
inline Mat patchify(const Image& im, int p) {
  require(im.height % (2 * p) == 0 && im.width % (2 * p) == 0,
          "patchify: image side must be a multiple of " + std::to_string(2 * p));
  const int gh = im.height / p, gw = im.width / p;
  Mat out(static_cast<Eigen::Index>(gh) * gw, p * p * 3);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px) {
      const Eigen::Index r = static_cast<Eigen::Index>(py) * gw + px;
      int c = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int ch = 0; ch < 3; ++ch) out(r, c++) = im.at(py * p + y, px * p + x, ch) - 0.5;
    }
  return out;
}

// 2x2 average pooling as a (h/2*w/2) x (h*w) matrix.
inline Mat avgpool2_matrix(int h, int w) {
  require(h % 2 == 0 && w % 2 == 0, "avgpool2: grid side must be even");
  const int oh = h / 2, ow = w / 2;
  Mat m = Mat::Zero(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(h) * w);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) m(y * ow + x, (2 * y + dy) * w + 2 * x + dx) = 0.25;
  return m;
}

inline void init_backbone_params(ParamStore& ps, const BackboneConfig& bb, const std::vector<int>& fuse_levels,
                                 int feature_dim, std::uint64_t seed) {
  bb.validate();
  nn::add_linear(ps, "bb.l2a", bb.patch * bb.patch * 3, bb.hidden, seed);
  nn::add_linear(ps, "bb.l2b", bb.hidden, bb.hidden, seed);
  nn::add_linear(ps, "bb.l3", bb.hidden, bb.hidden, seed);
  if (bb.vlm_tokens) {
    nn::add_linear(ps, "bb.vlm", bb.vlm_dim, bb.hidden, seed);
    if (bb.vlm_dim == bb.hidden) ps.get("bb.vlm.w") = Mat::Identity(bb.hidden, bb.hidden);
  }
  for (int l : fuse_levels) nn::add_linear(ps, "fuse.l" + std::to_string(l), bb.hidden, feature_dim, seed);
}

struct DenseFeatures {
  ag::Var values;  // cells x d
  LevelShape shape;
};

inline DenseFeatures backbone_features(ParamBinding& P, const BackboneConfig& bb, const std::vector<int>& fuse_levels,
                                       const Image& im, const FrozenImageEncoder* vlm = nullptr) {
  ag::Graph& g = P.graph();
  const int p = bb.patch;
  const LevelShape s2{im.height / p, im.width / p, p};
  const LevelShape s3{s2.h / 2, s2.w / 2, 2 * p};
  ag::Var x = g.constant(patchify(im, p));
  ag::Var l2 = ag::relu(nn::linear(P, "bb.l2b", ag::relu(nn::linear(P, "bb.l2a", x))));
  if (bb.vlm_tokens) {
    require(vlm != nullptr, "backbone_features: vlm_tokens needs the frozen image encoder");
    require(vlm->stride() == p, "backbone_features: encoder stride must equal the patch size");
    const PatchGrid t = vlm->backbone(im);
    require(t.h == s2.h && t.w == s2.w && t.dim() == bb.vlm_dim, "backbone_features: encoder token grid mismatch");
    l2 = ag::add(l2, nn::linear(P, "bb.vlm", g.constant(t.values)));
  }
  ag::Var l3 = ag::relu(nn::linear(P, "bb.l3", ag::matmul(g.constant(avgpool2_matrix(s2.h, s2.w)), l2)));
  std::vector<ag::Var> levels, ws, bs;
  std::vector<LevelShape> shapes;
  for (int l : fuse_levels) {
    levels.push_back(l == 2 ? l2 : l3);
    shapes.push_back(l == 2 ? s2 : s3);
    ws.push_back(P("fuse.l" + std::to_string(l) + ".w"));
    bs.push_back(P("fuse.l" + std::to_string(l) + ".b"));
  }
  DenseFeatures out;
  out.values = edadet::fuse_levels(levels, shapes, ws, bs, &out.shape);
  return out;
}

}  // namespace edadet
