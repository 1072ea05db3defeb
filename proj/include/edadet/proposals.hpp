#pragma once

// Class-agnostic query-based proposal generation: a plain multi-head
// attention encoder-decoder over dense features, per-query objectness and box
// regression, set matching and the box loss.

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "edadet/autograd.hpp"
#include "edadet/boxes.hpp"
#include "edadet/dense_scoring.hpp"
#include "edadet/encoders.hpp"
#include "edadet/matching.hpp"
#include "edadet/params.hpp"

namespace edadet {

struct DecoderConfig {
  int num_queries = 30;
  int num_layers = 6;
  int split_layer = 2;
  int hidden_dim = 32;
  int num_heads = 4;
  int ffn_dim = 64;
  int encoder_layers = 1;
  // Queries seeded from the top-scoring per-token encoder proposals instead of
  // learned query embeddings.
  bool two_stage = true;
  double anchor_size = 0.25;
  // Box and objectness heads (shared) also applied to every earlier layer.
  bool aux_loss = true;

  void validate() const {
    require(anchor_size > 0 && anchor_size < 1, "DecoderConfig: anchor_size must lie in (0, 1)");
    require(num_queries >= 1, "DecoderConfig: num_queries must be >= 1");
    require(num_layers >= 1, "DecoderConfig: num_layers must be >= 1");
    require(split_layer >= 1 && split_layer <= num_layers, "DecoderConfig: split_layer must lie in [1, num_layers]");
    require(hidden_dim >= 4 && hidden_dim % 4 == 0, "DecoderConfig: hidden_dim must be a positive multiple of 4");
    require(num_heads >= 1 && hidden_dim % num_heads == 0, "DecoderConfig: hidden_dim must be divisible by num_heads");
    require(ffn_dim >= 1 && encoder_layers >= 0, "DecoderConfig: invalid ffn_dim or encoder_layers");
  }
};

// Matching cost and box-loss weights: objectness, L1 (cxcywh), 1 - GIoU.
struct BoxWeights {
  double obj = 2.0;
  double l1 = 5.0;
  double giou = 2.0;

  void validate() const { require(obj >= 0 && l1 >= 0 && giou >= 0, "BoxWeights: weights must be nonnegative"); }
};

// ---- parameters ---------------------------------------------------------------

namespace nn {

inline void add_linear(ParamStore& ps, const std::string& name, int in, int out, std::uint64_t seed) {
  ps.add(name + ".w", xavier_uniform(name + ".w", seed, in, out));
  ps.add(name + ".b", ag::Mat::Zero(1, out));
}

inline void add_layer_norm(ParamStore& ps, const std::string& name, int dim) {
  ps.add(name + ".gamma", ag::Mat::Ones(1, dim));
  ps.add(name + ".beta", ag::Mat::Zero(1, dim));
}

inline ag::Var linear(ParamBinding& P, const std::string& name, const ag::Var& x) {
  return ag::add_row(ag::matmul(x, P(name + ".w")), P(name + ".b"));
}

inline ag::Var layer_norm(ParamBinding& P, const std::string& name, const ag::Var& x) {
  return ag::layer_norm_rows(x, P(name + ".gamma"), P(name + ".beta"));
}

inline void add_attention(ParamStore& ps, const std::string& name, int dim, std::uint64_t seed) {
  for (const char* p : {"q", "k", "v", "o"}) add_linear(ps, name + "." + p, dim, dim, seed);
}

inline ag::Var attention(ParamBinding& P, const std::string& name, const ag::Var& query, const ag::Var& key,
                         const ag::Var& value, int heads) {
  ag::Var q = linear(P, name + ".q", query);
  ag::Var k = linear(P, name + ".k", key);
  ag::Var v = linear(P, name + ".v", value);
  const auto dh = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ag::Var> outs;
  for (int h = 0; h < heads; ++h) {
    ag::Var qh = ag::slice_cols(q, h * dh, dh), kh = ag::slice_cols(k, h * dh, dh), vh = ag::slice_cols(v, h * dh, dh);
    ag::Var a = ag::softmax_rows(ag::scale(ag::matmul_bt(qh, kh), scale));
    outs.push_back(ag::matmul(a, vh));
  }
  return linear(P, name + ".o", heads == 1 ? outs.front() : ag::concat_cols(outs));
}

}  // namespace nn

// 2-D sine positional encoding, (h*w) x dim.
inline ag::Mat sine_position_encoding(int h, int w, int dim, double temperature = 20.0) {
  require(dim % 4 == 0, "sine_position_encoding: dim must be a multiple of 4");
  const int npf = dim / 2;
  ag::Mat pos(static_cast<Eigen::Index>(h) * w, dim);
  const double two_pi = 2.0 * std::numbers::pi;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double ey = (y + 0.5) / h * two_pi, ex = (x + 0.5) / w * two_pi;
      for (int i = 0; i < npf; i += 2) {
        const double t = std::pow(temperature, static_cast<double>(i) / npf);
        const Eigen::Index r = static_cast<Eigen::Index>(y) * w + x;
        pos(r, i) = std::sin(ey / t);
        pos(r, i + 1) = std::cos(ey / t);
        pos(r, npf + i) = std::sin(ex / t);
        pos(r, npf + i + 1) = std::cos(ex / t);
      }
    }
  }
  return pos;
}

inline void init_decoder_params(ParamStore& ps, const DecoderConfig& cfg, int feature_dim, std::uint64_t seed) {
  cfg.validate();
  const int H = cfg.hidden_dim;
  nn::add_linear(ps, "dec.input_proj", feature_dim, H, seed);
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = "enc.layer" + std::to_string(l);
    nn::add_attention(ps, p + ".self", H, seed);
    nn::add_layer_norm(ps, p + ".ln1", H);
    nn::add_linear(ps, p + ".ffn1", H, cfg.ffn_dim, seed);
    nn::add_linear(ps, p + ".ffn2", cfg.ffn_dim, H, seed);
    nn::add_layer_norm(ps, p + ".ln2", H);
  }
  if (cfg.two_stage) {
    nn::add_linear(ps, "enc.obj", H, 1, seed);
    nn::add_linear(ps, "enc.box1", H, H, seed);
    nn::add_linear(ps, "enc.box2", H, 4, seed);
    nn::add_linear(ps, "dec.qpos_proj", 4, H, seed);
  } else {
    ps.add("dec.query_pos", normal_init("dec.query_pos", seed, cfg.num_queries, H, 1.0));
    nn::add_linear(ps, "dec.ref", H, 2, seed);
  }
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "dec.layer" + std::to_string(l);
    nn::add_attention(ps, p + ".self", H, seed);
    nn::add_layer_norm(ps, p + ".ln1", H);
    nn::add_attention(ps, p + ".cross", H, seed);
    nn::add_layer_norm(ps, p + ".ln2", H);
    nn::add_linear(ps, p + ".ffn1", H, cfg.ffn_dim, seed);
    nn::add_linear(ps, p + ".ffn2", cfg.ffn_dim, H, seed);
    nn::add_layer_norm(ps, p + ".ln3", H);
  }
  nn::add_linear(ps, "dec.box1", H, H, seed);
  nn::add_linear(ps, "dec.box2", H, 4, seed);
  nn::add_linear(ps, "dec.obj", H, 1, seed);
}

struct DecoderOutput {
  ag::Var boxes;              // Q x 4, normalized (cx, cy, w, h) in (0, 1)
  ag::Var objectness_logits;  // Q x 1
  std::vector<ag::Var> states;  // per decoder layer, Q x hidden
  // Two-stage only: one proposal per feature cell.
  ag::Var enc_boxes;
  ag::Var enc_objectness_logits;
  // Heads applied to layers 1..num_layers-1 when aux_loss is set.
  std::vector<ag::Var> aux_boxes, aux_objectness_logits;
};

inline double logit(double p) {
  p = std::clamp(p, 1e-6, 1 - 1e-6);
  return std::log(p / (1 - p));
}

// Per-cell anchors (cell center, anchor_size) in logit space.
inline ag::Mat anchor_logits(const LevelShape& shape, double size) {
  ag::Mat a(static_cast<Eigen::Index>(shape.h) * shape.w, 4);
  for (int y = 0; y < shape.h; ++y)
    for (int x = 0; x < shape.w; ++x)
      a.row(static_cast<Eigen::Index>(y) * shape.w + x) << logit((x + 0.5) / shape.w), logit((y + 0.5) / shape.h),
          logit(size), logit(size);
  return a;
}

// Indices of the k largest entries of a column, ties to the lower index.
inline std::vector<int> top_rows(const ag::Mat& col, int k) {
  std::vector<int> idx(static_cast<std::size_t>(col.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return col(a, 0) > col(b, 0); });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

// Box and objectness heads read the final decoder layer.
inline DecoderOutput decode_proposals(ParamBinding& P, const DecoderConfig& cfg, const ag::Var& features,
                                      const LevelShape& shape) {
  cfg.validate();
  ag::Graph& g = P.graph();
  const int H = cfg.hidden_dim;
  const Eigen::Index cells = static_cast<Eigen::Index>(shape.h) * shape.w;
  require(features.rows() == cells, "decode_proposals: feature rows != h*w");
  require(features.cols() == P("dec.input_proj.w").rows(), "decode_proposals: feature dim does not match parameters");
  require(P("dec.input_proj.w").cols() == H, "decode_proposals: parameters were initialized for a different hidden_dim");
  if (cfg.two_stage) {
    require(cfg.num_queries <= cells, "decode_proposals: two-stage selection needs num_queries <= feature cells (" +
                                          std::to_string(cells) + ")");
  } else {
    require(P("dec.query_pos").rows() == cfg.num_queries && P("dec.query_pos").cols() == H,
            "decode_proposals: parameters were initialized for a different decoder shape");
  }

  ag::Var mem = nn::linear(P, "dec.input_proj", features);
  ag::Var pos = g.constant(sine_position_encoding(shape.h, shape.w, H));
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = "enc.layer" + std::to_string(l);
    ag::Var qk = ag::add(mem, pos);
    mem = nn::layer_norm(P, p + ".ln1", ag::add(mem, nn::attention(P, p + ".self", qk, qk, mem, cfg.num_heads)));
    ag::Var ff = nn::linear(P, p + ".ffn2", ag::relu(nn::linear(P, p + ".ffn1", mem)));
    mem = nn::layer_norm(P, p + ".ln2", ag::add(mem, ff));
  }
  ag::Var mem_key = ag::add(mem, pos);

  DecoderOutput out;
  ag::Var t, qpos, ref;
  if (cfg.two_stage) {
    const ag::Var enc_logits = ag::add(nn::linear(P, "enc.box2", ag::relu(nn::linear(P, "enc.box1", mem))),
                                       g.constant(anchor_logits(shape, cfg.anchor_size)));
    out.enc_boxes = ag::sigmoid(enc_logits);
    out.enc_objectness_logits = nn::linear(P, "enc.obj", mem);
    const auto idx = top_rows(out.enc_objectness_logits.value(), cfg.num_queries);
    ag::Mat sel_boxes(cfg.num_queries, 4), sel_logits(cfg.num_queries, 4);
    for (int q = 0; q < cfg.num_queries; ++q) {
      sel_boxes.row(q) = out.enc_boxes.value().row(idx[static_cast<std::size_t>(q)]);
      sel_logits.row(q) = enc_logits.value().row(idx[static_cast<std::size_t>(q)]);
    }
    t = ag::gather_rows(mem, idx);
    qpos = nn::linear(P, "dec.qpos_proj", g.constant(sel_boxes));
    ref = g.constant(sel_logits);
  } else {
    t = g.constant(ag::Mat::Zero(cfg.num_queries, H));
    qpos = P("dec.query_pos");
    ref = ag::concat_cols({nn::linear(P, "dec.ref", qpos), g.constant(ag::Mat::Zero(cfg.num_queries, 2))});
  }
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "dec.layer" + std::to_string(l);
    ag::Var q = ag::add(t, qpos);
    t = nn::layer_norm(P, p + ".ln1", ag::add(t, nn::attention(P, p + ".self", q, q, t, cfg.num_heads)));
    t = nn::layer_norm(P, p + ".ln2",
                       ag::add(t, nn::attention(P, p + ".cross", ag::add(t, qpos), mem_key, mem, cfg.num_heads)));
    ag::Var ff = nn::linear(P, p + ".ffn2", ag::relu(nn::linear(P, p + ".ffn1", t)));
    t = nn::layer_norm(P, p + ".ln3", ag::add(t, ff));
    out.states.push_back(t);
  }
  auto box_head = [&](const ag::Var& state) {
    return ag::sigmoid(ag::add(nn::linear(P, "dec.box2", ag::relu(nn::linear(P, "dec.box1", state))), ref));
  };
  out.boxes = box_head(t);
  out.objectness_logits = nn::linear(P, "dec.obj", t);
  if (cfg.aux_loss && g.recording()) {
    for (int l = 0; l + 1 < cfg.num_layers; ++l) {
      out.aux_boxes.push_back(box_head(out.states[static_cast<std::size_t>(l)]));
      out.aux_objectness_logits.push_back(nn::linear(P, "dec.obj", out.states[static_cast<std::size_t>(l)]));
    }
  }
  return out;
}

inline std::vector<Proposal> to_proposals(const ag::Mat& boxes, const ag::Mat& objectness_logits) {
  std::vector<Proposal> out;
  out.reserve(static_cast<std::size_t>(boxes.rows()));
  for (Eigen::Index q = 0; q < boxes.rows(); ++q) {
    const double z = objectness_logits(q, 0);
    const double obj = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    out.push_back({{boxes(q, 0), boxes(q, 1), boxes(q, 2), boxes(q, 3)}, obj});
  }
  return out;
}

// Runs the decoder over a dense feature grid without recording gradients.
inline std::vector<Proposal> generate_proposals(const PatchGrid& features, const DecoderConfig& cfg,
                                                const ParamStore& params) {
  features.validate();
  ag::Graph g(false);
  ParamBinding P(g, params);
  auto out = decode_proposals(P, cfg, g.constant(features.values), {features.h, features.w, features.stride});
  return to_proposals(out.boxes.value(), out.objectness_logits.value());
}

// (box_branch_input, cls_branch_input): the final layer state and the state
// after split_layer (1-based).
template <class State>
std::pair<State, State> split_branches(const std::vector<State>& decoder_states, const DecoderConfig& cfg) {
  require(static_cast<int>(decoder_states.size()) == cfg.num_layers, "split_branches: expected one state per layer");
  if (cfg.split_layer < 1 || cfg.split_layer > cfg.num_layers)
    throw InvalidArgument("split_branches: split_layer out of range");
  return {decoder_states.back(), decoder_states[static_cast<std::size_t>(cfg.split_layer - 1)]};
}

// ---- matching -----------------------------------------------------------------

inline double l1_cxcywh(const BoxCXCYWH& a, const BoxCXCYWH& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
}

inline ag::Mat match_cost_matrix(const std::vector<Proposal>& proposals, const std::vector<BoxXYXY>& targets,
                                 const BoxWeights& w) {
  ag::Mat c(static_cast<Eigen::Index>(proposals.size()), static_cast<Eigen::Index>(targets.size()));
  for (std::size_t q = 0; q < proposals.size(); ++q) {
    const BoxXYXY pb = to_xyxy(proposals[q].box);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      c(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(t)) =
          w.obj * (1.0 - proposals[q].objectness) + w.l1 * l1_cxcywh(proposals[q].box, to_cxcywh(targets[t])) +
          w.giou * (1.0 - giou(pb, targets[t]));
    }
  }
  return c;
}

inline MatchResult bipartite_match(const std::vector<Proposal>& proposals, const std::vector<BoxXYXY>& targets,
                                   const BoxWeights& w) {
  w.validate();
  return assign_min_cost(match_cost_matrix(proposals, targets, w));
}

// ---- box loss -------------------------------------------------------------------

struct BoxLossTerms {
  double objectness = 0;  // mean BCE over all queries
  double l1 = 0;          // mean over matched of the summed |coordinate| error
  double giou = 0;        // mean over matched of (1 - GIoU)
  double total = 0;       // weighted sum
};

struct BoxLossVars {
  ag::Var objectness, l1, giou, total;
};

// Differentiable L_box. boxes: Q x 4 cxcywh, objectness_logits: Q x 1.
inline BoxLossVars box_loss(const ag::Var& boxes, const ag::Var& objectness_logits,
                            const std::vector<BoxXYXY>& targets, const MatchResult& match, const BoxWeights& w) {
  ag::Graph* g = boxes.graph();
  const auto nq = boxes.rows();
  ag::Mat labels = ag::Mat::Zero(nq, 1);
  for (auto [q, t] : match.pairs) labels(q, 0) = 1.0;
  // BCE with logits: softplus(z) - y z
  ag::Var bce = ag::mean(ag::sub(ag::softplus(objectness_logits), ag::mul(g->constant(labels), objectness_logits)));

  BoxLossVars out;
  out.objectness = bce;
  if (match.pairs.empty()) {
    out.l1 = g->constant(ag::Mat::Zero(1, 1));
    out.giou = g->constant(ag::Mat::Zero(1, 1));
  } else {
    std::vector<int> qi;
    ag::Mat tgt(static_cast<Eigen::Index>(match.pairs.size()), 4);
    for (std::size_t i = 0; i < match.pairs.size(); ++i) {
      qi.push_back(match.pairs[i].first);
      const auto c = to_cxcywh(targets[static_cast<std::size_t>(match.pairs[i].second)]);
      tgt.row(static_cast<Eigen::Index>(i)) << c.cx, c.cy, c.w, c.h;
    }
    const double m = static_cast<double>(match.pairs.size());
    ag::Var pred = ag::gather_rows(boxes, qi);
    ag::Var tv = g->constant(tgt);
    out.l1 = ag::scale(ag::sum(ag::abs(ag::sub(pred, tv))), 1.0 / m);

    auto col = [](const ag::Var& v, int c) { return ag::slice_cols(v, c, 1); };
    auto corners = [&](const ag::Var& v) {
      ag::Var cx = col(v, 0), cy = col(v, 1), hw = ag::scale(col(v, 2), 0.5), hh = ag::scale(col(v, 3), 0.5);
      return std::array<ag::Var, 4>{ag::sub(cx, hw), ag::sub(cy, hh), ag::add(cx, hw), ag::add(cy, hh)};
    };
    const auto p = corners(pred);
    const auto t = corners(tv);
    ag::Var iw = ag::relu(ag::sub(ag::minimum(p[2], t[2]), ag::maximum(p[0], t[0])));
    ag::Var ih = ag::relu(ag::sub(ag::minimum(p[3], t[3]), ag::maximum(p[1], t[1])));
    ag::Var inter = ag::mul(iw, ih);
    ag::Var area_p = ag::mul(col(pred, 2), col(pred, 3));
    ag::Var area_t = ag::mul(col(tv, 2), col(tv, 3));
    ag::Var uni = ag::sub(ag::add(area_p, area_t), inter);
    ag::Var iou_v = ag::div(inter, uni);
    ag::Var hull = ag::mul(ag::sub(ag::maximum(p[2], t[2]), ag::minimum(p[0], t[0])),
                           ag::sub(ag::maximum(p[3], t[3]), ag::minimum(p[1], t[1])));
    ag::Var giou_v = ag::sub(iou_v, ag::div(ag::sub(hull, uni), hull));
    out.giou = ag::scale(ag::add_scalar(ag::scale(ag::sum(giou_v), -1.0), m), 1.0 / m);
  }
  out.total = ag::add(ag::add(ag::scale(out.objectness, w.obj), ag::scale(out.l1, w.l1)), ag::scale(out.giou, w.giou));
  return out;
}

// Value-level L_box over proposals whose objectness is a probability.
inline BoxLossTerms box_loss(const std::vector<Proposal>& proposals, const std::vector<BoxXYXY>& targets,
                             const MatchResult& match, const BoxWeights& w) {
  w.validate();
  require(!proposals.empty(), "box_loss: no proposals");
  BoxLossTerms r;
  std::vector<char> matched(proposals.size(), 0);
  for (auto [q, t] : match.pairs) {
    require(q >= 0 && static_cast<std::size_t>(q) < proposals.size() && t >= 0 &&
                static_cast<std::size_t>(t) < targets.size(),
            "box_loss: match index out of range");
    matched[static_cast<std::size_t>(q)] = 1;
  }
  constexpr double eps = 1e-12;
  for (std::size_t q = 0; q < proposals.size(); ++q) {
    const double p = proposals[q].objectness;
    r.objectness += matched[q] ? -std::log(std::max(p, eps)) : -std::log(std::max(1.0 - p, eps));
  }
  r.objectness /= static_cast<double>(proposals.size());
  for (auto [q, t] : match.pairs) {
    const auto& pb = proposals[static_cast<std::size_t>(q)].box;
    const auto& tb = targets[static_cast<std::size_t>(t)];
    r.l1 += l1_cxcywh(pb, to_cxcywh(tb));
    r.giou += 1.0 - giou(to_xyxy(pb), tb);
  }
  if (!match.pairs.empty()) {
    r.l1 /= static_cast<double>(match.pairs.size());
    r.giou /= static_cast<double>(match.pairs.size());
  }
  r.total = w.obj * r.objectness + w.l1 * r.l1 + w.giou * r.giou;
  return r;
}

}  // namespace edadet
