#pragma once

// Losses, model state, the training step and inference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "edadet/autograd.hpp"
#include "edadet/datasets.hpp"
#include "edadet/dense_scoring.hpp"
#include "edadet/detector.hpp"
#include "edadet/encoders.hpp"
#include "edadet/matching.hpp"
#include "edadet/params.hpp"
#include "edadet/proposals.hpp"
#include "edadet/tensor_io.hpp"
#include "edadet/vocab.hpp"

namespace edadet {

enum class ClassifierMode { eda, object_align };

inline ClassifierMode parse_mode(std::string_view s) {
  if (s == "eda") return ClassifierMode::eda;
  if (s == "object_align") return ClassifierMode::object_align;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected eda or object_align)");
}

inline std::string_view to_string(ClassifierMode m) { return m == ClassifierMode::eda ? "eda" : "object_align"; }

struct LossWeights {
  double box = 1.0;
  double cls = 2.0;
  double g = 1.0;
};

struct LossBundle {
  double l_box = 0;
  double l_cls = 0;
  double l_g = 0;
  double total = 0;
  LossWeights weights;

  bool finite() const {
    return std::isfinite(l_box) && std::isfinite(l_cls) && std::isfinite(l_g) && std::isfinite(total);
  }
};

struct ModelConfig {
  ClassifierMode mode = ClassifierMode::eda;
  int feature_dim = 64;
  BackboneConfig backbone;
  DecoderConfig decoder;
  EdaConfig eda;
  BoxWeights match_weights;
  // Objectness weighted up from the matching cost: at toy step counts the
  // duplicate-suppressing objectness signal otherwise lags the box terms.
  BoxWeights box_loss_weights{5.0, 5.0, 2.0};
  LossWeights loss;
  // Confident proposals away from every annotation join the box targets.
  bool extended_supervision = false;
  double extended_min_objectness = 0.9;
  double extended_max_iou = 0.3;
  double score_threshold = 0.05;
  int max_detections = 100;

  void validate() const {
    require(feature_dim >= 4, "ModelConfig: feature_dim must be >= 4");
    backbone.validate();
    decoder.validate();
    eda.validate();
    match_weights.validate();
    box_loss_weights.validate();
    require(loss.box >= 0 && loss.cls >= 0 && loss.g >= 0, "ModelConfig: loss weights must be nonnegative");
    require(max_detections >= 1, "ModelConfig: max_detections must be >= 1");
    require(score_threshold >= 0 && score_threshold <= 1, "ModelConfig: score_threshold must lie in [0, 1]");
  }
};

struct ModelState {
  ParamStore params;
  AdamW optimizer;
  std::int64_t step = 0;
};

inline ModelState init_model(const ModelConfig& cfg, std::uint64_t seed, const AdamWConfig& opt = {}) {
  cfg.validate();
  ModelState st;
  st.optimizer = AdamW(opt);
  init_backbone_params(st.params, cfg.backbone, cfg.eda.fuse_levels, cfg.feature_dim, seed);
  init_decoder_params(st.params, cfg.decoder, cfg.feature_dim, seed);
  if (cfg.mode == ClassifierMode::object_align)
    nn::add_linear(st.params, "cls.proj", cfg.decoder.hidden_dim, cfg.feature_dim, seed);
  return st;
}

// ---- checkpoint ------------------------------------------------------------------

inline void save_checkpoint(const ModelState& st, const std::filesystem::path& path) {
  NamedArrays a;
  for (const auto& [k, v] : st.params.all()) a.emplace("param/" + k, v);
  for (auto& [k, v] : st.optimizer.state_arrays()) a.emplace("opt/" + k, v);
  ag::Mat s(1, 1);
  s(0, 0) = static_cast<double>(st.step);
  a.emplace("step", s);
  save_arrays(a, path);
}

// Loads into a state initialized from `cfg`; every parameter name and shape
// must match.
inline ModelState load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const AdamWConfig& opt = {}) {
  ModelState st = init_model(cfg, 0, opt);
  const NamedArrays a = load_arrays(path);
  NamedArrays opt_state;
  std::size_t seen = 0;
  for (const auto& [k, v] : a) {
    if (k.rfind("param/", 0) == 0) {
      const std::string name = k.substr(6);
      if (!st.params.contains(name)) throw ConfigError("checkpoint has parameter '" + name + "' unknown to this config");
      auto& p = st.params.get(name);
      if (p.rows() != v.rows() || p.cols() != v.cols())
        throw ConfigError("checkpoint shape mismatch for '" + name + "'");
      p = v;
      ++seen;
    } else if (k.rfind("opt/", 0) == 0) {
      opt_state.emplace(k.substr(4), v);
    } else if (k == "step") {
      st.step = static_cast<std::int64_t>(v(0, 0));
    } else {
      throw IoError("checkpoint: unexpected array '" + k + "'");
    }
  }
  if (seen != st.params.all().size()) throw ConfigError("checkpoint is missing parameters for this config");
  st.optimizer.load_state(opt_state);
  return st;
}

// ---- per-image frozen-encoder targets --------------------------------------------

// Frozen-encoder probabilities resampled to the detector grid when strides differ.
inline Mat clip_probs_on_grid(const FrozenImageEncoder& enc, const Image& im, const EmbeddingMatrix& emb, double tau,
                              const LevelShape& grid) {
  const DenseScoreMap m = clip_dense_probs(enc, im, emb, tau);
  if (m.h == grid.h && m.w == grid.w) return m.probs;
  return bilinear_resize_matrix(m.h, m.w, grid.h, grid.w) * m.probs;
}

// ---- losses ------------------------------------------------------------------------

inline BoxXYXY roi_box(const BoxCXCYWH& b) {
  BoxXYXY r = clip_unit(to_xyxy(b));
  constexpr double min_side = 1e-4;
  if (r.x2 - r.x1 < min_side) {
    const double c = std::clamp((r.x1 + r.x2) / 2, min_side / 2, 1 - min_side / 2);
    r.x1 = c - min_side / 2;
    r.x2 = c + min_side / 2;
  }
  if (r.y2 - r.y1 < min_side) {
    const double c = std::clamp((r.y1 + r.y2) / 2, min_side / 2, 1 - min_side / 2);
    r.y1 = c - min_side / 2;
    r.y2 = c + min_side / 2;
  }
  return r;
}

// Cross-entropy of one matched proposal: RoI-align the fused map over the
// (detached) box, top-k mean per category, renormalize, -log p[label].
inline ag::Var eda_proposal_ce(const ag::Var& fused, const LevelShape& grid, const BoxXYXY& box, int label,
                               const EdaConfig& cfg) {
  ag::Graph* g = fused.graph();
  ag::Var roi = ag::matmul(g->constant(roi_align_weights(grid.h, grid.w, box, cfg.roi_h, cfg.roi_w)), fused);
  ag::Var s = ag::topk_mean_cols(roi, cfg.k);
  return ag::sub(ag::log(ag::sum(s)), ag::log(ag::select(s, 0, label)));
}

// Value-level L_cls over precomputed proposal scores: mean cross-entropy of
// the renormalized scores over matched proposals; 0 when nothing is matched.
inline double classification_loss(const std::vector<ProposalScores>& scores, const MatchResult& match,
                                  const std::vector<int>& target_labels) {
  if (match.pairs.empty()) return 0.0;
  double total = 0;
  for (auto [q, t] : match.pairs) {
    require(q >= 0 && static_cast<std::size_t>(q) < scores.size(), "classification_loss: query index out of range");
    require(t >= 0 && static_cast<std::size_t>(t) < target_labels.size(), "classification_loss: target out of range");
    const auto& s = scores[static_cast<std::size_t>(q)].scores;
    const int label = target_labels[static_cast<std::size_t>(t)];
    require(label >= 0 && static_cast<std::size_t>(label) < s.size(), "classification_loss: label out of range");
    const double z = std::accumulate(s.begin(), s.end(), 0.0);
    if (!(z > 0)) throw NumericError("classification_loss: proposal scores sum to zero");
    total += -std::log(std::max(s[static_cast<std::size_t>(label)] / z, 1e-300));
  }
  return total / static_cast<double>(match.pairs.size());
}

// mean |mean_rows(features) - cls|; the class token is a constant.
inline ag::Var global_alignment_loss(const ag::Var& features, const Vec& cls_token) {
  require(features.cols() == cls_token.size(), "global_alignment_loss: detector dim " +
                                                   std::to_string(features.cols()) + " != encoder dim " +
                                                   std::to_string(cls_token.size()));
  ag::Var c = features.graph()->constant(Mat(cls_token.transpose()));
  return ag::mean(ag::abs(ag::sub(ag::mean_rows(features), c)));
}

inline double global_alignment_loss(const PatchGrid& detector_features, const FrozenImageEncoder& enc,
                                    const Image& image) {
  detector_features.validate();
  ag::Graph g(false);
  return global_alignment_loss(g.constant(detector_features.values), enc.pooled_class_token(image)).scalar();
}

// Late alignment: softmax(cos(query, E) / tau) cross-entropy over matched queries.
inline ag::Var object_level_baseline_loss(const ag::Var& query_embeddings, const ag::Var& emb, const MatchResult& match,
                                          const std::vector<int>& target_labels, double tau) {
  ag::Graph* g = query_embeddings.graph();
  if (match.pairs.empty()) return g->constant(Mat::Zero(1, 1));
  std::vector<int> qi;
  for (auto [q, t] : match.pairs) qi.push_back(q);
  ag::Var logp = ag::log_softmax_rows(ag::scale(
      ag::matmul_bt(ag::l2_normalize_rows(ag::gather_rows(query_embeddings, qi)), ag::l2_normalize_rows(emb)),
      1.0 / tau));
  Mat onehot = Mat::Zero(logp.rows(), logp.cols());
  for (std::size_t i = 0; i < match.pairs.size(); ++i) {
    const int label = target_labels[static_cast<std::size_t>(match.pairs[i].second)];
    require(label >= 0 && label < emb.rows(), "object_level_baseline_loss: label out of range");
    onehot(static_cast<Eigen::Index>(i), label) = 1.0;
  }
  return ag::scale(ag::sum(ag::mul(logp, g->constant(onehot))), -1.0 / static_cast<double>(match.pairs.size()));
}

inline double object_level_baseline_loss(const Mat& query_embeddings, const EmbeddingMatrix& emb,
                                         const MatchResult& match, const std::vector<int>& target_labels, double tau) {
  ag::Graph g(false);
  return object_level_baseline_loss(g.constant(query_embeddings), g.constant(emb.as_double()), match, target_labels,
                                    tau)
      .scalar();
}

// ---- training ---------------------------------------------------------------------

struct TrainContext {
  const FrozenImageEncoder* image_encoder = nullptr;
  EmbeddingMatrix train_emb;  // base categories; labels index its rows
};

struct SampleLosses {
  ag::Var l_box, l_cls, l_g;
  std::size_t matched = 0;
};

inline int label_index(const EmbeddingMatrix& emb, const std::string& name) {
  auto it = std::find(emb.category_names.begin(), emb.category_names.end(), name);
  if (it == emb.category_names.end()) throw InvalidArgument("category '" + name + "' is not in the training vocabulary");
  return static_cast<int>(it - emb.category_names.begin());
}

inline SampleLosses sample_losses(ParamBinding& P, const ModelConfig& cfg, const TrainContext& ctx,
                                  const Image& im, const std::vector<BoxAnnotation>& annotations) {
  ag::Graph& g = P.graph();
  const DenseFeatures F = backbone_features(P, cfg.backbone, cfg.eda.fuse_levels, im, ctx.image_encoder);
  const DecoderOutput dec = decode_proposals(P, cfg.decoder, F.values, F.shape);
  const auto proposals = to_proposals(dec.boxes.value(), dec.objectness_logits.value());

  std::vector<BoxXYXY> targets;
  std::vector<int> labels;
  for (const auto& a : annotations) {
    targets.push_back(a.box);
    labels.push_back(label_index(ctx.train_emb, a.category));
  }
  const std::size_t n_labeled = targets.size();
  if (cfg.extended_supervision) {
    for (const auto& p : proposals) {
      if (p.objectness <= cfg.extended_min_objectness) continue;
      const BoxXYXY b = clip_unit(to_xyxy(p.box));
      if (!(b.x2 > b.x1 && b.y2 > b.y1)) continue;
      double best = 0;
      for (std::size_t t = 0; t < n_labeled; ++t) best = std::max(best, iou(b, targets[t]));
      if (best < cfg.extended_max_iou) targets.push_back(b);
    }
  }
  const MatchResult match = bipartite_match(proposals, targets, cfg.match_weights);
  SampleLosses out;
  out.l_box = box_loss(dec.boxes, dec.objectness_logits, targets, match, cfg.box_loss_weights).total;
  for (std::size_t l = 0; l < dec.aux_boxes.size(); ++l) {
    const auto props = to_proposals(dec.aux_boxes[l].value(), dec.aux_objectness_logits[l].value());
    const MatchResult m = bipartite_match(props, targets, cfg.match_weights);
    out.l_box = ag::add(out.l_box, box_loss(dec.aux_boxes[l], dec.aux_objectness_logits[l], targets, m,
                                            cfg.box_loss_weights).total);
  }
  if (cfg.decoder.two_stage) {
    const auto enc_props = to_proposals(dec.enc_boxes.value(), dec.enc_objectness_logits.value());
    const MatchResult enc_match = bipartite_match(enc_props, targets, cfg.match_weights);
    out.l_box = ag::add(out.l_box, box_loss(dec.enc_boxes, dec.enc_objectness_logits, targets, enc_match,
                                            cfg.box_loss_weights).total);
  }

  MatchResult labeled;
  for (auto pr : match.pairs)
    if (static_cast<std::size_t>(pr.second) < n_labeled) labeled.pairs.push_back(pr);
  out.matched = labeled.pairs.size();

  if (cfg.mode == ClassifierMode::eda) {
    if (labeled.pairs.empty()) {
      out.l_cls = g.constant(Mat::Zero(1, 1));
    } else {
      ag::Var s_det = dense_probs(F.values, g.constant(ctx.train_emb.as_double()), cfg.eda.tau);
      ag::Var fused = s_det;
      if (cfg.eda.lam > 0) {
        const Mat clip = clip_probs_on_grid(*ctx.image_encoder, im, ctx.train_emb, cfg.eda.tau, F.shape);
        fused = fuse_probs(s_det, clip, cfg.eda.lam);
      }
      ag::Var acc;
      for (auto [q, t] : labeled.pairs) {
        ag::Var ce = eda_proposal_ce(fused, F.shape, roi_box(proposals[static_cast<std::size_t>(q)].box),
                                     labels[static_cast<std::size_t>(t)], cfg.eda);
        acc = acc.valid() ? ag::add(acc, ce) : ce;
      }
      out.l_cls = ag::scale(acc, 1.0 / static_cast<double>(labeled.pairs.size()));
    }
  } else {
    const auto [box_in, cls_in] = split_branches(dec.states, cfg.decoder);
    (void)box_in;
    ag::Var q = nn::linear(P, "cls.proj", cls_in);
    out.l_cls = object_level_baseline_loss(q, g.constant(ctx.train_emb.as_double()), labeled, labels, cfg.eda.tau);
  }

  if (cfg.loss.g > 0) {
    out.l_g = global_alignment_loss(F.values, ctx.image_encoder->pooled_class_token(im));
  } else {
    out.l_g = g.constant(Mat::Zero(1, 1));
  }
  return out;
}

inline std::string describe_bundle(const LossBundle& b) {
  std::ostringstream os;
  os << "l_box=" << b.l_box << " l_cls=" << b.l_cls << " l_g=" << b.l_g << " total=" << b.total;
  return os.str();
}

// One optimizer step on the batch-mean total loss.
inline LossBundle train_step(const Batch& batch, ModelState& st, const ModelConfig& cfg, const TrainContext& ctx,
                             double lr) {
  require(!batch.empty(), "train_step: empty batch");
  require(ctx.image_encoder != nullptr, "train_step: image encoder required");
  ag::Graph g(true);
  ParamBinding P(g, st.params);
  ag::Var box_acc, cls_acc, g_acc;
  for (const auto& s : batch) {
    SampleLosses l = sample_losses(P, cfg, ctx, s.pixels, s.annotations);
    box_acc = box_acc.valid() ? ag::add(box_acc, l.l_box) : l.l_box;
    cls_acc = cls_acc.valid() ? ag::add(cls_acc, l.l_cls) : l.l_cls;
    g_acc = g_acc.valid() ? ag::add(g_acc, l.l_g) : l.l_g;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  ag::Var l_box = ag::scale(box_acc, inv), l_cls = ag::scale(cls_acc, inv), l_g = ag::scale(g_acc, inv);
  ag::Var total = ag::add(ag::add(ag::scale(l_box, cfg.loss.box), ag::scale(l_cls, cfg.loss.cls)),
                          ag::scale(l_g, cfg.loss.g));
  LossBundle b{l_box.scalar(), l_cls.scalar(), l_g.scalar(), total.scalar(), cfg.loss};
  if (!b.finite())
    throw NumericError("non-finite loss at step " + std::to_string(st.step) + ": " + describe_bundle(b));
  g.backward(total);
  NamedArrays grads = P.grads();
  for (const auto& [k, v] : grads)
    if (!v.allFinite()) throw NumericError("non-finite gradient for '" + k + "' at step " + std::to_string(st.step));
  st.optimizer.step(st.params, std::move(grads), lr);
  ++st.step;
  return b;
}

// ---- inference ----------------------------------------------------------------------

struct Detection {
  BoxXYXY box;  // normalized
  std::string category;
  int label = -1;
  double score = 0;
};

struct ForwardResult {
  PatchGrid features;
  std::vector<Proposal> proposals;
  Mat cls_queries;  // object_align mode: projected split-layer states
};

inline ForwardResult forward_model(const ModelState& st, const ModelConfig& cfg, const Image& im,
                                   const FrozenImageEncoder* vlm = nullptr) {
  ag::Graph g(false);
  ParamBinding P(g, st.params);
  const DenseFeatures F = backbone_features(P, cfg.backbone, cfg.eda.fuse_levels, im, vlm);
  const DecoderOutput dec = decode_proposals(P, cfg.decoder, F.values, F.shape);
  ForwardResult r;
  r.features = PatchGrid{F.shape.h, F.shape.w, F.shape.stride, F.values.value()};
  r.proposals = to_proposals(dec.boxes.value(), dec.objectness_logits.value());
  if (cfg.mode == ClassifierMode::object_align)
    r.cls_queries = nn::linear(P, "cls.proj", split_branches(dec.states, cfg.decoder).second).value();
  return r;
}

// Fused dense map over the target vocabulary for one image.
inline DenseScoreMap fused_score_map(const PatchGrid& features, const FrozenImageEncoder& enc, const Image& im,
                                     const EmbeddingMatrix& target, const EdaConfig& eda) {
  DenseScoreMap det = detector_dense_probs(features, target, eda.tau);
  if (eda.lam == 0) return det;
  DenseScoreMap clip{det.h, det.w, det.stride, det.category_names,
                     clip_probs_on_grid(enc, im, target, eda.tau, {det.h, det.w, det.stride}), false};
  return fuse_score_maps(det, clip, eda.lam);
}

inline Mat normalize_rows(const Mat& m) {
  Mat out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) /= std::max(m.row(i).norm(), 1e-12);
  return out;
}

// Scores the proposals of a finished forward pass over the target vocabulary.
inline std::vector<Detection> detections_from_forward(const ForwardResult& fr, const Image& im,
                                                      const EmbeddingMatrix& target, const ModelConfig& cfg,
                                                      const FrozenImageEncoder& enc) {
  require(target.size() >= 1, "infer_detections: empty target vocabulary");
  std::vector<ProposalScores> scores;
  if (cfg.mode == ClassifierMode::eda) {
    const DenseScoreMap map = fused_score_map(fr.features, enc, im, target, cfg.eda);
    for (const auto& p : fr.proposals) {
      const Mat roi = roi_align(map, roi_box(p.box), cfg.eda.roi_h, cfg.eda.roi_w);
      scores.push_back(make_proposal_scores(topk_masked_mean(roi, cfg.eda.k), p.objectness));
    }
  } else {
    const Mat logits = (normalize_rows(fr.cls_queries) * normalize_rows(target.as_double()).transpose()) / cfg.eda.tau;
    const Mat probs = ag::softmax_rows_value(logits);
    for (std::size_t q = 0; q < fr.proposals.size(); ++q)
      scores.push_back(make_proposal_scores(probs.row(static_cast<Eigen::Index>(q)), fr.proposals[q].objectness));
  }
  std::vector<Detection> dets;
  for (std::size_t q = 0; q < fr.proposals.size(); ++q) {
    const auto& s = scores[q];
    if (s.confidence < cfg.score_threshold) continue;
    const BoxXYXY b = clip_unit(to_xyxy(fr.proposals[q].box));
    if (!(b.x2 > b.x1 && b.y2 > b.y1)) continue;
    dets.push_back({b, target.category_names[static_cast<std::size_t>(s.label)], s.label, s.confidence});
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (dets.size() > static_cast<std::size_t>(cfg.max_detections)) dets.resize(static_cast<std::size_t>(cfg.max_detections));
  return dets;
}

inline std::vector<Detection> infer_detections(const Image& im, const ModelState& st, const EmbeddingMatrix& target,
                                               const ModelConfig& cfg, const FrozenImageEncoder& enc) {
  cfg.validate();
  return detections_from_forward(forward_model(st, cfg, im, &enc), im, target, cfg, enc);
}

}  // namespace edadet
