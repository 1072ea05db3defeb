#pragma once

// Training loop and dataset-level evaluation shared by the CLI and the
// acceptance suite.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "edadet/datasets.hpp"
#include "edadet/metrics.hpp"
#include "edadet/objectives.hpp"

namespace edadet {

struct Schedule {
  int steps = 2000;
  int batch_size = 8;
  double lr = 1e-3;
  // Cosine decay from lr to lr * final_lr_ratio; 1 keeps the rate constant.
  double final_lr_ratio = 0.1;
  bool augment = true;
  std::uint64_t seed = 0;

  double lr_at(int step) const {
    if (steps <= 1) return lr;
    const double t = static_cast<double>(step) / (steps - 1);
    return lr * (final_lr_ratio + (1.0 - final_lr_ratio) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t)));
  }
};

using StepCallback = std::function<void(std::int64_t step, const LossBundle&, double lr)>;

inline ModelState train_model(const Dataset& train, const ModelConfig& cfg, const AdamWConfig& opt,
                              const Schedule& sched, const TrainContext& ctx, const StepCallback& on_step = {}) {
  require(sched.steps >= 0 && sched.batch_size >= 1, "train_model: invalid schedule");
  ModelState st = init_model(cfg, sched.seed, opt);
  BatchIterator it(train, sched.batch_size, sched.seed, sched.augment);
  for (int s = 0; s < sched.steps; ++s) {
    const double lr = sched.lr_at(s);
    const LossBundle b = train_step(it.next(), st, cfg, ctx, lr);
    if (on_step) on_step(st.step, b, lr);
  }
  return st;
}

struct EvalOutputs {
  EvalReport report;
  std::vector<std::vector<Detection>> detections;
};

// Detections over the target vocabulary for every image, AP50 and the recall
// of the top-N class-agnostic proposals.
inline EvalOutputs evaluate_model(const ModelState& st, const ModelConfig& cfg, const Dataset& ds,
                                  const CategoryVocabulary& vocab, const EmbeddingMatrix& target,
                                  const FrozenImageEncoder& enc, int top_n = 100) {
  EvalOutputs out;
  std::vector<std::vector<BoxAnnotation>> gt;
  std::vector<std::vector<Proposal>> props;
  std::vector<std::vector<BoxXYXY>> gt_boxes;
  for (const auto& s : ds.samples) {
    const Image im = sample_image(s, ds.image_size);
    ForwardResult fr = forward_model(st, cfg, im, &enc);
    out.detections.push_back(detections_from_forward(fr, im, target, cfg, enc));
    props.push_back(std::move(fr.proposals));
    gt.push_back(s.annotations);
    std::vector<BoxXYXY> boxes;
    for (const auto& a : s.annotations) boxes.push_back(a.box);
    gt_boxes.push_back(std::move(boxes));
  }
  out.report = ap50_generalized(out.detections, gt, vocab);
  out.report.recall = average_recall_topN(props, gt_boxes, top_n, ds.image_size);
  return out;
}

}  // namespace edadet
