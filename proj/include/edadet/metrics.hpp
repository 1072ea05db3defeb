#pragma once

// Generalized AP50 with base/novel breakdown, top-N average recall of
// class-agnostic proposals, and the novel-to-base similarity ranking.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "edadet/boxes.hpp"
#include "edadet/datasets.hpp"
#include "edadet/encoders.hpp"
#include "edadet/objectives.hpp"
#include "edadet/vocab.hpp"
#include "json.hpp"

namespace edadet {

struct CategoryAP {
  std::string name;
  Split split = Split::base;
  std::optional<double> ap50;  // absent when support is 0
  int support = 0;
};

struct RecallReport {
  double ar = 0;
  std::optional<double> ar_small, ar_medium, ar_large;  // absent for empty buckets
  int num_gt = 0;
  int top_n = 0;
};

struct EvalReport {
  std::optional<double> ap50_all, ap50_base, ap50_novel;
  std::vector<CategoryAP> per_category;
  std::optional<RecallReport> recall;
};

// 101-point interpolated AP from a TP/FP sequence in ranking order.
inline double interpolated_ap(const std::vector<char>& tp, int num_gt) {
  if (num_gt <= 0) return 0.0;
  std::vector<double> prec(tp.size()), rec(tp.size());
  int ctp = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    ctp += tp[i] ? 1 : 0;
    prec[i] = static_cast<double>(ctp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(ctp) / num_gt;
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    const double thr = r / 100.0;
    auto it = std::lower_bound(rec.begin(), rec.end(), thr);
    if (it != rec.end()) sum += prec[static_cast<std::size_t>(it - rec.begin())];
  }
  return sum / 101.0;
}

// Per category: detections ranked by confidence (ties keep image order, then
// per-image order), each greedily matched to the highest-IoU unmatched ground
// truth of its category with IoU >= 0.5.
inline EvalReport ap50_generalized(const std::vector<std::vector<Detection>>& detections,
                                   const std::vector<std::vector<BoxAnnotation>>& ground_truth,
                                   const CategoryVocabulary& vocab, double iou_threshold = 0.5) {
  require(detections.size() == ground_truth.size(), "ap50_generalized: detections and ground truth differ in image count");
  EvalReport rep;
  std::vector<double> all, base, novel;
  for (const auto& cat : vocab.categories()) {
    struct Ranked {
      double score;
      std::size_t image;
      BoxXYXY box;
    };
    std::vector<Ranked> ranked;
    int support = 0;
    for (std::size_t i = 0; i < detections.size(); ++i) {
      for (const auto& d : detections[i])
        if (d.category == cat.name) ranked.push_back({d.score, i, d.box});
      for (const auto& g : ground_truth[i]) support += g.category == cat.name ? 1 : 0;
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
    std::vector<std::vector<char>> used(ground_truth.size());
    for (std::size_t i = 0; i < ground_truth.size(); ++i) used[i].assign(ground_truth[i].size(), 0);
    std::vector<char> tp;
    for (const auto& r : ranked) {
      const auto& gts = ground_truth[r.image];
      int best = -1;
      double best_iou = -1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].category != cat.name || used[r.image][g]) continue;
        const double v = iou(r.box, gts[g].box);
        if (v >= iou_threshold && v > best_iou) {
          best = static_cast<int>(g);
          best_iou = v;
        }
      }
      if (best >= 0) used[r.image][static_cast<std::size_t>(best)] = 1;
      tp.push_back(best >= 0 ? 1 : 0);
    }
    CategoryAP c{cat.name, cat.split, std::nullopt, support};
    if (support > 0) {
      c.ap50 = interpolated_ap(tp, support);
      all.push_back(*c.ap50);
      (cat.split == Split::base ? base : novel).push_back(*c.ap50);
    }
    rep.per_category.push_back(c);
  }
  auto mean = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  rep.ap50_all = mean(all);
  rep.ap50_base = mean(base);
  rep.ap50_novel = mean(novel);
  return rep;
}

inline std::vector<double> recall_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

// Recall of the top-N proposals (by objectness, ties in input order) averaged
// over IoU thresholds 0.5:0.05:0.95 and all ground truth. Buckets use pixel
// areas 32^2 and 96^2 scaled by (image_side / 800)^2.
inline RecallReport average_recall_topN(const std::vector<std::vector<Proposal>>& proposals,
                                        const std::vector<std::vector<BoxXYXY>>& ground_truth, int top_n,
                                        int image_side) {
  if (top_n < 1) throw InvalidArgument("average_recall_topN: N must be >= 1");
  require(image_side >= 1, "average_recall_topN: image_side must be positive");
  require(proposals.size() == ground_truth.size(), "average_recall_topN: image count mismatch");
  const auto thresholds = recall_iou_thresholds();
  const double scale = (image_side / 800.0) * (image_side / 800.0);
  const double small = 32.0 * 32.0 * scale, large = 96.0 * 96.0 * scale;
  double sum_all = 0, sum_bucket[3] = {0, 0, 0};
  int n_all = 0, n_bucket[3] = {0, 0, 0};
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    std::vector<std::size_t> order(proposals[i].size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return proposals[i][a].objectness > proposals[i][b].objectness;
    });
    if (order.size() > static_cast<std::size_t>(top_n)) order.resize(static_cast<std::size_t>(top_n));
    for (const auto& g : ground_truth[i]) {
      double best = 0;
      for (auto q : order) {
        const BoxXYXY b = clip_unit(to_xyxy(proposals[i][q].box));
        if (b.x2 > b.x1 && b.y2 > b.y1) best = std::max(best, iou(b, g));
      }
      double rec = 0;
      for (double t : thresholds) rec += best >= t ? 1.0 : 0.0;
      rec /= static_cast<double>(thresholds.size());
      const double area = g.area() * image_side * image_side;
      const int bucket = area < small ? 0 : (area <= large ? 1 : 2);
      sum_all += rec;
      ++n_all;
      sum_bucket[bucket] += rec;
      ++n_bucket[bucket];
    }
  }
  RecallReport r;
  r.top_n = top_n;
  r.num_gt = n_all;
  r.ar = n_all ? sum_all / n_all : 0.0;
  auto bucket = [&](int b) -> std::optional<double> {
    if (n_bucket[b] == 0) return std::nullopt;
    return sum_bucket[b] / n_bucket[b];
  };
  r.ar_small = bucket(0);
  r.ar_medium = bucket(1);
  r.ar_large = bucket(2);
  return r;
}

// ---- novel-to-base similarity -----------------------------------------------------

struct SimilarityEntry {
  std::string category;
  double mean_similarity = 0;
  int samples = 0;
};

struct SimilarityRanking {
  std::vector<SimilarityEntry> ranking;  // descending similarity
  std::vector<std::string> skipped;      // novel categories without instances
};

// Max cosine between the pooled class token of a crop (resized to crop_side)
// and any base embedding.
inline double crop_base_similarity(const FrozenImageEncoder& enc, const Image& im, const BoxXYXY& box,
                                   const EmbeddingMatrix& base_emb, int crop_side = 32) {
  const int x0 = std::clamp(static_cast<int>(std::floor(box.x1 * im.width)), 0, im.width - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(box.y1 * im.height)), 0, im.height - 1);
  const int x1 = std::clamp(static_cast<int>(std::ceil(box.x2 * im.width)), x0 + 1, im.width);
  const int y1 = std::clamp(static_cast<int>(std::ceil(box.y2 * im.height)), y0 + 1, im.height);
  const Image c = resize_bilinear(crop(im, x0, y0, x1, y1), crop_side, crop_side);
  const Vec cls = enc.pooled_class_token(c);
  double best = -1.0;
  for (int r = 0; r < base_emb.size(); ++r)
    best = std::max(best, cosine(cls, base_emb.rows.row(r).cast<double>().transpose()));
  return best;
}

inline SimilarityRanking novel_base_similarity_ranking(const Dataset& ds, const FrozenImageEncoder& enc,
                                                       const EmbeddingMatrix& base_emb,
                                                       const std::vector<std::string>& novel_categories,
                                                       int samples_per_category = 200, std::uint64_t seed = 0) {
  require(samples_per_category >= 1, "novel_base_similarity_ranking: sample count must be >= 1");
  SimilarityRanking out;
  for (const auto& name : novel_categories) {
    std::vector<std::pair<std::size_t, std::size_t>> inst;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
      for (std::size_t a = 0; a < ds.samples[i].annotations.size(); ++a)
        if (ds.samples[i].annotations[a].category == name) inst.emplace_back(i, a);
    if (inst.empty()) {
      out.skipped.push_back(name);
      continue;
    }
    if (inst.size() > static_cast<std::size_t>(samples_per_category)) {
      std::mt19937_64 rng(detail::fnv1a("similarity/" + name, seed));
      std::shuffle(inst.begin(), inst.end(), rng);
      inst.resize(static_cast<std::size_t>(samples_per_category));
      std::sort(inst.begin(), inst.end());
    }
    double sum = 0;
    for (auto [i, a] : inst) {
      const Image im = sample_image(ds.samples[i], ds.image_size);
      sum += crop_base_similarity(enc, im, ds.samples[i].annotations[a].box, base_emb);
    }
    out.ranking.push_back({name, sum / static_cast<double>(inst.size()), static_cast<int>(inst.size())});
  }
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [](const SimilarityEntry& a, const SimilarityEntry& b) {
    return a.mean_similarity > b.mean_similarity;
  });
  return out;
}

// ---- report output --------------------------------------------------------------

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["ap50_all"] = optional_json(r.ap50_all);
  j["ap50_base"] = optional_json(r.ap50_base);
  j["ap50_novel"] = optional_json(r.ap50_novel);
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : r.per_category)
    cats.push_back({{"name", c.name}, {"split", std::string(to_string(c.split))}, {"ap50", optional_json(c.ap50)},
                    {"support", c.support}});
  j["per_category"] = cats;
  if (r.recall) {
    j["recall"] = {{"top_n", r.recall->top_n},           {"ar", r.recall->ar},
                   {"ar_small", optional_json(r.recall->ar_small)},
                   {"ar_medium", optional_json(r.recall->ar_medium)},
                   {"ar_large", optional_json(r.recall->ar_large)},
                   {"num_gt", r.recall->num_gt}};
  }
  return j;
}

inline std::string format_percent(const std::optional<double>& v) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * *v;
  return os.str();
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "AP50_box" << std::setw(12) << "AP50_base" << std::setw(12) << "AP50_novel";
  if (r.recall) os << std::setw(10) << ("AR@" + std::to_string(r.recall->top_n)) << std::setw(8) << "AR_S"
                   << std::setw(8) << "AR_M" << std::setw(8) << "AR_L";
  os << "\n"
     << std::setw(12) << format_percent(r.ap50_all) << std::setw(12) << format_percent(r.ap50_base) << std::setw(12)
     << format_percent(r.ap50_novel);
  if (r.recall)
    os << std::setw(10) << format_percent(r.recall->ar) << std::setw(8) << format_percent(r.recall->ar_small)
       << std::setw(8) << format_percent(r.recall->ar_medium) << std::setw(8) << format_percent(r.recall->ar_large);
  os << "\n\n" << std::setw(24) << "category" << std::setw(8) << "split" << std::setw(8) << "AP50" << "support\n";
  for (const auto& c : r.per_category)
    os << std::setw(24) << c.name << std::setw(8) << to_string(c.split) << std::setw(8) << format_percent(c.ap50)
       << c.support << "\n";
  return os.str();
}

}  // namespace edadet
