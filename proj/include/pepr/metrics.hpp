#pragma once

// Segmentation mIoU over a split and COCO-style box mAP.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pepr/error.hpp"
#include "pepr/synth.hpp"

namespace pepr::metrics {

// Accumulates a confusion matrix across samples; ratios are taken only at
// the end, so the result does not depend on sample order.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes) : k_(num_classes), counts_(static_cast<std::size_t>(k_ * k_), 0) {
    require(num_classes >= 1, "confusion matrix: num_classes must be >= 1");
  }

  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    require(pred.size() == gt.size(), "compute_miou: prediction/ground-truth shape mismatch");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == synth::kIgnoreLabel) continue;
      require(gt[i] < k_ && pred[i] < k_, "compute_miou: class id out of range");
      ++counts_[static_cast<std::size_t>(gt[i] * k_ + pred[i])];
    }
  }

  int num_classes() const { return k_; }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt * k_ + pred)]; }

 private:
  int k_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  std::vector<double> per_class;  // NaN for classes absent from both pred and gt
  std::vector<bool> present;
  double miou = 0.0;
  double pixel_accuracy = 0.0;
};

inline MiouResult miou_from_confusion(const ConfusionMatrix& cm) {
  const int k = cm.num_classes();
  MiouResult r;
  r.per_class.assign(static_cast<std::size_t>(k), std::nan(""));
  r.present.assign(static_cast<std::size_t>(k), false);
  std::uint64_t correct = 0, total = 0;
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < k; ++c) {
    std::uint64_t gt_c = 0, pred_c = 0;
    for (int o = 0; o < k; ++o) {
      gt_c += cm.at(c, o);
      pred_c += cm.at(o, c);
      total += cm.at(c, o);
    }
    const std::uint64_t inter = cm.at(c, c);
    correct += inter;
    const std::uint64_t uni = gt_c + pred_c - inter;
    if (uni == 0) continue;
    r.present[static_cast<std::size_t>(c)] = true;
    r.per_class[static_cast<std::size_t>(c)] = static_cast<double>(inter) / static_cast<double>(uni);
    sum += r.per_class[static_cast<std::size_t>(c)];
    ++n;
  }
  r.miou = n ? sum / n : 0.0;
  r.pixel_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return r;
}

inline MiouResult compute_miou(const std::vector<std::vector<std::uint8_t>>& preds,
                               const std::vector<std::vector<std::uint8_t>>& gts, int num_classes) {
  require(preds.size() == gts.size(), "compute_miou: sample count mismatch");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i]);
  return miou_from_confusion(cm);
}

struct ScoredBox {
  double score = 0.0;
  synth::Box box;
};

inline void check_box(const synth::Box& b) {
  if (!(b.xmin <= b.xmax && b.ymin <= b.ymax) || !std::isfinite(b.xmin) || !std::isfinite(b.xmax) ||
      !std::isfinite(b.ymin) || !std::isfinite(b.ymax))
    throw ValidationError("compute_map: malformed box (min > max or non-finite)");
}

inline double iou(const synth::Box& a, const synth::Box& b) {
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = (a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

// 101-point interpolated AP from a ranked true-positive sequence.
inline double interpolated_ap(const std::vector<bool>& tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision(tp.size()), recall(tp.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(hits) / static_cast<double>(num_gt);
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

// Average precision at one IoU threshold. Detections are ranked globally by
// score (stable on ties, in image then input order) and each is greedily
// matched to the unmatched ground truth of highest IoU in its image.
inline double average_precision(const std::vector<std::vector<ScoredBox>>& dets,
                                const std::vector<std::vector<synth::Box>>& gts, double threshold) {
  require(dets.size() == gts.size(), "compute_map: image count mismatch");
  struct Ref {
    double score;
    std::size_t image, index;
  };
  std::vector<Ref> order;
  std::size_t num_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = 0; j < dets[i].size(); ++j) order.push_back({dets[i][j].score, i, j});
    num_gt += gts[i].size();
  }
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<bool> tp;
  tp.reserve(order.size());
  for (const auto& r : order) {
    const synth::Box& d = dets[r.image][r.index].box;
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts[r.image].size(); ++g) {
      if (used[r.image][g]) continue;
      const double v = iou(d, gts[r.image][g]);
      if (v >= threshold && v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best >= 0.0) used[r.image][best_g] = true;
    tp.push_back(best >= 0.0);
  }
  return interpolated_ap(tp, num_gt);
}

struct MapResult {
  std::vector<double> thresholds;
  std::vector<double> ap;  // one per threshold
  double map_50_95 = 0.0;
  double map_50 = 0.0;
};

inline MapResult compute_map(const std::vector<std::vector<ScoredBox>>& dets,
                             const std::vector<std::vector<synth::Box>>& gts,
                             const std::vector<double>& thresholds = coco_thresholds()) {
  require(!thresholds.empty(), "compute_map: no IoU thresholds");
  for (const auto& img : dets)
    for (const auto& d : img) {
      check_box(d.box);
      require(std::isfinite(d.score), "compute_map: non-finite detection score");
    }
  for (const auto& img : gts)
    for (const auto& g : img) check_box(g);
  MapResult r;
  r.thresholds = thresholds;
  for (double t : thresholds) r.ap.push_back(average_precision(dets, gts, t));
  double sum = 0.0;
  for (double a : r.ap) sum += a;
  r.map_50_95 = sum / static_cast<double>(r.ap.size());
  r.map_50 = average_precision(dets, gts, 0.5);
  return r;
}

}  // namespace pepr::metrics
