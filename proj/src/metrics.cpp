// SPDX-License-Identifier: Apache-2.0
#include "glip/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include "glip/common.hpp"

namespace glip {

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

double average_precision(const std::vector<ScoredBox>& detections,
                         const std::vector<GroundTruthBox>& ground_truth, double iou_threshold) {
  if (ground_truth.empty()) return 0.0;
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });

  std::map<std::string, std::vector<std::size_t>> gt_by_image;
  for (std::size_t g = 0; g < ground_truth.size(); ++g) gt_by_image[ground_truth[g].image_id].push_back(g);
  std::vector<bool> claimed(ground_truth.size(), false);

  std::vector<double> precision, recall;
  precision.reserve(order.size());
  recall.reserve(order.size());
  int tp = 0;
  const double total = static_cast<double>(ground_truth.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const ScoredBox& det = detections[order[rank]];
    int best = -1;
    double best_iou = iou_threshold;
    auto it = gt_by_image.find(det.image_id);
    if (it != gt_by_image.end()) {
      for (std::size_t g : it->second) {
        if (claimed[g]) continue;
        const double o = iou(det.box, ground_truth[g].box);
        if (o >= best_iou && (best < 0 || o > best_iou)) {
          best = static_cast<int>(g);
          best_iou = o;
        }
      }
    }
    if (best >= 0) {
      claimed[best] = true;
      ++tp;
    }
    precision.push_back(tp / static_cast<double>(rank + 1));
    recall.push_back(tp / total);
  }
  // precision envelope, then sample at 101 recall points
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto pos = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (pos != recall.end()) sum += precision[static_cast<std::size_t>(pos - recall.begin())];
  }
  return sum / 101.0;
}

EvalResult compute_ap(const std::vector<ScoredBox>& detections,
                      const std::vector<GroundTruthBox>& ground_truth,
                      const std::vector<double>& iou_thresholds) {
  EvalResult result;
  std::map<int, std::vector<GroundTruthBox>> gt_by_class;
  for (const auto& g : ground_truth) gt_by_class[g.label].push_back(g);
  std::map<int, std::vector<ScoredBox>> det_by_class;
  for (const auto& d : detections) det_by_class[d.label].push_back(d);
  if (gt_by_class.empty() || iou_thresholds.empty()) return result;

  std::vector<double> threshold_means(iou_thresholds.size(), 0.0);
  for (const auto& [label, gts] : gt_by_class) {
    const auto& dets = det_by_class[label];
    double class_sum = 0;
    double ap50 = 0;
    for (std::size_t t = 0; t < iou_thresholds.size(); ++t) {
      const double ap = average_precision(dets, gts, iou_thresholds[t]);
      class_sum += ap;
      threshold_means[t] += ap;
      if (std::abs(iou_thresholds[t] - 0.5) < 1e-12) ap50 = ap;
    }
    result.classes.push_back(label);
    result.per_class_ap.push_back(class_sum / static_cast<double>(iou_thresholds.size()));
    // AP50 is always reported, even for a threshold grid that omits 0.5
    if (std::none_of(iou_thresholds.begin(), iou_thresholds.end(),
                     [](double t) { return std::abs(t - 0.5) < 1e-12; }))
      ap50 = average_precision(dets, gts, 0.5);
    result.per_class_ap50.push_back(ap50);
  }
  const double n_classes = static_cast<double>(gt_by_class.size());
  double ap = 0;
  for (double m : threshold_means) ap += m / n_classes;
  result.ap = ap / static_cast<double>(iou_thresholds.size());
  result.ap50 = std::accumulate(result.per_class_ap50.begin(), result.per_class_ap50.end(), 0.0) / n_classes;
  return result;
}

double EvalResult::mean_ap50_over(const std::vector<int>& labels) const {
  double sum = 0;
  int n = 0;
  for (int l : labels) {
    auto it = std::find(classes.begin(), classes.end(), l);
    if (it == classes.end()) continue;
    sum += per_class_ap50[static_cast<std::size_t>(it - classes.begin())];
    ++n;
  }
  return n ? sum / n : 0.0;
}

double EvalResult::mean_ap_over(const std::vector<int>& labels) const {
  double sum = 0;
  int n = 0;
  for (int l : labels) {
    auto it = std::find(classes.begin(), classes.end(), l);
    if (it == classes.end()) continue;
    sum += per_class_ap[static_cast<std::size_t>(it - classes.begin())];
    ++n;
  }
  return n ? sum / n : 0.0;
}

std::vector<double> compute_recall_at_k(const std::vector<PhrasePrediction>& predictions,
                                        const std::vector<std::vector<Box>>& gold,
                                        const std::vector<int>& ks, double iou_threshold) {
  if (predictions.size() != gold.size())
    throw Error(ErrorCode::InvalidArgument, "recall@k: one prediction list per gold phrase");
  std::vector<double> out(ks.size(), 0.0);
  if (gold.empty()) return out;
  for (std::size_t p = 0; p < gold.size(); ++p) {
    // rank of the first hit, or past the end
    std::size_t first_hit = predictions[p].ranked_boxes.size();
    for (std::size_t r = 0; r < predictions[p].ranked_boxes.size() && first_hit == predictions[p].ranked_boxes.size(); ++r) {
      for (const Box& g : gold[p]) {
        if (iou(predictions[p].ranked_boxes[r], g) >= iou_threshold) {
          first_hit = r;
          break;
        }
      }
    }
    for (std::size_t k = 0; k < ks.size(); ++k)
      if (first_hit < predictions[p].ranked_boxes.size() && static_cast<int>(first_hit) < ks[k]) out[k] += 1.0;
  }
  for (double& v : out) v /= static_cast<double>(gold.size());
  return out;
}

}  // namespace glip
