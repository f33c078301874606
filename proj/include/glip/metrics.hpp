// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "glip/box.hpp"

namespace glip {

struct ScoredBox {
  std::string image_id;
  int label = 0;
  Box box;
  double score = 0;
};

struct GroundTruthBox {
  std::string image_id;
  int label = 0;
  Box box;
};

/// 0.50:0.05:0.95
std::vector<double> coco_iou_thresholds();

struct EvalResult {
  double ap = 0;    // mean over IoU thresholds of the class-mean AP
  double ap50 = 0;  // class-mean AP at IoU 0.5 (NaN-free: 0 when no classes)
  std::vector<int> classes;            // labels that have ground truth
  std::vector<double> per_class_ap;    // aligned with `classes`
  std::vector<double> per_class_ap50;  // aligned with `classes`
  double recall_at_1 = 0, recall_at_5 = 0, recall_at_10 = 0;

  /// AP50 averaged over the listed labels that have ground truth.
  double mean_ap50_over(const std::vector<int>& labels) const;
  double mean_ap_over(const std::vector<int>& labels) const;
};

/// 101-point interpolated AP for one class at one IoU threshold. Detections
/// are taken in descending score (input order breaks ties); each claims the
/// highest-IoU unclaimed ground truth of its image at or above the threshold.
double average_precision(const std::vector<ScoredBox>& detections,
                         const std::vector<GroundTruthBox>& ground_truth, double iou_threshold);

/// Per class and threshold AP, averaged over classes then thresholds.
/// Classes without ground truth are excluded.
EvalResult compute_ap(const std::vector<ScoredBox>& detections,
                      const std::vector<GroundTruthBox>& ground_truth,
                      const std::vector<double>& iou_thresholds = coco_iou_thresholds());

/// Ranked boxes predicted for one phrase, best first.
struct PhrasePrediction {
  std::vector<Box> ranked_boxes;
};

/// Any-box protocol: a phrase is recalled at k if any of its top-k boxes
/// reaches `iou` with any of its gold boxes. Mean over phrases, one value per k.
std::vector<double> compute_recall_at_k(const std::vector<PhrasePrediction>& predictions,
                                        const std::vector<std::vector<Box>>& gold,
                                        const std::vector<int>& ks = {1, 5, 10}, double iou = 0.5);

}  // namespace glip
