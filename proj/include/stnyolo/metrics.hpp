#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "stnyolo/box.hpp"

namespace stnyolo {

/// Greedy matching of one image's detections against its ground truth.
/// Entries are indexed like the input detections.
struct MatchResult {
  std::vector<bool> is_tp;
  std::vector<int> matched_gt;  // -1 for false positives
  int false_negatives = 0;
  Real iou_thresh = 0.5;

  int true_positives() const;
  int false_positives() const;
};

/// In descending score order (ties: input order) each detection takes the
/// highest-IoU unmatched ground truth of its class with IoU >= iou_thresh.
MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<BBox>& gts, Real iou_thresh);

struct PrecisionRecall {
  Real precision = 1.0;
  Real recall = 1.0;
};

/// P = TP / (TP + FP), 1 with no detections; R = TP / (TP + FN), 1 with no ground truth.
PrecisionRecall precision_recall(const MatchResult& m);
PrecisionRecall precision_recall(int tp, int fp, int fn);

using ImageDetections = std::vector<std::vector<Detection>>;
using ImageBoxes = std::vector<std::vector<BBox>>;

/// COCO-style 101-point interpolated AP over all images, all classes pooled.
/// 0 when detections exist without ground truth, 1 when both are empty.
Real average_precision(const ImageDetections& dets, const ImageBoxes& gts, Real iou_thresh);

/// Same, restricted to one class.
Real average_precision(const ImageDetections& dets, const ImageBoxes& gts, Real iou_thresh, int class_id);

struct ClassMetrics {
  int class_id = 0;
  int n_gt = 0;
  int n_det = 0;
  Real precision = 1.0;
  Real recall = 1.0;
  Real ap50 = 0.0;
  Real ap50_95 = 0.0;

  bool operator==(const ClassMetrics&) const = default;
};

struct MetricsReport {
  Real precision = 1.0;
  Real recall = 1.0;
  Real map50 = 1.0;
  Real map50_95 = 1.0;
  std::vector<ClassMetrics> per_class;
  int true_positives = 0;
  int false_positives = 0;
  int false_negatives = 0;
  int n_images = 0;
  int n_gt = 0;
  int n_det = 0;
  Real conf_thresh = 0.25;

  bool operator==(const MetricsReport&) const = default;
};

/// Precision / recall at conf_thresh and IoU 0.5, mAP@0.5 and mAP@0.5:0.95
/// (thresholds 0.50, 0.55, ..., 0.95), all macro-averaged over the classes
/// that have ground truth or detections. Throws ValueError for a class id
/// outside [0, n_classes).
MetricsReport evaluate_detections(const ImageDetections& dets, const ImageBoxes& gts, int n_classes,
                                  Real conf_thresh);

nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

/// Aligned plain-text table: Precision, Recall, mAP@0.5, mAP@0.5:0.95 in percent.
std::string format_report_table(const MetricsReport& report, const std::string& label = "model");

}  // namespace stnyolo
