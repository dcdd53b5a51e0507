#pragma once

#include "detrbench/types.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace detrbench {

inline constexpr int kIouThresholdCount = 10;
/// 0.50, 0.55, ..., 0.95
std::array<double, kIouThresholdCount> iou_thresholds();

inline constexpr int kMaxDetections = 100;

/// Plain IoU of two (cx, cy, w, h) boxes.
double box_iou(const Box& a, const Box& b);

struct EvalReport {
  double ap = 0.0;  // mean of per_iou_ap
  double ar = 0.0;  // maxDets = 100
  std::array<double, kIouThresholdCount> per_iou_ap{};
  std::map<int, double> per_class_ap;  // classes with at least one non-ignored GT
  int n_images = 0;

  bool operator==(const EvalReport&) const = default;
};

/// COCO protocol: per class and IoU threshold, detections are greedily
/// matched in descending score order to the best-IoU unmatched ground truth;
/// precision is made monotone and sampled at 101 recall points. Detections
/// matched to an ignore region count as neither TP nor FP. Classes without
/// any non-ignored ground truth are left out of the means.
/// Throws UndefinedMetricError when no image carries ground truth.
EvalReport evaluate_detections(const std::vector<Detections>& detections,
                               const std::vector<GroundTruth>& ground_truths);

/// ap_adv / ap_clean. Throws UndefinedMetricError when ap_clean <= 0.
double robustness_score(double ap_adv, double ap_clean);

/// (ap_clean_m - ap_adv_m) / (ap_clean_n - ap_adv_n), no clamping.
/// Throws UndefinedMetricError on a zero denominator.
double transfer_rate(double ap_clean_m, double ap_adv_m, double ap_clean_n, double ap_adv_n);

struct PerturbationStats {
  double l2 = 0.0;
  double linf = 0.0;
  double mean_abs = 0.0;
};
PerturbationStats perturbation_stats(const Image& x, const Image& x_adv);

inline constexpr const char* kEvalReportFormat = "detrbench-eval-report/1";
/// Versioned "key = value" text; doubles are written with 17 significant
/// digits so a parse gives back the identical report.
std::string serialize_eval_report(const EvalReport& report);
EvalReport parse_eval_report(const std::string& text);

}  // namespace detrbench
