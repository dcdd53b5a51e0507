#include "detrbench/metrics.hpp"

#include "detrbench/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace detrbench {

std::array<double, kIouThresholdCount> iou_thresholds() {
  std::array<double, kIouThresholdCount> t{};
  for (int i = 0; i < kIouThresholdCount; ++i) t[i] = 0.5 + 0.05 * i;
  return t;
}

namespace {

double intersection(const Box& a, const Box& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  return iw > 0 && ih > 0 ? iw * ih : 0.0;
}

// Overlap with an ignore region is measured against the detection's own
// area, so a detection lying inside the region overlaps it fully.
double overlap(const Box& det, const Box& gt, bool gt_ignored) {
  const double inter = intersection(det, gt);
  const double denom = gt_ignored ? det.w * det.h : det.w * det.h + gt.w * gt.h - inter;
  return denom > 0 ? inter / denom : 0.0;
}

struct Scored {
  double score;
  bool tp;
  bool ignored;
};

}  // namespace

double box_iou(const Box& a, const Box& b) { return overlap(a, b, false); }

EvalReport evaluate_detections(const std::vector<Detections>& detections,
                               const std::vector<GroundTruth>& ground_truths) {
  if (detections.size() != ground_truths.size())
    throw InputError("evaluate_detections: detection and ground-truth lists differ in length");

  std::set<int> classes;
  for (const GroundTruth& gt : ground_truths)
    for (std::size_t k = 0; k < gt.size(); ++k)
      if (!gt.is_ignored(k)) classes.insert(gt.classes[k]);
  if (classes.empty()) throw UndefinedMetricError("AP is undefined: no ground-truth objects in any image");

  const auto thresholds = iou_thresholds();
  EvalReport report;
  report.n_images = static_cast<int>(detections.size());
  std::array<double, kIouThresholdCount> recall_sum{};

  for (int cls : classes) {
    // Per image: class detections sorted by score (stable), capped at maxDets.
    std::vector<std::vector<Detection>> dets(detections.size());
    std::vector<std::vector<std::size_t>> gt_order(detections.size());
    int n_positive = 0;
    for (std::size_t i = 0; i < detections.size(); ++i) {
      for (const Detection& d : detections[i])
        if (d.cls == cls) dets[i].push_back(d);
      std::stable_sort(dets[i].begin(), dets[i].end(),
                       [](const Detection& a, const Detection& b) { return a.score > b.score; });
      if (dets[i].size() > static_cast<std::size_t>(kMaxDetections)) dets[i].resize(kMaxDetections);
      const GroundTruth& gt = ground_truths[i];
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t k = 0; k < gt.size(); ++k)
          if (gt.classes[k] == cls && gt.is_ignored(k) == (pass == 1)) gt_order[i].push_back(k);
      for (std::size_t k : gt_order[i]) n_positive += gt.is_ignored(k) ? 0 : 1;
    }

    double class_ap = 0.0;
    for (int t = 0; t < kIouThresholdCount; ++t) {
      std::vector<Scored> scored;
      for (std::size_t i = 0; i < detections.size(); ++i) {
        const GroundTruth& gt = ground_truths[i];
        std::vector<bool> taken(gt_order[i].size(), false);
        for (const Detection& d : dets[i]) {
          double best = std::min(thresholds[t], 1.0 - 1e-10);
          int match = -1;
          for (std::size_t g = 0; g < gt_order[i].size(); ++g) {
            const std::size_t k = gt_order[i][g];
            const bool ign = gt.is_ignored(k);
            if (taken[g] && !ign) continue;
            // Once a real object is matched, ignore regions (sorted last) cannot win.
            if (match >= 0 && !gt.is_ignored(gt_order[i][match]) && ign) break;
            const double o = overlap(d.box, gt.boxes[k], ign);
            if (o < best) continue;
            best = o;
            match = static_cast<int>(g);
          }
          if (match < 0) {
            scored.push_back({d.score, false, false});
          } else {
            taken[match] = true;
            scored.push_back({d.score, true, gt.is_ignored(gt_order[i][match])});
          }
        }
      }
      std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });

      std::vector<double> precision, recall;
      double tp = 0, fp = 0;
      for (const Scored& s : scored) {
        if (s.ignored) continue;
        (s.tp ? tp : fp) += 1.0;
        precision.push_back(tp / (tp + fp));
        recall.push_back(tp / n_positive);
      }
      for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
      double ap = 0.0;
      for (int r = 0; r <= 100; ++r) {
        const double level = r / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), level);
        if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
      }
      ap /= 101.0;
      report.per_iou_ap[t] += ap;
      recall_sum[t] += recall.empty() ? 0.0 : recall.back();
      class_ap += ap;
    }
    report.per_class_ap[cls] = class_ap / kIouThresholdCount;
  }

  const double n_classes = static_cast<double>(classes.size());
  double ar = 0.0;
  for (int t = 0; t < kIouThresholdCount; ++t) {
    report.per_iou_ap[t] /= n_classes;
    ar += recall_sum[t] / n_classes;
  }
  report.ap = std::accumulate(report.per_iou_ap.begin(), report.per_iou_ap.end(), 0.0) / kIouThresholdCount;
  report.ar = ar / kIouThresholdCount;
  return report;
}

double robustness_score(double ap_adv, double ap_clean) {
  if (!(ap_clean > 0.0)) throw UndefinedMetricError(fmt::format("RS is undefined for clean AP {}", ap_clean));
  return ap_adv / ap_clean;
}

double transfer_rate(double ap_clean_m, double ap_adv_m, double ap_clean_n, double ap_adv_n) {
  const double denom = ap_clean_n - ap_adv_n;
  if (denom == 0.0)
    throw UndefinedMetricError(fmt::format(
        "TR is undefined: source model clean AP {} equals adversarial AP {}", ap_clean_n, ap_adv_n));
  return (ap_clean_m - ap_adv_m) / denom;
}

PerturbationStats perturbation_stats(const Image& x, const Image& x_adv) {
  if (!x.same_shape(x_adv) || x.size() != x_adv.size()) throw InputError("perturbation_stats: shape mismatch");
  PerturbationStats s;
  double sq = 0.0, abs_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(x_adv.data[i] - x.data[i]);
    sq += d * d;
    abs_sum += d;
    s.linf = std::max(s.linf, d);
  }
  s.l2 = std::sqrt(sq);
  s.mean_abs = x.size() ? abs_sum / static_cast<double>(x.size()) : 0.0;
  return s;
}

std::string serialize_eval_report(const EvalReport& r) {
  std::string out = fmt::format("format = {}\n", kEvalReportFormat);
  out += fmt::format("n_images = {}\n", r.n_images);
  out += fmt::format("ap = {:.17g}\n", r.ap);
  out += fmt::format("ar = {:.17g}\n", r.ar);
  const auto thresholds = iou_thresholds();
  for (int t = 0; t < kIouThresholdCount; ++t)
    out += fmt::format("ap@{:.2f} = {:.17g}\n", thresholds[t], r.per_iou_ap[t]);
  for (const auto& [cls, ap] : r.per_class_ap) out += fmt::format("class_ap.{} = {:.17g}\n", cls, ap);
  return out;
}

EvalReport parse_eval_report(const std::string& text) {
  EvalReport r;
  std::istringstream is(text);
  std::string line;
  bool versioned = false;
  int iou_index = 0;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    try {
      if (key == "format") {
        if (value != kEvalReportFormat) throw LoadError("unsupported eval report format: " + value);
        versioned = true;
      } else if (key == "n_images") {
        r.n_images = std::stoi(value);
      } else if (key == "ap") {
        r.ap = std::stod(value);
      } else if (key == "ar") {
        r.ar = std::stod(value);
      } else if (key.rfind("ap@", 0) == 0 && iou_index < kIouThresholdCount) {
        r.per_iou_ap[iou_index++] = std::stod(value);
      } else if (key.rfind("class_ap.", 0) == 0) {
        r.per_class_ap[std::stoi(key.substr(9))] = std::stod(value);
      }
    } catch (const std::logic_error&) {
      throw LoadError("malformed eval report line: " + line);
    }
  }
  if (!versioned) throw LoadError("eval report lacks a format line");
  return r;
}

}  // namespace detrbench
