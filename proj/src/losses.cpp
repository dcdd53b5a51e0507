#include "detrbench/losses.hpp"

#include "detrbench/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace detrbench {

namespace {

void require_positive_area(const Box& b) {
  if (!(b.w > 0.0 && b.h > 0.0)) throw InputError("giou: degenerate box with non-positive width or height");
}

double sigmoid_derivative_from_value(double s) { return s * (1.0 - s); }

std::vector<MatchAssignment> matchings_for(const DetectorOutputs& out, const GroundTruth& gt,
                                           const std::optional<std::vector<MatchAssignment>>& frozen) {
  if (frozen) {
    if (frozen->size() != out.layer_count()) throw InputError("frozen matching does not cover every output layer");
    return *frozen;
  }
  return match_layers(out, gt);
}

LossEvaluation to_evaluation(LossValue v, const char* name) {
  LossEvaluation e;
  e.value = v.value;
  e.head_grad = std::move(v.grad);
  e.terms.emplace_back(name, e.value);
  return e;
}

}  // namespace

GiouGradient giou_with_gradient(const Box& a, const Box& b) {
  require_positive_area(a);
  require_positive_area(b);

  struct Axis {
    double inter = 0, d_inter_lo = 0, d_inter_hi = 0;
    double enclose = 0, d_encl_lo = 0, d_encl_hi = 0;
  };
  auto axis = [](double alo, double ahi, double blo, double bhi) {
    Axis r;
    const double lo = std::max(alo, blo);
    const double hi = std::min(ahi, bhi);
    if (hi > lo) {
      r.inter = hi - lo;
      r.d_inter_lo = (alo >= blo) ? -1.0 : 0.0;
      r.d_inter_hi = (ahi <= bhi) ? 1.0 : 0.0;
    }
    r.enclose = std::max(ahi, bhi) - std::min(alo, blo);
    r.d_encl_lo = (alo <= blo) ? -1.0 : 0.0;
    r.d_encl_hi = (ahi >= bhi) ? 1.0 : 0.0;
    return r;
  };
  const Axis x = axis(a.x0(), a.x1(), b.x0(), b.x1());
  const Axis y = axis(a.y0(), a.y1(), b.y0(), b.y1());

  const double inter = x.inter * y.inter;
  const double area_a = a.w * a.h;
  const double uni = area_a + b.w * b.h - inter;
  const double encl = x.enclose * y.enclose;

  GiouGradient r;
  r.value = inter / uni - (encl - uni) / encl;

  const double g_inter = (uni + inter) / (uni * uni) - 1.0 / encl;
  const double g_area = -inter / (uni * uni) + 1.0 / encl;
  const double g_encl = -uni / (encl * encl);

  // Corner derivatives, then map corners to (centre, extent).
  const double dx_lo = g_inter * y.inter * x.d_inter_lo + g_encl * y.enclose * x.d_encl_lo;
  const double dx_hi = g_inter * y.inter * x.d_inter_hi + g_encl * y.enclose * x.d_encl_hi;
  const double dy_lo = g_inter * x.inter * y.d_inter_lo + g_encl * x.enclose * y.d_encl_lo;
  const double dy_hi = g_inter * x.inter * y.d_inter_hi + g_encl * x.enclose * y.d_encl_hi;

  r.d_first[0] = dx_lo + dx_hi;
  r.d_first[1] = dy_lo + dy_hi;
  r.d_first[2] = 0.5 * (dx_hi - dx_lo) + g_area * a.h;
  r.d_first[3] = 0.5 * (dy_hi - dy_lo) + g_area * a.w;
  return r;
}

double giou(const Box& a, const Box& b) { return giou_with_gradient(a, b).value; }

LossValue classification_loss(const DetectorOutputs& outputs, const GroundTruth& gt,
                              const std::vector<MatchAssignment>& matchings, double no_object_weight) {
  if (matchings.size() != outputs.layer_count()) throw InputError("classification_loss: one matching per layer required");
  const GroundTruth active = active_objects(gt);
  LossValue r{0.0, HeadGradients::zeros_like(outputs)};
  for (std::size_t l = 0; l < outputs.layer_count(); ++l) {
    const Mat& logits = outputs.logits(l);
    const Eigen::Index nq = logits.rows();
    const int no_object = static_cast<int>(logits.cols()) - 1;
    std::vector<int> target(nq, no_object);
    std::vector<double> weight(nq, no_object_weight);
    for (const auto& [q, g] : matchings[l].pairs) {
      target[q] = active.classes[g];
      weight[q] = 1.0;
    }
    double wsum = 0.0;
    for (double w : weight) wsum += w;
    if (wsum <= 0.0) continue;

    const Mat probs = softmax_rows(logits);
    Mat& grad = r.grad.logits(l);
    double layer = 0.0;
    for (Eigen::Index q = 0; q < nq; ++q) {
      const double mx = logits.row(q).maxCoeff();
      const double lse = mx + std::log((logits.row(q).array() - mx).exp().sum());
      layer += weight[q] * (lse - logits(q, target[q]));
      grad.row(q) = probs.row(q) * (weight[q] / wsum);
      grad(q, target[q]) -= weight[q] / wsum;
    }
    r.value += layer / wsum;
  }
  return r;
}

LossValue box_l1_loss(const DetectorOutputs& outputs, const GroundTruth& gt,
                      const std::vector<MatchAssignment>& matchings) {
  if (matchings.size() != outputs.layer_count()) throw InputError("box_l1_loss: one matching per layer required");
  const GroundTruth active = active_objects(gt);
  LossValue r{0.0, HeadGradients::zeros_like(outputs)};
  for (std::size_t l = 0; l < outputs.layer_count(); ++l) {
    const auto& pairs = matchings[l].pairs;
    if (pairs.empty()) continue;
    const double norm = 1.0 / (4.0 * static_cast<double>(pairs.size()));
    const Mat& raw = outputs.boxes_raw(l);
    Mat& grad = r.grad.boxes_raw(l);
    for (const auto& [q, g] : pairs) {
      const Box& t = active.boxes[g];
      const double target[4] = {t.cx, t.cy, t.w, t.h};
      for (int k = 0; k < 4; ++k) {
        const double s = sigmoid(raw(q, k));
        const double diff = s - target[k];
        r.value += std::abs(diff) * norm;
        const double sign = (diff > 0.0) - (diff < 0.0);
        grad(q, k) += sign * norm * sigmoid_derivative_from_value(s);
      }
    }
  }
  return r;
}

LossValue giou_loss(const DetectorOutputs& outputs, const GroundTruth& gt,
                    const std::vector<MatchAssignment>& matchings) {
  if (matchings.size() != outputs.layer_count()) throw InputError("giou_loss: one matching per layer required");
  const GroundTruth active = active_objects(gt);
  LossValue r{0.0, HeadGradients::zeros_like(outputs)};
  for (std::size_t l = 0; l < outputs.layer_count(); ++l) {
    const auto& pairs = matchings[l].pairs;
    if (pairs.empty()) continue;
    const double norm = 1.0 / static_cast<double>(pairs.size());
    const Mat& raw = outputs.boxes_raw(l);
    Mat& grad = r.grad.boxes_raw(l);
    for (const auto& [q, g] : pairs) {
      const Box pred = box_from_raw(raw, q);
      const GiouGradient gg = giou_with_gradient(pred, active.boxes[g]);
      r.value += (1.0 - gg.value) * norm;
      const double s[4] = {pred.cx, pred.cy, pred.w, pred.h};
      for (int k = 0; k < 4; ++k) grad(q, k) -= gg.d_first[k] * norm * sigmoid_derivative_from_value(s[k]);
    }
  }
  return r;
}

void LossWeights::validate() const {
  if (distance < 0 || cls < 0 || bbox < 0 || iou < 0) throw InputError("loss weights must be non-negative");
  if (distance == 0 && cls == 0 && bbox == 0 && iou == 0) throw InputError("at least one loss weight must be positive");
}

LossValue hinge_loss(const DetectorOutputs& outputs, const GroundTruth& gt, const MatchAssignment& final_matching,
                     double c, double kappa, HingeForm form) {
  const GroundTruth active = active_objects(gt);
  LossValue r{0.0, HeadGradients::zeros_like(outputs)};
  const auto& pairs = final_matching.pairs;
  if (pairs.empty()) return r;
  const Mat& logits = outputs.final_logits;
  const double norm = c / static_cast<double>(pairs.size());
  for (const auto& [q, g] : pairs) {
    const int t = active.classes[g];
    Eigen::Index best_other = -1;
    double other = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      if (j == t) continue;
      if (logits(q, j) > other) {
        other = logits(q, j);
        best_other = j;
      }
    }
    const double margin = form == HingeForm::Untargeted ? logits(q, t) - other : other - logits(q, t);
    if (margin > -kappa) {
      r.value += margin * norm;
      const double sign = form == HingeForm::Untargeted ? 1.0 : -1.0;
      r.grad.final_logits(q, t) += sign * norm;
      r.grad.final_logits(q, best_other) -= sign * norm;
    } else {
      r.value += -kappa * norm;
    }
  }
  return r;
}

AttackLossResult total_attack_loss(const Image& x_adv, const Image& x_ref, const DetectorOutputs& outputs,
                                   const GroundTruth& gt, const AttackLossOptions& options,
                                   const std::vector<MatchAssignment>& matchings) {
  if (!x_adv.same_shape(x_ref) || x_adv.size() != x_ref.size())
    throw InputError("total_attack_loss: x_adv and x_ref differ in shape");
  const LossWeights& w = options.weights;
  AttackLossResult r;
  r.pixel_grad = Image(x_adv.height, x_adv.width, 0.0);
  for (std::size_t i = 0; i < x_adv.size(); ++i) {
    const double d = x_adv.data[i] - x_ref.data[i];
    r.breakdown.loss_dm += d * d;
    r.pixel_grad.data[i] = 2.0 * w.distance * d;
  }

  r.head_grad = HeadGradients::zeros_like(outputs);
  const LossValue cls = hinge_loss(outputs, gt, matchings.at(0), options.c, options.kappa, options.hinge);
  r.breakdown.loss_cls = cls.value;
  r.head_grad.add_scaled(cls.grad, w.cls);

  const LossValue bb = box_l1_loss(outputs, gt, matchings);
  r.breakdown.loss_bb = -bb.value;
  r.head_grad.add_scaled(bb.grad, -w.bbox);
  const LossValue iou = giou_loss(outputs, gt, matchings);
  r.breakdown.loss_iou = -iou.value;
  r.head_grad.add_scaled(iou.grad, -w.iou);

  const LossBreakdown& b = r.breakdown;
  r.breakdown.total = w.distance * b.loss_dm + w.cls * b.loss_cls + w.bbox * b.loss_bb + w.iou * b.loss_iou;
  return r;
}

LossSpec classification_loss_spec(const GroundTruth& gt, double no_object_weight,
                                  std::optional<std::vector<MatchAssignment>> frozen) {
  return [gt, no_object_weight, frozen](const Image&, const DetectorOutputs& out) {
    return to_evaluation(classification_loss(out, gt, matchings_for(out, gt, frozen), no_object_weight), "J_cls");
  };
}

LossSpec box_l1_loss_spec(const GroundTruth& gt, std::optional<std::vector<MatchAssignment>> frozen) {
  return [gt, frozen](const Image&, const DetectorOutputs& out) {
    return to_evaluation(box_l1_loss(out, gt, matchings_for(out, gt, frozen)), "J_bb");
  };
}

LossSpec giou_loss_spec(const GroundTruth& gt, std::optional<std::vector<MatchAssignment>> frozen) {
  return [gt, frozen](const Image&, const DetectorOutputs& out) {
    return to_evaluation(giou_loss(out, gt, matchings_for(out, gt, frozen)), "J_iou");
  };
}

LossSpec attack_loss_spec(const Image& x_ref, const GroundTruth& gt, const AttackLossOptions& options,
                          std::optional<std::vector<MatchAssignment>> frozen) {
  return [x_ref, gt, options, frozen](const Image& pixels, const DetectorOutputs& out) {
    AttackLossResult r = total_attack_loss(pixels, x_ref, out, gt, options, matchings_for(out, gt, frozen));
    LossEvaluation e;
    e.value = r.breakdown.total;
    e.head_grad = std::move(r.head_grad);
    e.pixel_grad = std::move(r.pixel_grad);
    e.terms = {{"loss_dm", r.breakdown.loss_dm},
               {"loss_cls", r.breakdown.loss_cls},
               {"loss_bb", r.breakdown.loss_bb},
               {"loss_iou", r.breakdown.loss_iou},
               {"total", r.breakdown.total}};
    return e;
  };
}

LossSpec scaled_loss_spec(LossSpec inner, double factor) {
  return [inner = std::move(inner), factor](const Image& pixels, const DetectorOutputs& out) {
    LossEvaluation e = inner(pixels, out);
    e.value *= factor;
    if (e.head_grad.final_logits.size() != 0) {
      HeadGradients scaled = HeadGradients::zeros_like(out);
      scaled.add_scaled(e.head_grad, factor);
      e.head_grad = std::move(scaled);
    }
    for (double& v : e.pixel_grad.data) v *= factor;
    for (auto& [name, v] : e.terms) v *= factor;
    return e;
  };
}

}  // namespace detrbench
