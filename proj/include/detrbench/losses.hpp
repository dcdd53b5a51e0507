#pragma once

#include "detrbench/detector.hpp"
#include "detrbench/matching.hpp"
#include "detrbench/types.hpp"

#include <array>
#include <optional>
#include <vector>

namespace detrbench {

/// GIoU of two (cx, cy, w, h) boxes, in (-1, 1]. Throws InputError for a
/// zero-area box.
double giou(const Box& a, const Box& b);

struct GiouGradient {
  double value = 0.0;
  std::array<double, 4> d_first{};  // d GIoU / d (cx, cy, w, h) of the first box
};
GiouGradient giou_with_gradient(const Box& a, const Box& b);

/// Value plus gradient with respect to every head. All three set losses read
/// ground truth through active_objects(), so ignore regions never count.
struct LossValue {
  double value = 0.0;
  HeadGradients grad;
};

/// `matchings` holds one assignment per output layer as produced by
/// match_layers(). Unmatched queries target the no-object class with weight
/// `no_object_weight`; each layer's CE is the weighted mean over queries.
LossValue classification_loss(const DetectorOutputs& outputs, const GroundTruth& gt,
                              const std::vector<MatchAssignment>& matchings, double no_object_weight = 0.1);

/// Mean |sigmoid(raw) - target| over matched pairs and coordinates, summed
/// over layers. Zero when there is no ground truth.
LossValue box_l1_loss(const DetectorOutputs& outputs, const GroundTruth& gt,
                      const std::vector<MatchAssignment>& matchings);

/// Mean (1 - GIoU) over matched pairs, summed over layers.
LossValue giou_loss(const DetectorOutputs& outputs, const GroundTruth& gt,
                    const std::vector<MatchAssignment>& matchings);

/// Weights of the four attack-loss components.
struct LossWeights {
  double distance = 1.0;  // w1 * Loss_dm
  double cls = 1.0;       // w2 * Loss_cls
  double bbox = 1.0;      // w3 * Loss_bb
  double iou = 1.0;       // w4 * Loss_iou

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double loss_dm = 0.0;
  double loss_cls = 0.0;
  double loss_bb = 0.0;
  double loss_iou = 0.0;
  double total = 0.0;
};

/// Hinge orientation for the classification term. Untargeted pushes the
/// ground-truth logit below the best other logit; Literal keeps the printed
/// targeted form for ablation.
enum class HingeForm { Untargeted, Literal };

struct AttackLossOptions {
  LossWeights weights;
  double c = 0.8;
  double kappa = 0.0;
  HingeForm hinge = HingeForm::Untargeted;
};

/// c * mean over final-layer matched queries of max(P_t - max_{j != t} P_j, -kappa)
/// on raw logits (P_j runs over every other logit, no-object included).
LossValue hinge_loss(const DetectorOutputs& outputs, const GroundTruth& gt, const MatchAssignment& final_matching,
                     double c, double kappa, HingeForm form = HingeForm::Untargeted);

struct AttackLossResult {
  LossBreakdown breakdown;
  HeadGradients head_grad;
  Image pixel_grad;  // d total / d x_adv through the distance term
};

/// Loss_total = w1 ||x_adv - x_ref||^2 + w2 c f(x_adv) - w3 J_bb - w4 J_iou.
AttackLossResult total_attack_loss(const Image& x_adv, const Image& x_ref, const DetectorOutputs& outputs,
                                   const GroundTruth& gt, const AttackLossOptions& options,
                                   const std::vector<MatchAssignment>& matchings);

// LossSpec adapters. Matching is recomputed from the outputs handed to the
// spec unless `frozen` is set.

LossSpec classification_loss_spec(const GroundTruth& gt, double no_object_weight = 0.1,
                                  std::optional<std::vector<MatchAssignment>> frozen = std::nullopt);
LossSpec box_l1_loss_spec(const GroundTruth& gt, std::optional<std::vector<MatchAssignment>> frozen = std::nullopt);
LossSpec giou_loss_spec(const GroundTruth& gt, std::optional<std::vector<MatchAssignment>> frozen = std::nullopt);
LossSpec attack_loss_spec(const Image& x_ref, const GroundTruth& gt, const AttackLossOptions& options,
                          std::optional<std::vector<MatchAssignment>> frozen = std::nullopt);
/// Multiplies another spec's value and gradients by `factor`.
LossSpec scaled_loss_spec(LossSpec inner, double factor);

}  // namespace detrbench
