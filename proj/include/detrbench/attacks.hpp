#pragma once

#include "detrbench/detector.hpp"
#include "detrbench/errors.hpp"
#include "detrbench/losses.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace detrbench {

enum class AttackKind { Fgsm, Pgd, Cw, Ours };

std::string attack_kind_name(AttackKind kind);
/// Throws InputError for an unknown name.
AttackKind parse_attack_kind(const std::string& name);

struct AttackConfig {
  AttackKind kind = AttackKind::Pgd;
  double epsilon = 0.03;          // fgsm/pgd step
  double radius = 10.0 / 255.0;   // pgd L-inf bound
  int steps = 10;
  double c = 0.8;
  double kappa = 0.0;
  double alpha = 0.3;             // ours, stage-1 scale
  LossWeights weights;
  double optimizer_rate = 0.01;
  std::uint64_t rng_seed = 0;

  HingeForm hinge = HingeForm::Untargeted;
  bool signed_stage1 = false;
  bool freeze_matching = false;
  // Plateau test for cw/ours: stop once the best total has not improved by
  // more than patience_tolerance (relative) for `patience` steps.
  int patience = 20;
  double patience_tolerance = 1e-4;

  void validate() const;
  bool operator==(const AttackConfig&) const = default;
};

/// Defaults per kind: fgsm eps 0.03; pgd eps 0.03, 10 steps; cw c 3, 200
/// steps; ours alpha 0.3, c 0.8, 200 steps.
AttackConfig default_attack_config(AttackKind kind);

struct AdversarialResult {
  Image x_adv;
  double l2 = 0.0;    // against the clean image
  double linf = 0.0;
  std::vector<LossBreakdown> loss_trace;
  bool converged = true;
  int steps_used = 0;
};

/// Non-finite loss during cw/ours. Carries the trace up to the failure.
class AttackAborted : public NumericError {
 public:
  AttackAborted(const NumericError& cause, AdversarialResult partial)
      : NumericError(cause.term(), std::string("attack aborted: ") + cause.what()), partial_(std::move(partial)) {}
  const AdversarialResult& partial() const { return partial_; }

 private:
  AdversarialResult partial_;
};

/// x = (tanh(w) + 1) / 2 and its inverse on clip(x, delta, 1 - delta).
Image tanh_space_to_pixels(const std::vector<double>& w, int height, int width);
std::vector<double> pixels_to_tanh_space(const Image& x, double delta = 1e-6);

/// clip(x + eps * sign(grad J_cls), 0, 1), one gradient evaluation.
AdversarialResult fgsm(const DetectorModel& model, const ImageSample& sample, double epsilon);

/// Signed ascent on J_cls with step eps, projected onto the L-inf ball of
/// `radius` around x and clipped to [0,1] after every step. No random start.
AdversarialResult pgd(const DetectorModel& model, const ImageSample& sample, double epsilon, double radius,
                      int steps);

/// tanh change of variables, Adam on w, objective ||x_adv - x||^2 + c f(x_adv).
/// Returns the lowest-total iterate.
AdversarialResult cw(const DetectorModel& model, const ImageSample& sample, const AttackConfig& config);

/// Stage 1: x~ = clip(x + alpha * grad J_cls). Stage 2: C&W-style
/// optimization of the weighted total loss with x_ref = x~.
AdversarialResult our_attack(const DetectorModel& model, const ImageSample& sample, const AttackConfig& config);

/// Stage-1 reference image of our_attack.
Image our_attack_stage1(const DetectorModel& model, const ImageSample& sample, const AttackConfig& config);

AdversarialResult run_attack(const DetectorModel& model, const ImageSample& sample, const AttackConfig& config);

struct GridSearchResult {
  LossWeights best;
  std::vector<LossWeights> grid;  // in evaluation order (lexicographic)
  std::vector<double> mean_ap;
  std::vector<double> mean_l2;
  bool budget_met = true;
};

/// Runs `base` (kind ours) with every weight vector of the grid on the
/// calibration samples; picks the lowest adversarial AP among points whose
/// mean L2 stays within `l2_budget` (default: radius * sqrt(pixel count)).
/// Ties go to the lexicographically first point. When no point meets the
/// budget the lowest mean L2 wins.
GridSearchResult grid_search_weights(const DetectorModel& model, const std::vector<ImageSample>& calibration,
                                     const std::vector<LossWeights>& grid, const AttackConfig& base,
                                     double score_threshold = 0.05, std::optional<double> l2_budget = std::nullopt);

}  // namespace detrbench
