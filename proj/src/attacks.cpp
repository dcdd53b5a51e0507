#include "detrbench/attacks.hpp"

#include "detrbench/errors.hpp"
#include "detrbench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace detrbench {

std::string attack_kind_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::Pgd: return "pgd";
    case AttackKind::Cw: return "cw";
    case AttackKind::Ours: return "ours";
  }
  return "unknown";
}

AttackKind parse_attack_kind(const std::string& name) {
  for (AttackKind k : {AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw, AttackKind::Ours})
    if (attack_kind_name(k) == name) return k;
  throw InputError("unknown attack '" + name + "' (expected fgsm, pgd, cw or ours)");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0)) throw InputError("attack epsilon must be >= 0");
  if (!(radius >= 0)) throw InputError("attack radius must be >= 0");
  if (steps < 1) throw InputError("attack steps must be >= 1");
  if (!(c >= 0)) throw InputError("attack c must be >= 0");
  if (!(alpha >= 0)) throw InputError("attack alpha must be >= 0");
  if (!(optimizer_rate > 0)) throw InputError("optimizer rate must be > 0");
  if (patience < 1) throw InputError("patience must be >= 1");
  weights.validate();
}

AttackConfig default_attack_config(AttackKind kind) {
  AttackConfig c;
  c.kind = kind;
  switch (kind) {
    case AttackKind::Fgsm:
      c.steps = 1;
      break;
    case AttackKind::Pgd:
      c.steps = 10;
      break;
    case AttackKind::Cw:
      c.steps = 200;
      c.c = 3.0;
      c.weights = {1.0, 1.0, 0.0, 0.0};
      break;
    case AttackKind::Ours:
      c.steps = 200;
      c.c = 0.8;
      break;
  }
  return c;
}

Image tanh_space_to_pixels(const std::vector<double>& w, int height, int width) {
  Image x(height, width);
  if (w.size() != x.size()) throw InputError("tanh_space_to_pixels: size mismatch");
  for (std::size_t i = 0; i < w.size(); ++i) x.data[i] = 0.5 * (std::tanh(w[i]) + 1.0);
  return x;
}

std::vector<double> pixels_to_tanh_space(const Image& x, double delta) {
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::atanh(2.0 * std::clamp(x.data[i], delta, 1.0 - delta) - 1.0);
  return w;
}

namespace {

void finish(AdversarialResult& r, const Image& x) {
  const PerturbationStats s = perturbation_stats(x, r.x_adv);
  r.l2 = s.l2;
  r.linf = s.linf;
}

std::optional<std::vector<MatchAssignment>> frozen_matching(const DetectorModel& model, const ImageSample& sample,
                                                            bool freeze) {
  if (!freeze) return std::nullopt;
  return match_layers(model.forward(sample.pixels), sample.ground_truth);
}

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

LossBreakdown ce_breakdown(double j) {
  LossBreakdown b;
  b.loss_cls = j;
  b.total = j;
  return b;
}

LossBreakdown breakdown_from_terms(const LossEvaluation& e) {
  LossBreakdown b;
  for (const auto& [name, v] : e.terms) {
    if (name == "loss_dm") b.loss_dm = v;
    else if (name == "loss_cls") b.loss_cls = v;
    else if (name == "loss_bb") b.loss_bb = v;
    else if (name == "loss_iou") b.loss_iou = v;
  }
  b.total = e.value;
  return b;
}

// Shared stage-2 / C&W optimizer: Adam on w with x_adv = (tanh(w) + 1) / 2.
AdversarialResult optimize_tanh(const DetectorModel& model, const ImageSample& sample, const Image& x_ref,
                                const AttackConfig& config, const AttackLossOptions& options) {
  const std::size_t n = x_ref.size();
  std::vector<double> w = pixels_to_tanh_space(x_ref), m1(n, 0.0), m2(n, 0.0);

  const LossSpec spec = attack_loss_spec(x_ref, sample.ground_truth, options,
                                         frozen_matching(model, sample, config.freeze_matching));
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  AdversarialResult r;
  r.converged = true;
  double best = std::numeric_limits<double>::infinity();
  double plateau_ref = best;
  int since_improvement = 0;
  Image x(x_ref.height, x_ref.width);

  for (int step = 0; step < config.steps; ++step) {
    for (std::size_t i = 0; i < n; ++i) x.data[i] = 0.5 * (std::tanh(w[i]) + 1.0);
    GradientResult g;
    try {
      g = input_gradient(model, x, spec);
    } catch (const NumericError& e) {
      r.converged = false;
      r.steps_used = step;
      if (!r.x_adv.data.empty()) finish(r, sample.pixels);
      throw AttackAborted(e, r);
    }
    r.loss_trace.push_back(breakdown_from_terms(g.evaluation));
    r.steps_used = step + 1;
    if (g.loss < best) {
      best = g.loss;
      r.x_adv = x;
    }
    if (step == 0 || g.loss < plateau_ref - config.patience_tolerance * std::abs(plateau_ref)) {
      plateau_ref = g.loss;
      since_improvement = 0;
    } else if (++since_improvement >= config.patience) {
      r.converged = false;
      break;
    }
    if (step + 1 == config.steps) break;

    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < n; ++i) {
      const double th = std::tanh(w[i]);
      const double gw = g.gradient.data[i] * 0.5 * (1.0 - th * th);
      m1[i] = beta1 * m1[i] + (1.0 - beta1) * gw;
      m2[i] = beta2 * m2[i] + (1.0 - beta2) * gw * gw;
      w[i] -= config.optimizer_rate * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + eps);
    }
  }
  finish(r, sample.pixels);
  return r;
}

}  // namespace

AdversarialResult fgsm(const DetectorModel& model, const ImageSample& sample, double epsilon) {
  if (!(epsilon >= 0)) throw InputError("fgsm: epsilon must be >= 0");
  check_pixels(sample.pixels);
  const GradientResult g = input_gradient(model, sample.pixels, classification_loss_spec(sample.ground_truth));
  AdversarialResult r;
  r.x_adv = sample.pixels;
  for (std::size_t i = 0; i < r.x_adv.size(); ++i)
    r.x_adv.data[i] = std::clamp(sample.pixels.data[i] + epsilon * sign(g.gradient.data[i]), 0.0, 1.0);
  r.loss_trace.push_back(ce_breakdown(g.loss));
  r.steps_used = 1;
  finish(r, sample.pixels);
  return r;
}

AdversarialResult pgd(const DetectorModel& model, const ImageSample& sample, double epsilon, double radius,
                      int steps) {
  if (!(epsilon >= 0) || !(radius >= 0) || steps < 1) throw InputError("pgd: need epsilon, radius >= 0 and steps >= 1");
  check_pixels(sample.pixels);
  const Image& x = sample.pixels;
  const LossSpec spec = classification_loss_spec(sample.ground_truth);
  AdversarialResult r;
  r.x_adv = x;
  for (int step = 0; step < steps; ++step) {
    const GradientResult g = input_gradient(model, r.x_adv, spec);
    r.loss_trace.push_back(ce_breakdown(g.loss));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double stepped = r.x_adv.data[i] + epsilon * sign(g.gradient.data[i]);
      const double projected = std::clamp(stepped, x.data[i] - radius, x.data[i] + radius);
      r.x_adv.data[i] = std::clamp(projected, 0.0, 1.0);
    }
  }
  r.steps_used = steps;
  finish(r, x);
  return r;
}

AdversarialResult cw(const DetectorModel& model, const ImageSample& sample, const AttackConfig& config) {
  config.validate();
  check_pixels(sample.pixels);
  AttackLossOptions options;
  options.weights = {1.0, 1.0, 0.0, 0.0};
  options.c = config.c;
  options.kappa = config.kappa;
  options.hinge = config.hinge;
  return optimize_tanh(model, sample, sample.pixels, config, options);
}

Image our_attack_stage1(const DetectorModel& model, const ImageSample& sample, const AttackConfig& config) {
  check_pixels(sample.pixels);
  if (config.alpha == 0.0) return sample.pixels;
  const GradientResult g = input_gradient(model, sample.pixels, classification_loss_spec(sample.ground_truth));
  Image out = sample.pixels;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = config.signed_stage1 ? sign(g.gradient.data[i]) : g.gradient.data[i];
    out.data[i] = std::clamp(out.data[i] + config.alpha * d, 0.0, 1.0);
  }
  return out;
}

AdversarialResult our_attack(const DetectorModel& model, const ImageSample& sample, const AttackConfig& config) {
  config.validate();
  const Image x_ref = our_attack_stage1(model, sample, config);
  AttackLossOptions options;
  options.weights = config.weights;
  options.c = config.c;
  options.kappa = config.kappa;
  options.hinge = config.hinge;
  return optimize_tanh(model, sample, x_ref, config, options);
}

AdversarialResult run_attack(const DetectorModel& model, const ImageSample& sample, const AttackConfig& config) {
  config.validate();
  switch (config.kind) {
    case AttackKind::Fgsm: return fgsm(model, sample, config.epsilon);
    case AttackKind::Pgd: return pgd(model, sample, config.epsilon, config.radius, config.steps);
    case AttackKind::Cw: return cw(model, sample, config);
    case AttackKind::Ours: return our_attack(model, sample, config);
  }
  throw InputError("unknown attack kind");
}

GridSearchResult grid_search_weights(const DetectorModel& model, const std::vector<ImageSample>& calibration,
                                     const std::vector<LossWeights>& grid, const AttackConfig& base,
                                     double score_threshold, std::optional<double> l2_budget) {
  if (grid.empty()) throw InputError("grid_search_weights: empty grid");
  if (calibration.empty()) throw InputError("grid_search_weights: empty calibration set");
  GridSearchResult out;
  out.grid = grid;
  auto key = [](const LossWeights& w) { return std::tuple(w.distance, w.cls, w.bbox, w.iou); };
  std::stable_sort(out.grid.begin(), out.grid.end(),
                   [&](const LossWeights& a, const LossWeights& b) { return key(a) < key(b); });

  const std::size_t numel = calibration.front().pixels.size();
  const double budget = l2_budget.value_or(base.radius * std::sqrt(static_cast<double>(numel)));

  std::vector<GroundTruth> gts;
  for (const ImageSample& s : calibration) gts.push_back(s.ground_truth);
  for (const LossWeights& w : out.grid) {
    AttackConfig cfg = base;
    cfg.kind = AttackKind::Ours;
    cfg.weights = w;
    std::vector<Detections> dets;
    double l2 = 0.0;
    for (const ImageSample& s : calibration) {
      const AdversarialResult r = our_attack(model, s, cfg);
      l2 += r.l2;
      dets.push_back(predict(model, r.x_adv, score_threshold));
    }
    out.mean_ap.push_back(evaluate_detections(dets, gts).ap);
    out.mean_l2.push_back(l2 / static_cast<double>(calibration.size()));
  }

  std::size_t best = out.grid.size();
  for (std::size_t i = 0; i < out.grid.size(); ++i)
    if (out.mean_l2[i] <= budget && (best == out.grid.size() || out.mean_ap[i] < out.mean_ap[best])) best = i;
  if (best == out.grid.size()) {
    out.budget_met = false;
    best = static_cast<std::size_t>(std::min_element(out.mean_l2.begin(), out.mean_l2.end()) - out.mean_l2.begin());
  }
  out.best = out.grid[best];
  return out;
}

}  // namespace detrbench
