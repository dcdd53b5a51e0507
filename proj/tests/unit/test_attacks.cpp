#include "detrbench/attacks.hpp"
#include "detrbench/datasets.hpp"
#include "detrbench/errors.hpp"
#include "detrbench/toy_detector.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace detrbench;

namespace {

const ToyDetector& model() {
  static const ToyDetector m([] {
    ToyDetectorConfig c;
    c.rng_seed = 5;
    return c;
  }());
  return m;
}

const DatasetHandle& data() {
  static const DatasetHandle ds = generate_synthetic_dataset(23, 6);
  return ds;
}

// Relabels every object with a class that no query currently prefers, so the
// hinge sits at its floor from the start.
ImageSample misclassified(const DetectorModel& m, const ImageSample& s) {
  const DetectorOutputs out = m.forward(s.pixels);
  for (int c = 0; c < m.num_classes(); ++c) {
    bool beaten = true;
    for (Eigen::Index q = 0; q < out.final_logits.rows(); ++q) {
      Eigen::Index arg = 0;
      out.final_logits.row(q).maxCoeff(&arg);
      if (arg == c) beaten = false;
    }
    if (!beaten) continue;
    ImageSample r = s;
    for (auto& k : r.ground_truth.classes) k = c;
    return r;
  }
  FAIL("no class is beaten at every query");
  return s;
}

double sgn(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

// Reports NaN from the fourth gradient call on.
class FlakyModel final : public DetectorModel {
 public:
  int num_classes() const override { return 3; }
  int num_queries() const override { return 2; }
  int num_decoder_layers() const override { return 1; }
  int input_height() const override { return 4; }
  int input_width() const override { return 4; }
  DetectorOutputs forward(const Image& pixels) const override {
    check_pixels(pixels);
    DetectorOutputs o;
    o.final_logits = Mat::Zero(2, 4);
    o.final_logits(0, 0) = pixels.data[0] * 4.0;
    o.final_boxes_raw = Mat::Zero(2, 4);
    o.aux_logits = {o.final_logits};
    o.aux_boxes_raw = {o.final_boxes_raw};
    o.encoder_attention = Mat::Constant(1, 1, 1.0);
    o.feature_height = o.feature_width = 1;
    return o;
  }
  GradientResult input_gradient(const Image& pixels, const LossSpec& loss) const override {
    GradientResult r;
    r.outputs = forward(pixels);
    r.evaluation = loss(pixels, r.outputs);
    if (++calls_ > 3) r.evaluation.value = std::numeric_limits<double>::quiet_NaN();
    r.loss = r.evaluation.value;
    r.gradient = r.evaluation.pixel_grad.data.empty() ? Image(4, 4, 0.0) : r.evaluation.pixel_grad;
    r.gradient.data[0] += r.evaluation.head_grad.final_logits(0, 0) * 4.0;
    return r;
  }

 private:
  mutable int calls_ = 0;
};

}  // namespace

TEST_CASE("attack kind names") {
  for (AttackKind k : {AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw, AttackKind::Ours})
    CHECK(parse_attack_kind(attack_kind_name(k)) == k);
  CHECK_THROWS_AS(parse_attack_kind("deepfool"), InputError);
}

TEST_CASE("attack config defaults and validation") {
  const AttackConfig pgd_cfg = default_attack_config(AttackKind::Pgd);
  CHECK(pgd_cfg.steps == 10);
  CHECK(pgd_cfg.epsilon == 0.03);
  CHECK(pgd_cfg.radius == 10.0 / 255.0);
  const AttackConfig ours = default_attack_config(AttackKind::Ours);
  CHECK(ours.steps == 200);
  CHECK(ours.alpha == 0.3);
  CHECK(ours.c == 0.8);
  CHECK(ours.kappa == 0.0);
  CHECK(ours.optimizer_rate == 0.01);
  AttackConfig bad = ours;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad = ours;
  bad.epsilon = -0.1;
  CHECK_THROWS_AS(bad.validate(), InputError);
}

TEST_CASE("fgsm: eps 0 is the identity, steps are signed eps") {
  const ImageSample& s = data().samples[0];
  const auto id = fgsm(model(), s, 0.0);
  CHECK(id.x_adv == s.pixels);
  CHECK(id.l2 == 0.0);

  const double eps = 0.05;
  const auto r = fgsm(model(), s, eps);
  const auto g = input_gradient(model(), s.pixels, classification_loss_spec(s.ground_truth));
  std::size_t moved = 0;
  for (std::size_t i = 0; i < s.pixels.size(); ++i) {
    const double step = eps * sgn(g.gradient.data[i]);
    CHECK(r.x_adv.data[i] == std::clamp(s.pixels.data[i] + step, 0.0, 1.0));
    const double d = r.x_adv.data[i] - s.pixels.data[i];
    CHECK(std::abs(d) <= eps + 1e-15);
    const double pre = s.pixels.data[i] + step;
    if (step != 0.0 && pre >= 0.0 && pre <= 1.0) {
      CHECK(std::abs(std::abs(d) - eps) <= 1e-12);
      ++moved;
    }
  }
  CHECK(moved > 0);
  CHECK(r.linf <= eps + 1e-15);
}

TEST_CASE("pgd stays in the L-inf ball and reduces to fgsm with one step") {
  for (const ImageSample& s : data().samples) {
    const auto r = pgd(model(), s, 0.03, 10.0 / 255.0, 10);
    CHECK(r.linf <= 10.0 / 255.0 + 1e-9);
    CHECK(r.steps_used == 10);
    for (double v : r.x_adv.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  const ImageSample& s = data().samples[1];
  CHECK(pgd(model(), s, 0.03, 0.05, 1).x_adv == fgsm(model(), s, 0.03).x_adv);
}

TEST_CASE("tanh change of variables") {
  const Image half = tanh_space_to_pixels(std::vector<double>(12, 0.0), 2, 2);
  for (double v : half.data) CHECK(v == 0.5);
  Image x(2, 2);
  x.data = {0.0, 1.0, 0.25, 0.5, 0.75, 0.1, 0.9, 0.3, 0.6, 0.2, 0.4, 0.8};
  const Image back = tanh_space_to_pixels(pixels_to_tanh_space(x), 2, 2);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(back.data[i] - x.data[i]) <= 1.0000001e-6);
}

TEST_CASE("cw: strictly inside (0,1), best iterate is the trace minimum, misclassified sample stays put") {
  AttackConfig cfg = default_attack_config(AttackKind::Cw);
  cfg.steps = 30;
  const ImageSample& s = data().samples[2];
  const auto r = cw(model(), s, cfg);
  for (double v : r.x_adv.data) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  REQUIRE(!r.loss_trace.empty());
  CHECK(r.loss_trace.size() == static_cast<std::size_t>(r.steps_used));
  double trace_min = std::numeric_limits<double>::infinity();
  for (const auto& b : r.loss_trace) trace_min = std::min(trace_min, b.total);
  AttackLossOptions opt;
  opt.weights = {1.0, 1.0, 0.0, 0.0};
  opt.c = cfg.c;
  const auto at_best = input_gradient(model(), r.x_adv, attack_loss_spec(s.pixels, s.ground_truth, opt));
  CHECK(at_best.loss == trace_min);

  const ImageSample wrong = misclassified(model(), s);
  const auto stay = cw(model(), wrong, default_attack_config(AttackKind::Cw));
  CHECK(stay.l2 <= 1e-3);
}

TEST_CASE("ours: degenerate objective, literal stage 1, determinism") {
  const ImageSample& s = data().samples[3];
  AttackConfig cfg = default_attack_config(AttackKind::Ours);
  cfg.alpha = 0.0;
  cfg.weights = {1.0, 0.0, 0.0, 0.0};
  const auto still = our_attack(model(), s, cfg);
  CHECK(still.l2 <= 1e-3);
  for (double v : still.x_adv.data) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }

  cfg = default_attack_config(AttackKind::Ours);
  const Image stage1 = our_attack_stage1(model(), s, cfg);
  const auto g = input_gradient(model(), s.pixels, classification_loss_spec(s.ground_truth));
  for (std::size_t i = 0; i < stage1.size(); ++i)
    CHECK(stage1.data[i] == std::clamp(s.pixels.data[i] + cfg.alpha * g.gradient.data[i], 0.0, 1.0));

  cfg.steps = 15;
  const auto a = our_attack(model(), s, cfg);
  const auto b = our_attack(model(), s, cfg);
  CHECK(a.x_adv == b.x_adv);
  CHECK(a.l2 == b.l2);
  CHECK(a.loss_trace.size() == b.loss_trace.size());
  for (const auto& t : a.loss_trace)
    CHECK(std::abs(t.total - (t.loss_dm + t.loss_cls + t.loss_bb + t.loss_iou)) <= 1e-6);
}

TEST_CASE("plateau rule stops early with converged = false") {
  // a flat 0.5 image maps to w = 0 exactly, so the distance-only loss is 0 throughout
  ImageSample s = data().samples[4];
  std::fill(s.pixels.data.begin(), s.pixels.data.end(), 0.5);
  AttackConfig cfg = default_attack_config(AttackKind::Ours);
  cfg.alpha = 0.0;
  cfg.weights = {1.0, 0.0, 0.0, 0.0};
  cfg.patience = 5;
  const auto r = our_attack(model(), s, cfg);
  CHECK_FALSE(r.converged);
  CHECK(r.steps_used == cfg.patience + 1);
  CHECK(r.l2 == 0.0);
}

TEST_CASE("non-finite loss aborts with the partial trace") {
  const FlakyModel flaky;
  ImageSample s;
  s.image_id = "flaky";
  s.pixels = Image(4, 4, 0.4);
  s.ground_truth.add(0, {0.5, 0.5, 0.5, 0.5});
  AttackConfig cfg = default_attack_config(AttackKind::Cw);
  try {
    cw(flaky, s, cfg);
    FAIL("expected AttackAborted");
  } catch (const AttackAborted& e) {
    CHECK(e.partial().loss_trace.size() == 3);
    CHECK_FALSE(e.partial().converged);
  }
}

TEST_CASE("grid search") {
  std::vector<ImageSample> calib(data().samples.begin(), data().samples.begin() + 2);
  AttackConfig base = default_attack_config(AttackKind::Ours);
  base.steps = 5;
  const auto one = grid_search_weights(model(), calib, {{1, 1, 0, 1}}, base);
  CHECK(one.best == LossWeights{1, 1, 0, 1});
  const auto two = grid_search_weights(model(), calib, {{1, 1, 1, 1}, {1, 0, 0, 0}}, base, 0.05, 1e9);
  REQUIRE(two.grid.size() == 2);
  CHECK(two.grid[0] == LossWeights{1, 0, 0, 0});
  const auto again = grid_search_weights(model(), calib, {{1, 1, 1, 1}, {1, 0, 0, 0}}, base, 0.05, 1e9);
  CHECK(again.best == two.best);
  CHECK(again.mean_ap == two.mean_ap);
  CHECK(again.mean_l2 == two.mean_l2);
  CHECK_THROWS_AS(grid_search_weights(model(), calib, {}, base), InputError);
}
