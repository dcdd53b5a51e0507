#include "detrbench/errors.hpp"
#include "detrbench/losses.hpp"
#include "detrbench/matching.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace detrbench;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

Mat raw_rows(const std::vector<Box>& boxes) {
  Mat m(static_cast<Eigen::Index>(boxes.size()), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) << logit(boxes[i].cx), logit(boxes[i].cy), logit(boxes[i].w), logit(boxes[i].h);
  return m;
}

DetectorOutputs with_layers(const Mat& logits, const Mat& raw, int aux) {
  DetectorOutputs out;
  out.final_logits = logits;
  out.final_boxes_raw = raw;
  for (int i = 0; i < aux; ++i) {
    out.aux_logits.push_back(logits);
    out.aux_boxes_raw.push_back(raw);
  }
  return out;
}

Box xyxy(double x0, double y0, double x1, double y1) { return Box::from_corners(x0, y0, x1, y1); }

}  // namespace

TEST_CASE("giou hand cases") {
  CHECK(std::abs(giou(xyxy(0, 0, 1, 1), xyxy(0, 0, 1, 1)) - 1.0) <= 1e-9);
  CHECK(std::abs(giou(xyxy(0, 0, 1, 1), xyxy(2, 2, 3, 3)) - (-7.0 / 9.0)) <= 1e-9);
  CHECK(std::abs(giou(xyxy(0, 0, 2, 2), xyxy(0, 0, 1, 1)) - 0.25) <= 1e-9);
}

TEST_CASE("giou properties on random boxes") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> c(0.1, 0.9), s(0.02, 0.5);
  for (int i = 0; i < 500; ++i) {
    const Box a{c(rng), c(rng), s(rng), s(rng)};
    const Box b{c(rng), c(rng), s(rng), s(rng)};
    const double g = giou(a, b);
    CHECK(g == doctest::Approx(giou(b, a)).epsilon(1e-12));
    CHECK(g == doctest::Approx(oracle::giou(a, b)).epsilon(1e-12));
    CHECK(g > -1.0);
    CHECK(g <= 1.0);
  }
  // enclosing box equals the union -> GIoU = IoU
  const Box outer{0.5, 0.5, 0.4, 0.4}, inner{0.45, 0.55, 0.1, 0.2};
  CHECK(giou(outer, inner) == doctest::Approx(oracle::iou(outer, inner)).epsilon(1e-12));
}

TEST_CASE("giou rejects degenerate boxes") {
  CHECK_THROWS_AS(giou({0.5, 0.5, 0.0, 0.2}, {0.5, 0.5, 0.1, 0.1}), InputError);
  CHECK_THROWS_AS(giou({0.5, 0.5, 0.1, 0.1}, {0.5, 0.5, 0.1, 0.0}), InputError);
}

TEST_CASE("giou gradient matches finite differences") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> c(0.2, 0.8), s(0.05, 0.4);
  for (int i = 0; i < 50; ++i) {
    const Box a{c(rng), c(rng), s(rng), s(rng)};
    const Box b{c(rng), c(rng), s(rng), s(rng)};
    const auto gg = giou_with_gradient(a, b);
    CHECK(gg.value == doctest::Approx(giou(a, b)).epsilon(1e-12));
    for (int k = 0; k < 4; ++k) {
      Box p = a, m = a;
      const double h = 1e-6;
      (&p.cx)[k] += h;
      (&m.cx)[k] -= h;
      const double fd = (giou(p, b) - giou(m, b)) / (2 * h);
      CHECK(gg.d_first[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
    }
  }
}

TEST_CASE("giou loss: single pair at -7/9 gives 16/9, perfect gives 0") {
  GroundTruth gt;
  gt.add(0, xyxy(0.0, 0.0, 0.25, 0.25));
  const Mat logits = Mat::Zero(1, 4);
  const auto far = with_layers(logits, raw_rows({xyxy(0.5, 0.5, 0.75, 0.75)}), 0);
  const auto m = match_layers(far, gt);
  CHECK(giou_loss(far, gt, m).value == doctest::Approx(16.0 / 9.0).epsilon(1e-9));

  GroundTruth gt2;
  gt2.add(1, {0.5, 0.4, 0.2, 0.3});
  const auto exact = with_layers(logits, raw_rows({gt2.boxes[0]}), 2);
  CHECK(std::abs(giou_loss(exact, gt2, match_layers(exact, gt2)).value) < 1e-12);
  CHECK(std::abs(box_l1_loss(exact, gt2, match_layers(exact, gt2)).value) < 1e-12);
}

TEST_CASE("giou loss decreases as the box slides toward a disjoint target") {
  GroundTruth gt;
  gt.add(0, {0.75, 0.5, 0.2, 0.2});
  double prev = 1e9;
  for (int i = 0; i <= 20; ++i) {
    const double cx = 0.15 + 0.02 * i;  // stays disjoint until cx reaches 0.55
    const auto out = with_layers(Mat::Zero(1, 4), raw_rows({{cx, 0.3, 0.2, 0.2}}), 0);
    const double v = giou_loss(out, gt, match_layers(out, gt)).value;
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("box L1: +0.1 on every coordinate gives 0.1 and aux layers add") {
  GroundTruth gt;
  gt.add(2, {0.4, 0.4, 0.2, 0.2});
  const Mat raw = raw_rows({{0.5, 0.5, 0.3, 0.3}});
  const auto one = with_layers(Mat::Zero(1, 4), raw, 0);
  CHECK(box_l1_loss(one, gt, match_layers(one, gt)).value == doctest::Approx(0.1).epsilon(1e-9));
  const auto two = with_layers(Mat::Zero(1, 4), raw, 2);
  const auto four = with_layers(Mat::Zero(1, 4), raw, 4);
  const double aux2 = box_l1_loss(two, gt, match_layers(two, gt)).value - 0.1;
  const double aux4 = box_l1_loss(four, gt, match_layers(four, gt)).value - 0.1;
  CHECK(aux4 == doctest::Approx(2 * aux2).epsilon(1e-12));
}

TEST_CASE("empty ground truth: box terms vanish, CE pushes to no-object") {
  GroundTruth gt;
  const auto out = with_layers(Mat::Zero(3, 4), Mat::Zero(3, 4), 2);
  const auto m = match_layers(out, gt);
  CHECK(box_l1_loss(out, gt, m).value == 0.0);
  CHECK(giou_loss(out, gt, m).value == 0.0);
  const auto ce = classification_loss(out, gt, m);
  CHECK(ce.value == doctest::Approx(3 * std::log(4.0)).epsilon(1e-12));
  // gradient lowers the other logits and raises no-object
  CHECK(ce.grad.final_logits(0, 3) < 0);
  CHECK(ce.grad.final_logits(0, 0) > 0);
}

TEST_CASE("classification loss: optimum, uniform logits, summation over layers") {
  GroundTruth gt;
  gt.add(1, {0.3, 0.6, 0.2, 0.2});
  Mat logits = Mat::Zero(3, 4);
  logits(0, 1) = 20.0;  // matched query, correct class
  logits(1, 3) = 20.0;  // unmatched queries, no-object
  logits(2, 3) = 20.0;
  Mat raw = raw_rows({gt.boxes[0], {0.7, 0.7, 0.1, 0.1}, {0.2, 0.2, 0.1, 0.1}});
  const auto good = with_layers(logits, raw, 2);
  CHECK(classification_loss(good, gt, match_layers(good, gt)).value < 1e-3);

  const auto uniform = with_layers(Mat::Zero(1, 4), raw.topRows(1), 0);
  CHECK(classification_loss(uniform, gt, match_layers(uniform, gt)).value ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Mat mixed(3, 4);
  mixed << 0.3, 1.2, -0.5, 0.1, 0.7, -0.2, 0.4, 0.9, -1.0, 0.5, 0.2, 0.0;
  const auto single = with_layers(mixed, raw, 0);
  const auto triple = with_layers(mixed, raw, 2);
  const double one = classification_loss(single, gt, match_layers(single, gt)).value;
  const double three = classification_loss(triple, gt, match_layers(triple, gt)).value;
  CHECK(std::abs(three - 3 * one) < 1e-6);
}

TEST_CASE("classification loss weights unmatched queries by no_object_weight") {
  GroundTruth gt;
  gt.add(0, {0.5, 0.5, 0.2, 0.2});
  Mat logits(2, 4);
  logits << 1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.2;
  const Mat raw = raw_rows({gt.boxes[0], {0.2, 0.2, 0.1, 0.1}});
  const auto out = with_layers(logits, raw, 0);
  const auto m = match_layers(out, gt);
  REQUIRE(m[0].pairs == std::vector<std::pair<int, int>>{{0, 0}});
  auto ce = [](const Eigen::RowVectorXd& l, int t) { return std::log(l.array().exp().sum()) - l(t); };
  const double expected = (ce(logits.row(0), 0) + 0.1 * ce(logits.row(1), 3)) / 1.1;
  CHECK(classification_loss(out, gt, m, 0.1).value == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("total attack loss: hand-built single-query case") {
  Image ref(1, 1), adv(1, 1);
  ref.data = {0.5, 0.5, 0.5};
  adv.data = {0.6, 0.3, 0.5};
  GroundTruth gt;
  gt.add(0, xyxy(0.2, 0.2, 0.6, 0.6));
  Mat logits(1, 4);
  logits << 2.0, 0.5, 1.0, 0.0;
  const auto out = with_layers(logits, raw_rows({xyxy(0.3, 0.2, 0.7, 0.6)}), 0);
  AttackLossOptions opt;
  opt.weights = {1.0, 2.0, 3.0, 4.0};
  opt.c = 0.8;
  const auto r = total_attack_loss(adv, ref, out, gt, opt, match_layers(out, gt));
  // dm = 0.1^2 + 0.2^2; f = 2 - 1; J_bb = 0.1 / 4; J_iou = 1 - 0.6
  CHECK(r.breakdown.loss_dm == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(r.breakdown.loss_cls == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(r.breakdown.loss_bb == doctest::Approx(-0.025).epsilon(1e-12));
  CHECK(r.breakdown.loss_iou == doctest::Approx(-0.4).epsilon(1e-12));
  CHECK(r.breakdown.total == doctest::Approx(0.05 + 1.6 - 0.075 - 1.6).epsilon(1e-12));
  // distance gradient is 2 (x_adv - x_ref)
  CHECK(r.pixel_grad.data[0] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(r.pixel_grad.data[1] == doctest::Approx(-0.4).epsilon(1e-12));
}

TEST_CASE("total attack loss: masked terms, identity distance, hinge floor") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  std::uniform_real_distribution<double> u(0.0, 1.0), c(0.2, 0.8), s(0.05, 0.3);
  for (int trial = 0; trial < 50; ++trial) {
    Image ref(2, 2), adv(2, 2);
    for (auto& v : ref.data) v = u(rng);
    for (auto& v : adv.data) v = u(rng);
    GroundTruth gt;
    gt.add(trial % 3, {c(rng), c(rng), s(rng), s(rng)});
    gt.add((trial + 1) % 3, {c(rng), c(rng), s(rng), s(rng)});
    Mat logits(4, 4), raw(4, 4);
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      logits.data()[i] = n(rng);
      raw.data()[i] = n(rng) * 0.5;
    }
    const auto out = with_layers(logits, raw, 2);
    const auto m = match_layers(out, gt);

    AttackLossOptions opt;
    opt.weights = {u(rng), u(rng), u(rng), u(rng)};
    const auto r = total_attack_loss(adv, ref, out, gt, opt, m);
    const auto& b = r.breakdown;
    CHECK(std::abs(b.total - (opt.weights.distance * b.loss_dm + opt.weights.cls * b.loss_cls +
                              opt.weights.bbox * b.loss_bb + opt.weights.iou * b.loss_iou)) < 1e-6);
    CHECK(b.loss_cls >= 0.0);
    CHECK(b.loss_bb <= 0.0);
    CHECK(b.loss_iou <= 0.0);

    AttackLossOptions dm_only;
    dm_only.weights = {1.0, 0.0, 0.0, 0.0};
    const auto d = total_attack_loss(adv, ref, out, gt, dm_only, m);
    CHECK(d.breakdown.total == d.breakdown.loss_dm);
    CHECK(total_attack_loss(ref, ref, out, gt, opt, m).breakdown.loss_dm == 0.0);

    AttackLossOptions floor = opt;
    floor.kappa = 0.5;
    const auto f = total_attack_loss(adv, ref, out, gt, floor, m);
    CHECK(f.breakdown.loss_cls >= -floor.c * floor.kappa - 1e-15);
  }
}

TEST_CASE("hinge forms") {
  GroundTruth gt;
  gt.add(1, {0.5, 0.5, 0.2, 0.2});
  Mat logits(1, 4);
  logits << 0.5, 3.0, 1.0, 2.5;
  const auto out = with_layers(logits, raw_rows({gt.boxes[0]}), 0);
  const auto m = match_layers(out, gt);
  // untargeted: P_t - max other = 3 - 2.5
  CHECK(hinge_loss(out, gt, m[0], 2.0, 0.0).value == doctest::Approx(1.0).epsilon(1e-12));
  // literal printed form: max(max other - P_t, -kappa) clamps at 0
  CHECK(hinge_loss(out, gt, m[0], 2.0, 0.0, HingeForm::Literal).value == 0.0);
  CHECK(hinge_loss(out, gt, m[0], 2.0, 1.0, HingeForm::Literal).value == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("loss weights validation") {
  CHECK_THROWS_AS((LossWeights{0, 0, 0, 0}.validate()), InputError);
  CHECK_THROWS_AS((LossWeights{-1, 1, 1, 1}.validate()), InputError);
  CHECK_NOTHROW((LossWeights{0, 0, 0, 1}.validate()));
}
