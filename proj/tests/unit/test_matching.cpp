#include "detrbench/errors.hpp"
#include "detrbench/matching.hpp"
#include "detrbench/losses.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

using namespace detrbench;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

Mat raw_row(const Box& b) {
  Mat m(1, 4);
  m << logit(b.cx), logit(b.cy), logit(b.w), logit(b.h);
  return m;
}

}  // namespace

TEST_CASE("hungarian: diagonal-zero 3x3") {
  Mat c = Mat::Ones(3, 3);
  c.diagonal().setZero();
  const auto a = hungarian_match(c);
  CHECK(a.total_cost == 0.0);
  REQUIRE(a.pairs.size() == 3);
  for (const auto& [q, g] : a.pairs) CHECK(q == g);
}

TEST_CASE("hungarian: [[1,2],[2,1]]") {
  Mat c(2, 2);
  c << 1, 2, 2, 1;
  const auto a = hungarian_match(c);
  CHECK(a.total_cost == 2.0);
  CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
}

TEST_CASE("hungarian equals brute force on random rectangular matrices") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 7);
  std::uniform_real_distribution<double> val(-3.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int q = dim(rng), m = dim(rng);
    Mat c(q, m);
    std::vector<std::vector<double>> plain(q, std::vector<double>(m));
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < m; ++j) c(i, j) = plain[i][j] = val(rng);
    const auto a = hungarian_match(c);
    CHECK(a.total_cost == doctest::Approx(oracle::brute_force_assignment(plain)).epsilon(1e-12));
    CHECK(a.pairs.size() == static_cast<std::size_t>(std::min(q, m)));
    std::set<int> qs, gs;
    double sum = 0;
    for (const auto& [qi, gi] : a.pairs) {
      qs.insert(qi);
      gs.insert(gi);
      sum += c(qi, gi);
    }
    CHECK(qs.size() == a.pairs.size());
    CHECK(gs.size() == a.pairs.size());
    CHECK(sum == doctest::Approx(a.total_cost).epsilon(1e-12));
  }
}

TEST_CASE("hungarian rejects non-finite costs") {
  Mat c = Mat::Zero(2, 2);
  c(1, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(hungarian_match(c), InputError);
  c(1, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(hungarian_match(c), InputError);
}

TEST_CASE("match_cost: perfect query costs -1") {
  GroundTruth gt;
  gt.add(1, {0.4, 0.5, 0.2, 0.3});
  Mat logits = Mat::Constant(1, 4, -1000.0);
  logits(0, 1) = 1000.0;
  const Mat cost = match_cost(logits, raw_row(gt.boxes[0]), gt);
  CHECK(cost(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("match_cost: identical queries give identical rows") {
  GroundTruth gt;
  gt.add(0, {0.3, 0.3, 0.2, 0.2});
  gt.add(2, {0.7, 0.6, 0.3, 0.1});
  Mat logits(2, 4);
  logits << 0.1, -0.3, 0.8, 0.2, 0.1, -0.3, 0.8, 0.2;
  Mat raw(2, 4);
  raw << 0.2, -0.1, -1.0, -1.2, 0.2, -0.1, -1.0, -1.2;
  const Mat cost = match_cost(logits, raw, gt);
  CHECK(cost.row(0) == cost.row(1));
}

TEST_CASE("match_cost: hand-built 2-query / 1-object case") {
  GroundTruth gt;
  gt.add(0, Box::from_corners(0.2, 0.2, 0.6, 0.6));
  // query 0: logits (ln 3, 0, 0, 0) -> p(class 0) = 3/6; box shifted right by 0.1
  // query 1: uniform logits -> p = 1/4; box twice as tall, same top
  Mat logits(2, 4);
  logits << std::log(3.0), 0, 0, 0, 0, 0, 0, 0;
  Mat raw(2, 4);
  raw.row(0) = raw_row(Box::from_corners(0.3, 0.2, 0.7, 0.6));
  raw.row(1) = raw_row(Box::from_corners(0.2, 0.2, 0.6, 1.0));
  const Mat cost = match_cost(logits, raw, gt);
  // q0: L1 = |0.5 - 0.4| = 0.1; inter 0.3*0.4 = 0.12, union 0.2, hull 0.5*0.4 = 0.2 -> giou 0.6
  const double c0 = -0.5 + 5 * 0.1 + 2 * (1 - 0.6);
  // q1: L1 = |0.6 - 0.4| + |0.8 - 0.4| = 0.6; iou 0.16 / 0.32 = 0.5, hull = union
  const double c1 = -0.25 + 5 * 0.6 + 2 * (1 - 0.5);
  CHECK(cost(0, 0) == doctest::Approx(c0).epsilon(1e-9));
  CHECK(cost(1, 0) == doctest::Approx(c1).epsilon(1e-9));
  const auto a = hungarian_match(cost);
  CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}});
}

TEST_CASE("match_layers skips ignored ground truth") {
  GroundTruth gt;
  gt.add(0, {0.3, 0.3, 0.2, 0.2}, true);
  DetectorOutputs out;
  out.final_logits = Mat::Zero(3, 4);
  out.final_boxes_raw = Mat::Zero(3, 4);
  out.aux_logits = {Mat::Zero(3, 4)};
  out.aux_boxes_raw = {Mat::Zero(3, 4)};
  const auto m = match_layers(out, gt);
  REQUIRE(m.size() == 2);
  CHECK(m[0].pairs.empty());
  CHECK(m[1].pairs.empty());
}
