#include "detrbench/matching.hpp"

#include "detrbench/detector.hpp"
#include "detrbench/errors.hpp"
#include "detrbench/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace detrbench {

namespace {

// Shortest augmenting path Hungarian method for an n x m matrix with n <= m.
// Returns the column assigned to each row.
std::vector<int> assign_rows(const Mat& a) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(a.cols());
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace

MatchAssignment hungarian_match(const Mat& cost) {
  if (!cost.allFinite()) throw InputError("hungarian_match: cost matrix has non-finite entries");
  MatchAssignment result;
  if (cost.rows() == 0 || cost.cols() == 0) return result;

  if (cost.cols() <= cost.rows()) {
    // Ground-truth objects are the rows of the transposed problem.
    const Mat t = cost.transpose();
    const std::vector<int> gt_to_query = assign_rows(t);
    for (int g = 0; g < static_cast<int>(gt_to_query.size()); ++g) result.pairs.emplace_back(gt_to_query[g], g);
  } else {
    const std::vector<int> query_to_gt = assign_rows(cost);
    for (int q = 0; q < static_cast<int>(query_to_gt.size()); ++q) result.pairs.emplace_back(q, query_to_gt[q]);
    std::sort(result.pairs.begin(), result.pairs.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
  }
  for (const auto& [q, g] : result.pairs) result.total_cost += cost(q, g);
  return result;
}

Mat match_cost(const Mat& logits, const Mat& boxes_raw, const GroundTruth& gt, const MatchCostWeights& w) {
  const Eigen::Index nq = logits.rows();
  const auto ng = static_cast<Eigen::Index>(gt.size());
  const Mat probs = softmax_rows(logits);
  Mat cost(nq, ng);
  for (Eigen::Index q = 0; q < nq; ++q) {
    const Box pred = box_from_raw(boxes_raw, q);
    for (Eigen::Index g = 0; g < ng; ++g) {
      const Box& t = gt.boxes[g];
      const double l1 = std::abs(pred.cx - t.cx) + std::abs(pred.cy - t.cy) + std::abs(pred.w - t.w) +
                        std::abs(pred.h - t.h);
      cost(q, g) = -w.cls * probs(q, gt.classes[g]) + w.l1 * l1 + w.giou * (1.0 - giou(pred, t));
    }
  }
  return cost;
}

std::vector<MatchAssignment> match_layers(const DetectorOutputs& outputs, const GroundTruth& gt,
                                          const MatchCostWeights& weights) {
  const GroundTruth active = active_objects(gt);
  std::vector<MatchAssignment> out;
  out.reserve(outputs.layer_count());
  for (std::size_t l = 0; l < outputs.layer_count(); ++l) {
    if (active.size() == 0) {
      out.emplace_back();
      continue;
    }
    out.push_back(hungarian_match(match_cost(outputs.logits(l), outputs.boxes_raw(l), active, weights)));
  }
  return out;
}

}  // namespace detrbench
