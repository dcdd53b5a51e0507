#pragma once

#include "detrbench/types.hpp"

#include <utility>
#include <vector>

namespace detrbench {

struct MatchAssignment {
  std::vector<std::pair<int, int>> pairs;  // (query_index, gt_index), sorted by gt index
  double total_cost = 0.0;
};

/// Minimum-cost assignment for a Q x M cost matrix (rows are queries). Every
/// ground-truth column is matched when Q >= M; otherwise every query row is.
/// Throws InputError on non-finite entries.
MatchAssignment hungarian_match(const Mat& cost);

/// Weights of the three matching terms: -p(class), L1 over the four box
/// coordinates, and 1 - GIoU.
struct MatchCostWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
};

/// Q x M matching cost of one output layer against ground truth (M >= 1).
Mat match_cost(const Mat& logits, const Mat& boxes_raw, const GroundTruth& gt,
               const MatchCostWeights& weights = {});

/// One assignment per output layer (index 0 = final head, then decoder layers)
/// against the non-ignored ground-truth objects.
std::vector<MatchAssignment> match_layers(const DetectorOutputs& outputs, const GroundTruth& gt,
                                          const MatchCostWeights& weights = {});

}  // namespace detrbench
