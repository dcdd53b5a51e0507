#include "detrbench/types.hpp"

#include "detrbench/errors.hpp"

namespace detrbench {

void GroundTruth::validate() const {
  if (classes.size() != boxes.size()) throw InputError("ground truth: classes and boxes differ in length");
  if (!ignore.empty() && ignore.size() != classes.size())
    throw InputError("ground truth: ignore flags differ in length");
  for (const Box& b : boxes) {
    if (!(b.cx >= 0.0 && b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0))
      throw InputError("ground truth: box centre outside [0,1]");
    if (!(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0))
      throw InputError("ground truth: box extent outside (0,1]");
  }
  for (int c : classes)
    if (c < 0) throw InputError("ground truth: negative class index");
}

GroundTruth active_objects(const GroundTruth& gt) {
  GroundTruth out;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (!gt.is_ignored(i)) out.add(gt.classes[i], gt.boxes[i]);
  return out;
}

HeadGradients HeadGradients::zeros_like(const DetectorOutputs& out) {
  HeadGradients g;
  g.final_logits = Mat::Zero(out.final_logits.rows(), out.final_logits.cols());
  g.final_boxes_raw = Mat::Zero(out.final_boxes_raw.rows(), out.final_boxes_raw.cols());
  for (const Mat& m : out.aux_logits) g.aux_logits.push_back(Mat::Zero(m.rows(), m.cols()));
  for (const Mat& m : out.aux_boxes_raw) g.aux_boxes_raw.push_back(Mat::Zero(m.rows(), m.cols()));
  return g;
}

HeadGradients& HeadGradients::add_scaled(const HeadGradients& other, double scale) {
  final_logits += scale * other.final_logits;
  final_boxes_raw += scale * other.final_boxes_raw;
  for (std::size_t i = 0; i < aux_logits.size(); ++i) aux_logits[i] += scale * other.aux_logits[i];
  for (std::size_t i = 0; i < aux_boxes_raw.size(); ++i) aux_boxes_raw[i] += scale * other.aux_boxes_raw[i];
  return *this;
}

}  // namespace detrbench
