#include "detrbench/detector.hpp"

#include "detrbench/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace detrbench {

namespace {

bool finite(const Mat& m) { return m.allFinite(); }

void check_finite_grad(const LossEvaluation& e) {
  auto bad = [](const std::string& what) {
    throw NumericError(what, "non-finite gradient in " + what);
  };
  if (!finite(e.head_grad.final_logits) || !finite(e.head_grad.final_boxes_raw)) bad("head_grad.final");
  for (const Mat& m : e.head_grad.aux_logits)
    if (!finite(m)) bad("head_grad.aux_logits");
  for (const Mat& m : e.head_grad.aux_boxes_raw)
    if (!finite(m)) bad("head_grad.aux_boxes");
}

}  // namespace

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Mat softmax_rows(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Box box_from_raw(const Mat& boxes_raw, Eigen::Index q) {
  return {sigmoid(boxes_raw(q, 0)), sigmoid(boxes_raw(q, 1)), sigmoid(boxes_raw(q, 2)), sigmoid(boxes_raw(q, 3))};
}

void check_pixels(const Image& pixels) {
  if (pixels.height < 1 || pixels.width < 1) throw InputError("image must have H >= 1 and W >= 1");
  if (pixels.size() != static_cast<std::size_t>(pixels.height) * pixels.width * Image::channels)
    throw InputError("image buffer size does not match H x W x 3");
  for (double v : pixels.data)
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("pixel value outside [0,1]");
}

DetectorOutputs forward(const DetectorModel& model, const Image& pixels) { return model.forward(pixels); }

GradientResult input_gradient(const DetectorModel& model, const Image& pixels, const LossSpec& loss) {
  GradientResult r = model.input_gradient(pixels, loss);
  for (const auto& [name, v] : r.evaluation.terms)
    if (!std::isfinite(v)) throw NumericError(name, "non-finite loss term '" + name + "'");
  if (!std::isfinite(r.loss)) throw NumericError("total", "non-finite loss");
  check_finite_grad(r.evaluation);
  for (double g : r.gradient.data)
    if (!std::isfinite(g)) throw NumericError("input_gradient", "non-finite input gradient");
  return r;
}

Detections detections_from_outputs(const DetectorOutputs& outputs, double score_threshold) {
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0))
    throw InputError("score threshold must lie in [0,1]");
  const Mat probs = softmax_rows(outputs.final_logits);
  const Eigen::Index num_object_classes = probs.cols() - 1;
  Detections dets;
  for (Eigen::Index q = 0; q < probs.rows(); ++q) {
    Eigen::Index best = 0;
    const double score = probs.row(q).head(num_object_classes).maxCoeff(&best);
    if (score >= score_threshold)
      dets.push_back({static_cast<int>(best), score, box_from_raw(outputs.final_boxes_raw, q)});
  }
  return dets;
}

Detections predict(const DetectorModel& model, const Image& pixels, double score_threshold) {
  return detections_from_outputs(model.forward(pixels), score_threshold);
}

AttentionMap extract_encoder_attention(const DetectorModel& model, const Image& pixels) {
  const DetectorOutputs out = model.forward(pixels);
  AttentionMap map;
  map.raw = out.encoder_attention;
  map.grid_height = out.feature_height;
  map.grid_width = out.feature_width;

  // Attention received by each source location, averaged over queries.
  const Eigen::RowVectorXd received = map.raw.colwise().mean();
  const int gh = map.grid_height;
  const int gw = map.grid_width;
  auto cell = [&](int y, int x) { return received(static_cast<Eigen::Index>(y) * gw + x); };

  map.upsampled = Mat(pixels.height, pixels.width);
  for (int y = 0; y < pixels.height; ++y) {
    const double fy = std::clamp((y + 0.5) * gh / pixels.height - 0.5, 0.0, gh - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, gh - 1);
    const double ty = fy - y0;
    for (int x = 0; x < pixels.width; ++x) {
      const double fx = std::clamp((x + 0.5) * gw / pixels.width - 0.5, 0.0, gw - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, gw - 1);
      const double tx = fx - x0;
      map.upsampled(y, x) = (1 - ty) * ((1 - tx) * cell(y0, x0) + tx * cell(y0, x1)) +
                            ty * ((1 - tx) * cell(y1, x0) + tx * cell(y1, x1));
    }
  }
  return map;
}

}  // namespace detrbench
