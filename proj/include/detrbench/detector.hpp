#pragma once

#include "detrbench/types.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace detrbench {

/// Scalar loss evaluated on detector outputs (and optionally directly on the
/// input pixels). `terms` lists the named components that make up `value`.
struct LossEvaluation {
  double value = 0.0;
  HeadGradients head_grad;
  Image pixel_grad;  // empty when the loss has no direct pixel dependence
  std::vector<std::pair<std::string, double>> terms;
};

using LossSpec = std::function<LossEvaluation(const Image& pixels, const DetectorOutputs& outputs)>;

struct GradientResult {
  double loss = 0.0;
  Image gradient;
  LossEvaluation evaluation;
  DetectorOutputs outputs;
};

/// Detector abstraction consumed by every attack. Implementations are
/// deterministic and never modify their parameters from forward/gradient
/// calls.
class DetectorModel {
 public:
  virtual ~DetectorModel() = default;

  virtual int num_classes() const = 0;
  virtual int num_queries() const = 0;
  virtual int num_decoder_layers() const = 0;
  virtual int input_height() const = 0;
  virtual int input_width() const = 0;

  virtual DetectorOutputs forward(const Image& pixels) const = 0;
  /// d loss / d pixels, pixels in [0,1]. Any input normalization is part of
  /// the differentiated graph.
  virtual GradientResult input_gradient(const Image& pixels, const LossSpec& loss) const = 0;
};

DetectorOutputs forward(const DetectorModel& model, const Image& pixels);

/// Throws NumericError naming the first non-finite term.
GradientResult input_gradient(const DetectorModel& model, const Image& pixels, const LossSpec& loss);

/// One detection per query whose best object-class probability reaches
/// `score_threshold`.
Detections predict(const DetectorModel& model, const Image& pixels, double score_threshold);
Detections detections_from_outputs(const DetectorOutputs& outputs, double score_threshold);

struct AttentionMap {
  Mat raw;       // T x T, rows sum to 1
  int grid_height = 0;
  int grid_width = 0;
  Mat upsampled;  // image height x width: attention received per location
};

AttentionMap extract_encoder_attention(const DetectorModel& model, const Image& pixels);

/// Row-wise softmax of a logit matrix.
Mat softmax_rows(const Mat& logits);
double sigmoid(double v);
Box box_from_raw(const Mat& boxes_raw, Eigen::Index query);

/// Throws InputError unless every value is in [0,1] and the shape is non-empty.
void check_pixels(const Image& pixels);

}  // namespace detrbench
