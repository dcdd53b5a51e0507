#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <string>
#include <vector>

namespace detrbench {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Channels-last RGB image with values in [0,1]; element (y, x, c) lives at
/// data[(y * width + x) * 3 + c].
struct Image {
  static constexpr int channels = 3;

  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * channels, fill) {}

  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& other) const {
    return height == other.height && width == other.width;
  }

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool operator==(const Image&) const = default;
};

/// Box in relative (cx, cy, w, h) coordinates.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }

  static Box from_corners(double x0, double y0, double x1, double y1) {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }

  bool operator==(const Box&) const = default;
};

struct GroundTruth {
  std::vector<int> classes;
  std::vector<Box> boxes;
  // Regions marked ignore (KITTI DontCare) never count as TP or FN and are
  // excluded from matching losses.
  std::vector<bool> ignore;

  std::size_t size() const { return classes.size(); }
  bool is_ignored(std::size_t i) const { return i < ignore.size() && ignore[i]; }
  void add(int cls, const Box& box, bool ignored = false) {
    classes.push_back(cls);
    boxes.push_back(box);
    ignore.push_back(ignored);
  }
  /// Throws InputError when an invariant is broken.
  void validate() const;

  bool operator==(const GroundTruth&) const = default;
};

/// Ground truth with ignore regions removed; what matching and losses see.
GroundTruth active_objects(const GroundTruth& gt);

/// Resize applied between the stored image and the tensor the model consumed.
struct ResizeTransform {
  int source_height = 0;
  int source_width = 0;
  int target_height = 0;
  int target_width = 0;
};

struct ImageSample {
  std::string image_id;
  Image pixels;
  GroundTruth ground_truth;
  ResizeTransform resize;
  std::string source_file;  // relative to the dataset image root, when loaded from disk
};

struct Detection {
  int cls = 0;
  double score = 0.0;
  Box box;
};

using Detections = std::vector<Detection>;

/// Raw detector heads. Layer index 0 in the helpers below is the final head;
/// indices 1..N address the per-decoder-layer auxiliary heads.
struct DetectorOutputs {
  Mat final_logits;     // Q x (C+1), last column is no-object
  Mat final_boxes_raw;  // Q x 4, pre-sigmoid
  std::vector<Mat> aux_logits;
  std::vector<Mat> aux_boxes_raw;
  Mat encoder_attention;  // T x T, head-averaged, last encoder layer
  int feature_height = 0;
  int feature_width = 0;

  std::size_t layer_count() const { return 1 + aux_logits.size(); }
  const Mat& logits(std::size_t layer) const { return layer == 0 ? final_logits : aux_logits[layer - 1]; }
  const Mat& boxes_raw(std::size_t layer) const {
    return layer == 0 ? final_boxes_raw : aux_boxes_raw[layer - 1];
  }
};

/// Gradient of a scalar loss with respect to every head of DetectorOutputs.
struct HeadGradients {
  Mat final_logits;
  Mat final_boxes_raw;
  std::vector<Mat> aux_logits;
  std::vector<Mat> aux_boxes_raw;

  static HeadGradients zeros_like(const DetectorOutputs& out);

  Mat& logits(std::size_t layer) { return layer == 0 ? final_logits : aux_logits[layer - 1]; }
  Mat& boxes_raw(std::size_t layer) { return layer == 0 ? final_boxes_raw : aux_boxes_raw[layer - 1]; }

  HeadGradients& add_scaled(const HeadGradients& other, double scale);
};

}  // namespace detrbench
