#pragma once

#include "detrbench/detector.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace detrbench {

/// Desk-scale DETR: strided conv backbone, sinusoidal 2D positions, post-norm
/// encoder/decoder, learned queries, linear class head and 3-layer box MLP
/// shared across decoder layers.
struct ToyDetectorConfig {
  int feature_width = 64;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int queries = 10;
  int num_classes = 3;
  std::uint64_t rng_seed = 0;

  int heads = 4;
  int ffn_width = 128;
  int image_size = 64;
  std::vector<int> backbone_channels = {32, 48, 64, 64};

  /// Throws InputError when a count is < 1 or the geometry is inconsistent.
  void validate() const;
  bool operator==(const ToyDetectorConfig&) const = default;
};

struct NamedParameter {
  std::string name;
  Mat value;
};

class ToyDetector final : public DetectorModel {
 public:
  /// Seeded initialization.
  explicit ToyDetector(const ToyDetectorConfig& config);
  ToyDetector(const ToyDetectorConfig& config, std::vector<NamedParameter> parameters);

  int num_classes() const override { return config_.num_classes; }
  int num_queries() const override { return config_.queries; }
  int num_decoder_layers() const override { return config_.decoder_layers; }
  int input_height() const override { return config_.image_size; }
  int input_width() const override { return config_.image_size; }

  DetectorOutputs forward(const Image& pixels) const override;
  GradientResult input_gradient(const Image& pixels, const LossSpec& loss) const override;

  struct ParameterGradients {
    double loss = 0.0;
    LossEvaluation evaluation;
    std::vector<Mat> grads;  // aligned with parameters()
  };
  ParameterGradients parameter_gradients(const Image& pixels, const LossSpec& loss) const;

  const ToyDetectorConfig& config() const { return config_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::vector<NamedParameter>& mutable_parameters() { return params_; }
  std::size_t parameter_count() const;

 private:
  struct Graph;
  void build(Graph& g, const Image& pixels, bool input_grad, bool param_grad) const;
  LossEvaluation run_backward(Graph& g, const Image& pixels, const LossSpec& loss) const;
  void index_parameters();

  ToyDetectorConfig config_;
  std::vector<NamedParameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Single-file checkpoint: magic, JSON manifest (format version, config,
/// seed, parameter table) and raw little-endian float64 parameter arrays.
inline constexpr int kCheckpointFormatVersion = 1;
void save_checkpoint(const ToyDetector& model, const std::filesystem::path& path);
ToyDetector load_checkpoint(const std::filesystem::path& path);

}  // namespace detrbench
