#include "detrbench/trainer.hpp"

#include "detrbench/errors.hpp"
#include "detrbench/losses.hpp"
#include "detrbench/matching.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace detrbench {

LossSpec detection_training_loss(const GroundTruth& gt, const TrainOptions& options) {
  return [gt, options](const Image&, const DetectorOutputs& out) {
    const std::vector<MatchAssignment> matchings = match_layers(out, gt);
    LossValue ce = classification_loss(out, gt, matchings, options.no_object_weight);
    const LossValue l1 = box_l1_loss(out, gt, matchings);
    const LossValue gi = giou_loss(out, gt, matchings);
    LossEvaluation e;
    e.value = ce.value + options.l1_weight * l1.value + options.giou_weight * gi.value;
    e.head_grad = std::move(ce.grad);
    e.head_grad.add_scaled(l1.grad, options.l1_weight).add_scaled(gi.grad, options.giou_weight);
    e.terms = {{"cls", ce.value}, {"l1", l1.value}, {"giou", gi.value}};
    return e;
  };
}

TrainResult build_and_train_toy_detector(const ToyDetectorConfig& config, const DatasetHandle& dataset,
                                         const TrainOptions& options) {
  config.validate();
  if (options.epochs < 0) throw InputError("epochs must be >= 0");
  if (options.batch_size < 1) throw InputError("batch_size must be >= 1");
  if (dataset.samples.empty()) throw InputError("training dataset is empty");
  for (const ImageSample& s : dataset.samples)
    if (s.pixels.height != config.image_size || s.pixels.width != config.image_size)
      throw InputError("training image " + s.image_id + " does not match the model input size");

  TrainResult result{ToyDetector(config), {}};
  ToyDetector& model = result.model;
  std::vector<NamedParameter>& params = model.mutable_parameters();

  std::vector<Mat> m1, m2;
  for (const NamedParameter& p : params) {
    m1.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
    m2.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long long step = 0;

  std::mt19937_64 rng(config.rng_seed ^ 0x7261696eULL);
  std::vector<std::size_t> order(dataset.samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr =
        options.learning_rate * (options.lr_drop_epoch > 0 && epoch >= options.lr_drop_epoch ? 0.1 : 1.0);
    double epoch_loss = 0.0;

    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<Mat> grads;
      for (const NamedParameter& p : params) grads.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const bool flip = options.flip_augment && std::uniform_int_distribution<int>(0, 1)(rng) == 1;
        const ImageSample& base = dataset.samples[order[i]];
        const ImageSample sample = flip ? mirrored(base) : base;
        const auto pg = model.parameter_gradients(sample.pixels, detection_training_loss(sample.ground_truth, options));
        if (!std::isfinite(pg.loss))
          throw TrainingError("training loss became non-finite at epoch " + std::to_string(epoch + 1));
        batch_loss += pg.loss;
        for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += pg.grads[k];
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      double norm_sq = 0.0;
      for (Mat& g : grads) {
        g *= inv;
        norm_sq += g.squaredNorm();
      }
      if (!std::isfinite(norm_sq)) throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch + 1));
      const double norm = std::sqrt(norm_sq);
      const double scale = options.grad_clip_norm > 0 && norm > options.grad_clip_norm ? options.grad_clip_norm / norm : 1.0;

      ++step;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < params.size(); ++k) {
        Mat& w = params[k].value;
        const Mat g = grads[k] * scale;
        m1[k] = beta1 * m1[k] + (1.0 - beta1) * g;
        m2[k] = beta2 * m2[k] + (1.0 - beta2) * g.cwiseProduct(g);
        w *= 1.0 - lr * options.weight_decay;
        w.array() -= lr * (m1[k].array() / bc1) / ((m2[k].array() / bc2).sqrt() + eps);
      }
      epoch_loss += batch_loss;
    }
    epoch_loss /= static_cast<double>(order.size());
    if (!std::isfinite(epoch_loss)) throw TrainingError("training loss diverged at epoch " + std::to_string(epoch + 1));
    result.epoch_losses.push_back(epoch_loss);
    spdlog::debug("epoch {} loss {:.5f}", epoch + 1, epoch_loss);
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss);
  }
  return result;
}

}  // namespace detrbench
