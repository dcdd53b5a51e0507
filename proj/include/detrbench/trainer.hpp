#pragma once

#include "detrbench/datasets.hpp"
#include "detrbench/toy_detector.hpp"

#include <functional>
#include <vector>

namespace detrbench {

struct TrainOptions {
  int epochs = 40;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip_norm = 0.5;  // global L2 norm, <= 0 disables
  /// Learning rate is multiplied by 0.1 from this epoch on (0 disables).
  int lr_drop_epoch = 32;
  bool flip_augment = true;
  double no_object_weight = 0.1;
  double l1_weight = 5.0;
  double giou_weight = 2.0;
  /// Called after every epoch with (epoch index, mean loss).
  std::function<void(int, double)> on_epoch;
};

struct TrainResult {
  ToyDetector model;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

/// DETR set-prediction loss (CE + L1 + GIoU, final and auxiliary heads) for
/// one sample, as used by the trainer.
LossSpec detection_training_loss(const GroundTruth& gt, const TrainOptions& options);

/// Seeded init, then AdamW over shuffled mini-batches. Shuffle order and
/// augmentation draw from config.rng_seed, so results are reproducible.
/// epochs = 0 returns the initialization. Throws TrainingError when the loss
/// becomes non-finite.
TrainResult build_and_train_toy_detector(const ToyDetectorConfig& config, const DatasetHandle& dataset,
                                         const TrainOptions& options);

}  // namespace detrbench
