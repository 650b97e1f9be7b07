#pragma once

#include "dms2f/checkpoint.hpp"
#include "dms2f/data.hpp"
#include "dms2f/patching.hpp"

#include <functional>

namespace dms2f {

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 1e-4;
  Index epochs = 100;
  Index batch_size = 32;
  double val_fraction = 0.1;
  Index stride = 8;
  std::uint64_t seed = 0;
  MaskSpec mask;

  /// Throws std::invalid_argument naming the offending field.
  void validate(Index patch_side) const;
};

struct AdamConfig {
  double lr = 5e-4;
  double weight_decay = 0.0;  // added to the gradient as wd * theta
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
  Index step = 0;
};

/// Mean of (x_hat - x)^2 over every element. Throws ShapeError on mismatch.
template <typename Scalar>
Var<Scalar> mse_loss(const Var<Scalar>& x_hat, const Var<Scalar>& x);

/// One bias-corrected Adam update from the gradients stored in `params`.
/// The state is sized on first use. A non-finite gradient aborts the step
/// before any parameter changes, with a NumericError naming the parameter.
template <typename Scalar>
void adam_step(const ParamList<Scalar>& params, AdamState<Scalar>& state, const AdamConfig& config);

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // train-set loss when there is no validation split
};

struct FitResult {
  Checkpoint checkpoint;  // epoch with the lowest validation loss
  std::vector<EpochRecord> history;
};

/// Trains a fresh model (seeded by train.seed) on patches of `cube`.
/// Patches are split into train/validation by a seeded shuffle; each epoch
/// masks, reconstructs, and steps Adam over shuffled train batches, then
/// scores the unmasked validation patches.
FitResult fit(const HsiCube& cube, const ModelConfig& model_config, const TrainConfig& train_config,
              const std::function<void(const EpochRecord&)>& on_epoch = {});

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

}  // namespace dms2f
