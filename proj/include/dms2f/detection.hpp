#pragma once

// Per-pixel anomaly scores: the reconstruction residual of the network and
// the global RX (Mahalanobis) baseline.

#include "dms2f/checkpoint.hpp"
#include "dms2f/data.hpp"

#include <filesystem>
#include <string>

namespace dms2f {

struct ScoreMap {
  Index height = 0;
  Index width = 0;
  Matrix<double> scores;  // H x W, higher = more anomalous
  std::string detector;
  std::string config_hash;
};

/// R(i,j) = || X(i,j,:) - X_hat(i,j,:) ||_2. x_hat is (H, W, C).
ScoreMap residual_map(const HsiCube& x, const Tensor<float>& x_hat);

/// Unmasked sliding-window reconstruction averaged over overlaps, (H, W, C).
template <typename Scalar>
Tensor<Scalar> reconstruct(Dms2fModel<Scalar>& model, const HsiCube& cube, Index stride, Index batch = 32);

template <typename Scalar>
ScoreMap detect(const HsiCube& cube, Dms2fModel<Scalar>& model, Index stride);

ScoreMap detect(const HsiCube& cube, const Checkpoint& checkpoint, Index stride);

/// (x - mu)^T (Sigma + lambda I)^-1 (x - mu) with scene mean and population
/// covariance, lambda = lambda_scale * trace(Sigma) / C. Throws NumericError
/// when the regularised covariance cannot be factorised reliably.
ScoreMap rx_score(const HsiCube& cube, double lambda_scale = 1e-6);

/// "row,col,score" with a leading "# detector=... config=..." comment.
void write_score_csv(const ScoreMap& map, const std::filesystem::path& path);
ScoreMap read_score_csv(const std::filesystem::path& path);

/// Binary 16-bit PGM (maxval 65535) after min-max scaling; a constant map is
/// written as zeros.
void write_score_pgm(const ScoreMap& map, const std::filesystem::path& path);

}  // namespace dms2f
