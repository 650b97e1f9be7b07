#pragma once

// Sliding-window patches over an (H,W,C) cube, the random rectangular masking
// used during training, and overlap-averaged reassembly.

#include "dms2f/tensor.hpp"

#include <optional>
#include <random>
#include <utility>
#include <vector>

namespace dms2f {

struct Origin {
  Index row = 0;
  Index col = 0;
  friend bool operator==(const Origin&, const Origin&) = default;
};

template <typename Scalar>
struct PatchSet {
  Index height = 0;  // source extents
  Index width = 0;
  Index patch_h = 0;
  Index patch_w = 0;
  std::vector<Origin> origins;
  Tensor<Scalar> patches;  // (N, patch_h, patch_w, C), patch i at origins[i]

  Index count() const { return static_cast<Index>(origins.size()); }
  /// Patch i as a (patch_h*patch_w, C) block of `patches`.
  auto patch(Index i) { return patches.matrix().middleRows(i * patch_h * patch_w, patch_h * patch_w); }
  auto patch(Index i) const { return patches.matrix().middleRows(i * patch_h * patch_w, patch_h * patch_w); }
};

/// Window starts 0, s, 2s, ... that fit, plus extent - window when the
/// regular grid stops short of the border.
std::vector<Index> window_starts(Index extent, Index window, Index stride);

/// cube is (H, W, C). Throws ShapeError when the window exceeds the cube or
/// the stride is outside [1, window].
template <typename Scalar>
PatchSet<Scalar> extract_patches(const Tensor<Scalar>& cube, Index h, Index w, Index stride);

struct MaskSpec {
  double probability = 0.5;
  Index min_side = 4;
  Index max_side = 8;
  double fill = 0.0;

  /// Throws std::invalid_argument unless 0 <= p <= 1 and
  /// 1 <= min_side <= max_side <= patch_side.
  void validate(Index patch_side) const;
};

struct MaskRegion {
  Index row = 0;
  Index col = 0;
  Index height = 0;
  Index width = 0;
  friend bool operator==(const MaskRegion&, const MaskRegion&) = default;
};

/// With probability spec.probability, fills one random rectangle of the
/// (h*w, C) patch with spec.fill across all bands. Sides are uniform in
/// [min_side, max_side] (capped at the patch) and the position is uniform
/// over valid placements.
template <typename Scalar>
std::optional<MaskRegion> apply_random_mask(Eigen::Ref<Matrix<Scalar>> patch, Index h, Index w, const MaskSpec& spec,
                                            std::mt19937_64& rng);

/// Out-of-place form on an (h, w, C) patch.
template <typename Scalar>
std::pair<Tensor<Scalar>, std::optional<MaskRegion>> random_mask(const Tensor<Scalar>& patch, const MaskSpec& spec,
                                                                 std::mt19937_64& rng);

/// Averages (N, h, w, C) patch outputs back onto an (H, W, C) grid. Throws
/// ShapeError when some pixel is covered by no patch.
template <typename Scalar>
Tensor<Scalar> reassemble(const Tensor<Scalar>& outputs, const std::vector<Origin>& origins, Index height,
                          Index width);

}  // namespace dms2f
