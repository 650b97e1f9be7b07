#pragma once

// Hyperspectral cubes, the HSIC file format and the synthetic scene generator.
//
// HSIC v1 is one ASCII JSON header line
//   {"hsic":1,"h":H,"w":W,"c":C,"dtype":"f32","order":"bip"}
// followed by H*W*C little-endian floats, all bands of a pixel together.
// A mask sidecar uses the same header with "dtype":"u8","c":1 and 0/1 bytes.

#include "dms2f/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>

namespace dms2f {

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct HsiCube {
  Index height = 0;
  Index width = 0;
  Index bands = 0;
  Matrix<float> pixels;     // (H*W, C); row r*W + c is pixel (r, c)
  std::optional<Mask> mask;  // H x W, true = anomaly

  HsiCube() = default;
  HsiCube(Index h, Index w, Index c);

  float& operator()(Index r, Index c, Index b) { return pixels(r * width + c, b); }
  float operator()(Index r, Index c, Index b) const { return pixels(r * width + c, b); }

  /// (H, W, C) view as a tensor (copies).
  Tensor<float> tensor() const;

  /// Throws ShapeError on inconsistent extents and NumericError on
  /// non-finite values.
  void validate() const;
};

void save_cube(const HsiCube& cube, const std::filesystem::path& path);
/// Throws FormatError for unknown versions, bad headers or payload size
/// mismatches.
HsiCube load_cube(const std::filesystem::path& path);

void save_mask(const Mask& mask, const std::filesystem::path& path);
Mask load_mask(const std::filesystem::path& path);

/// "scene.hsic" -> "scene.mask.hsic".
std::filesystem::path mask_path_for(const std::filesystem::path& cube_path);

/// Per-band min-max scaling to [0, 1]; constant bands map to 0. Keeps the mask.
HsiCube normalize(const HsiCube& cube);

struct SceneSpec {
  Index height = 64;
  Index width = 64;
  Index bands = 32;
  Index endmembers = 4;
  Index anomalies = 3;
  Index min_size = 2;  // anomaly side length range, pixels
  Index max_size = 4;
  double contrast = 3.0;
  double noise = 0.02;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Smooth mixture of endmember spectra plus Gaussian noise, with rectangular
/// implants displaced by `contrast` background standard deviations along a
/// random spectral direction. The mask marks implanted pixels.
HsiCube synth_scene(const SceneSpec& spec);

}  // namespace dms2f
