#pragma once

// Model snapshots. On disk: one JSON manifest line (config, seed, epoch,
// val_loss, parameter and buffer names/shapes), a newline, then every
// parameter followed by every buffer as little-endian f32 in manifest order.

#include "dms2f/model.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace dms2f {

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  Index epoch = 0;
  double val_loss = 0.0;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> buffers;
};

template <typename Scalar>
Checkpoint capture(Dms2fModel<Scalar>& model, std::uint64_t seed, Index epoch, double val_loss);

/// Copies values into a model built from the same config. Throws ShapeError
/// on any name or shape mismatch.
template <typename Scalar>
void restore(const Checkpoint& checkpoint, Dms2fModel<Scalar>& model);

template <typename Scalar>
std::unique_ptr<Dms2fModel<Scalar>> instantiate(const Checkpoint& checkpoint);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Throws FormatError on a malformed manifest or payload.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Stable textual form of a config (JSON, fixed key order).
std::string config_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

/// FNV-1a 64 of `text` as 16 hex digits.
std::string fnv1a_hex(std::string_view text);

/// fnv1a_hex of config_json.
std::string config_hash(const ModelConfig& config);

}  // namespace dms2f
