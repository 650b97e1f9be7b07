#pragma once

// The detector network: a 1x1 input projection, a spatial branch (multi-scale
// convs + Mamba over row-major pixel tokens), a spectral branch (Mamba over
// overlapping channel groups of each pixel), a fusion stage and a decoder.
// Feature maps are (B,h,w,c) tensors, i.e. one row per pixel.

#include "dms2f/ssm.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace dms2f {

enum class Fusion { gated, addition, spatial_only, spectral_only };

std::string_view to_string(Fusion fusion);
/// Throws std::invalid_argument on an unknown name.
Fusion parse_fusion(std::string_view name);

struct ModelConfig {
  Index bands = 0;   // C
  Index patch = 16;  // h = w
  Index c1 = 64;     // embedding width
  Index c2 = 16;     // spectral group length
  Index k = 8;       // spectral group stride
  MambaConfig spatial{64, 16, 4, 2};
  MambaConfig spectral{8, 8, 4, 2};
  MambaConfig decoder{64, 16, 4, 2};
  Fusion fusion = Fusion::gated;

  /// Sets c1 and the width of the two pixel-token blocks that run at c1.
  void set_embed(Index width);

  Index groups() const { return (c1 - c2) / k + 1; }
  /// Channels shared by neighbouring groups.
  Index shared_bands() const { return c2 - k; }
  /// First channel of group j.
  Index group_start(Index j) const { return j * k; }

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
class Dms2fModel {
 public:
  Dms2fModel(const ModelConfig& config, std::uint64_t seed);
  Dms2fModel(const Dms2fModel&) = delete;
  Dms2fModel& operator=(const Dms2fModel&) = delete;

  const ModelConfig& config() const { return config_; }

  /// (B,h,w,C) or (h,w,C) -> same shape. `training` selects batch statistics
  /// in the input normalisation and updates its running estimates.
  Var<Scalar> forward(const Var<Scalar>& x, bool training);

  Var<Scalar> input_project(const Var<Scalar>& x, bool training);
  Var<Scalar> spatial_branch(const Var<Scalar>& f) const;
  Var<Scalar> spectral_branch(const Var<Scalar>& f) const;
  /// sigmoid(W [f_spa, f_spe] + b), entries in (0,1).
  Var<Scalar> gate(const Var<Scalar>& f_spa, const Var<Scalar>& f_spe) const;
  /// Features entering the fusion projection, per the configured variant.
  Var<Scalar> fuse_features(const Var<Scalar>& f_spa, const Var<Scalar>& f_spe) const;
  Var<Scalar> fuse(const Var<Scalar>& f_spa, const Var<Scalar>& f_spe) const;
  Var<Scalar> decode(const Var<Scalar>& f) const;

  /// Embedded channel feeding each spectral token of one pixel, in token
  /// order: group 0 steps, group 1 steps, ...
  std::span<const Index> pixel_token_channels() const {
    return {token_channel_.data(), static_cast<std::size_t>(config_.groups() * config_.c2)};
  }

  /// Parameters reachable from forward() for the configured variant, in a
  /// fixed order.
  ParamList<Scalar> parameters();
  BufferList<Scalar> buffers();
  Index parameter_count();

  Conv2d<Scalar> input_conv;
  BatchNorm2d<Scalar> input_norm;
  Conv2d<Scalar> msfe3;
  Conv2d<Scalar> msfe5;
  MambaBlock<Scalar> spatial_mamba;
  Parameter<Scalar> spectral_embed;  // (1, d_spec)
  Parameter<Scalar> spectral_pos;    // (c1, d_spec), one row per embedded channel
  MambaBlock<Scalar> spectral_mamba;
  Linear<Scalar> spectral_out;       // g*d_spec -> c1
  Linear<Scalar> gate_proj;          // 2*c1 -> c1
  Linear<Scalar> fusion_proj;        // c1 -> c1
  MambaBlock<Scalar> decoder_mamba;
  Conv2d<Scalar> decoder3;
  Conv2d<Scalar> decoder5;
  Linear<Scalar> head;               // 3*c1 -> C

 private:
  Dms2fModel(const ModelConfig& config, std::mt19937_64&& rng);
  // Pixels per gradient-checkpointed chunk of the spectral branch.
  static constexpr Index spectral_chunk = 256;
  bool uses_spatial() const { return config_.fusion != Fusion::spectral_only; }
  bool uses_spectral() const { return config_.fusion != Fusion::spatial_only; }
  Var<Scalar> spectral_pixels(const Var<Scalar>& pixels) const;

  ModelConfig config_;
  std::vector<Index> token_source_;   // row of the (pixel*c1, 1) view feeding each token
  std::vector<Index> token_channel_;  // embedded channel of each token
};

/// Trainable parameter count of the configured variant.
Index parameter_count(const ModelConfig& config);

/// Multiply-accumulates of one forward pass over a single patch.
double forward_macs(const ModelConfig& config);

extern template class Dms2fModel<float>;
extern template class Dms2fModel<double>;

}  // namespace dms2f
