#include "dms2f/model.hpp"

#include <array>
#include <sstream>
#include <stdexcept>

namespace dms2f {

std::string_view to_string(Fusion fusion) {
  switch (fusion) {
    case Fusion::gated: return "gated";
    case Fusion::addition: return "addition";
    case Fusion::spatial_only: return "spatial_only";
    case Fusion::spectral_only: return "spectral_only";
  }
  return "unknown";
}

Fusion parse_fusion(std::string_view name) {
  for (Fusion f : {Fusion::gated, Fusion::addition, Fusion::spatial_only, Fusion::spectral_only}) {
    if (to_string(f) == name) return f;
  }
  throw std::invalid_argument("unknown fusion variant '" + std::string(name) +
                              "' (expected gated, addition, spatial_only or spectral_only)");
}

void ModelConfig::set_embed(Index width) {
  c1 = width;
  spatial.d_model = width;
  decoder.d_model = width;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  auto positive = [&](const char* field, Index v) {
    if (v < 1) fail(std::string(field) + " must be >= 1, got " + std::to_string(v));
  };
  positive("bands", bands);
  positive("patch", patch);
  positive("c1", c1);
  positive("c2", c2);
  positive("k", k);
  if (c2 > c1) fail("c2 = " + std::to_string(c2) + " exceeds c1 = " + std::to_string(c1));
  if (k > c2) fail("k = " + std::to_string(k) + " exceeds c2 = " + std::to_string(c2));
  if ((c1 - c2) % k != 0) {
    fail("c1 - c2 = " + std::to_string(c1 - c2) + " is not divisible by k = " + std::to_string(k));
  }
  if (spatial.d_model != c1) fail("spatial.d_model must equal c1");
  if (decoder.d_model != c1) fail("decoder.d_model must equal c1");
  try {
    spatial.validate();
    spectral.validate();
    decoder.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

namespace {

const ModelConfig& checked(const ModelConfig& config) {
  config.validate();
  return config;
}

Index spatial_extent(const Shape& s, Index from_back) {
  if (s.size() != 3 && s.size() != 4) throw ShapeError("expected (h,w,c) or (B,h,w,c), got " + to_string(s));
  return s[s.size() - static_cast<std::size_t>(from_back)];
}

}  // namespace

template <typename Scalar>
Dms2fModel<Scalar>::Dms2fModel(const ModelConfig& config, std::uint64_t seed)
    : Dms2fModel(checked(config), std::mt19937_64(seed)) {}

template <typename Scalar>
Dms2fModel<Scalar>::Dms2fModel(const ModelConfig& c, std::mt19937_64&& rng)
    : input_conv("input.conv", c.bands, c.c1, 1, rng),
      input_norm("input.norm", c.c1),
      msfe3("spatial.msfe3", c.c1, c.c1, 3, rng),
      msfe5("spatial.msfe5", c.c1, c.c1, 5, rng),
      spatial_mamba("spatial.mamba", c.spatial, rng),
      spectral_embed("spectral.embed", fan_in_uniform<Scalar>({1, c.spectral.d_model}, 1, rng)),
      spectral_pos("spectral.pos", uniform<Scalar>({c.c1, c.spectral.d_model}, -0.5, 0.5, rng)),
      spectral_mamba("spectral.mamba", c.spectral, rng),
      spectral_out("spectral.out", c.groups() * c.spectral.d_model, c.c1, true, rng),
      gate_proj("fusion.gate", 2 * c.c1, c.c1, true, rng),
      fusion_proj("fusion.proj", c.c1, c.c1, true, rng),
      decoder_mamba("decoder.mamba", c.decoder, rng),
      decoder3("decoder.conv3", c.c1, c.c1, 3, rng),
      decoder5("decoder.conv5", c.c1, c.c1, 5, rng),
      head("decoder.head", 3 * c.c1, c.bands, true, rng),
      config_(c) {
  // Token order inside a chunk is (pixel, group, step), so each run of c2
  // consecutive rows is one group sequence.
  const Index g = c.groups();
  token_source_.reserve(static_cast<std::size_t>(spectral_chunk * g * c.c2));
  for (Index p = 0; p < spectral_chunk; ++p) {
    for (Index j = 0; j < g; ++j) {
      for (Index t = 0; t < c.c2; ++t) {
        token_source_.push_back(p * c.c1 + c.group_start(j) + t);
        token_channel_.push_back(c.group_start(j) + t);
      }
    }
  }
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::input_project(const Var<Scalar>& x, bool training) {
  if (x.cols() != config_.bands) {
    throw ShapeError("input has " + std::to_string(x.cols()) + " bands, model expects " +
                     std::to_string(config_.bands));
  }
  return gelu(input_norm(input_conv(x), training));
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::spatial_branch(const Var<Scalar>& f) const {
  const Index seq = spatial_extent(f.shape(), 3) * spatial_extent(f.shape(), 2);
  return mamba_forward(msfe3(f) + msfe5(f), spatial_mamba, seq);
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::spectral_pixels(const Var<Scalar>& pixels) const {
  const Index pc = pixels.rows();
  const Index c1 = config_.c1, c2 = config_.c2, g = config_.groups();
  const Index d = config_.spectral.d_model;
  const auto tokens = static_cast<std::size_t>(pc * g * c2);

  Var<Scalar> values = gather_rows(reshape(pixels, {pc * c1, 1}), std::span<const Index>(token_source_.data(), tokens));
  Var<Scalar> pos = gather_rows(spectral_pos.var(), std::span<const Index>(token_channel_.data(), tokens));
  Var<Scalar> seq = mamba_forward(matmul(values, spectral_embed.var()) + pos, spectral_mamba, c2);
  return spectral_out(reshape(segment_mean(seq, c2), {pc, g * d}));
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::spectral_branch(const Var<Scalar>& f) const {
  if (f.cols() != config_.c1) {
    throw ShapeError("spectral_branch: expected " + std::to_string(config_.c1) + " channels, got " +
                     std::to_string(f.cols()));
  }
  const Index pixels = f.rows();
  Var<Scalar> flat = reshape(f, {pixels, config_.c1});
  std::function<Var<Scalar>(const Var<Scalar>&)> run = [this](const Var<Scalar>& p) { return spectral_pixels(p); };
  std::vector<Var<Scalar>> parts;
  for (Index start = 0; start < pixels; start += spectral_chunk) {
    Var<Scalar> chunk = slice_rows(flat, start, std::min(spectral_chunk, pixels - start));
    // The per-token activations are large, so training recomputes them
    // during the backward sweep instead of keeping them.
    parts.push_back(grad_enabled() && chunk.requires_grad() ? checkpoint(run, chunk) : run(chunk));
  }
  return reshape(concat_rows<Scalar>(parts), f.shape());
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::gate(const Var<Scalar>& f_spa, const Var<Scalar>& f_spe) const {
  if (f_spa.shape() != f_spe.shape()) {
    throw ShapeError("gate: branch shapes differ, " + to_string(f_spa.shape()) + " vs " + to_string(f_spe.shape()));
  }
  const std::array<Var<Scalar>, 2> both{f_spa, f_spe};
  return sigmoid(gate_proj(concat_cols<Scalar>(both)));
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::fuse_features(const Var<Scalar>& f_spa, const Var<Scalar>& f_spe) const {
  switch (config_.fusion) {
    case Fusion::spatial_only: return f_spa;
    case Fusion::spectral_only: return f_spe;
    case Fusion::addition:
      if (f_spa.shape() != f_spe.shape()) throw ShapeError("fuse: branch shapes differ");
      return f_spa + f_spe;
    case Fusion::gated: {
      // G*a + (1-G)*b arranged as a - (1-G)*(a-b): G == 1 returns a and
      // a == b returns a, both without rounding.
      Var<Scalar> g = gate(f_spa, f_spe);
      return f_spa - affine(g, Scalar(-1), Scalar(1)) * (f_spa - f_spe);
    }
  }
  throw std::logic_error("unhandled fusion variant");
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::fuse(const Var<Scalar>& f_spa, const Var<Scalar>& f_spe) const {
  return fusion_proj(fuse_features(f_spa, f_spe));
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::decode(const Var<Scalar>& f) const {
  const Index seq = spatial_extent(f.shape(), 3) * spatial_extent(f.shape(), 2);
  const std::array<Var<Scalar>, 3> paths{mamba_forward(f, decoder_mamba, seq), decoder3(f), decoder5(f)};
  return head(concat_cols<Scalar>(paths));
}

template <typename Scalar>
Var<Scalar> Dms2fModel<Scalar>::forward(const Var<Scalar>& x, bool training) {
  const Index h = spatial_extent(x.shape(), 3), w = spatial_extent(x.shape(), 2);
  if (h != config_.patch || w != config_.patch) {
    std::ostringstream msg;
    msg << "forward: patch is " << h << 'x' << w << ", model expects " << config_.patch << 'x' << config_.patch;
    throw ShapeError(msg.str());
  }
  Var<Scalar> f = input_project(x, training);
  Var<Scalar> spa = uses_spatial() ? spatial_branch(f) : Var<Scalar>();
  Var<Scalar> spe = uses_spectral() ? spectral_branch(f) : Var<Scalar>();
  return decode(fuse(spa, spe));
}

template <typename Scalar>
ParamList<Scalar> Dms2fModel<Scalar>::parameters() {
  ParamList<Scalar> out;
  input_conv.collect(out);
  input_norm.collect(out);
  if (uses_spatial()) {
    msfe3.collect(out);
    msfe5.collect(out);
    spatial_mamba.collect(out);
  }
  if (uses_spectral()) {
    out.push_back(&spectral_embed);
    out.push_back(&spectral_pos);
    spectral_mamba.collect(out);
    spectral_out.collect(out);
  }
  if (config_.fusion == Fusion::gated) gate_proj.collect(out);
  fusion_proj.collect(out);
  decoder_mamba.collect(out);
  decoder3.collect(out);
  decoder5.collect(out);
  head.collect(out);
  return out;
}

template <typename Scalar>
BufferList<Scalar> Dms2fModel<Scalar>::buffers() {
  BufferList<Scalar> out;
  input_norm.collect_buffers(out);
  return out;
}

template <typename Scalar>
Index Dms2fModel<Scalar>::parameter_count() {
  Index total = 0;
  for (const Parameter<Scalar>* p : parameters()) total += p->size();
  return total;
}

Index parameter_count(const ModelConfig& config) { return Dms2fModel<float>(config, 0).parameter_count(); }

double forward_macs(const ModelConfig& c) {
  c.validate();
  const double pixels = double(c.patch * c.patch);
  const double c1 = double(c.c1), bands = double(c.bands);
  const double msfe = pixels * c1 * c1 * (9 + 25);
  double macs = pixels * bands * c1;  // input projection
  if (c.fusion != Fusion::spectral_only) macs += msfe + mamba_macs(c.spatial, pixels);
  if (c.fusion != Fusion::spatial_only) {
    const double d = double(c.spectral.d_model), tokens = pixels * double(c.groups() * c.c2);
    macs += tokens * d + mamba_macs(c.spectral, tokens) + pixels * double(c.groups()) * d * c1;
  }
  if (c.fusion == Fusion::gated) macs += pixels * 2 * c1 * c1;
  macs += pixels * c1 * c1;  // fusion projection
  macs += mamba_macs(c.decoder, pixels) + msfe + pixels * 3 * c1 * bands;
  return macs;
}

template class Dms2fModel<float>;
template class Dms2fModel<double>;

}  // namespace dms2f
