#include "dms2f/model.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace dms2f;
using dms2f::testing::gradient_error;
using dms2f::testing::probe_loss;
using dms2f::testing::random_tensor;
using dms2f::testing::sampled_gradient_error;

namespace {

ModelConfig toy_config(Fusion fusion = Fusion::gated) {
  ModelConfig c;
  c.bands = 12;
  c.patch = 8;
  c.c2 = 8;
  c.k = 4;
  c.spatial = {16, 4, 3, 2};
  c.spectral = {4, 4, 3, 2};
  c.decoder = {16, 4, 3, 2};
  c.set_embed(16);
  c.fusion = fusion;
  return c;
}

Index mamba_params(const MambaConfig& m) {
  const Index inner = m.inner(), n = m.d_state, r = m.dt_rank();
  return m.d_model + m.d_model * 2 * inner + m.d_conv * inner + inner + inner * (r + 2 * n) + r * inner + inner +
         inner * n + inner + inner * m.d_model;
}

}  // namespace

TEST(ModelConfig, DefaultGroupingHasSevenGroupsSharingEightBands) {
  ModelConfig c;
  c.bands = 32;
  EXPECT_EQ(c.groups(), 7);
  EXPECT_EQ(c.shared_bands(), 8);
  Dms2fModel<float> model(c, 1);
  const auto channels = model.pixel_token_channels();
  ASSERT_EQ(channels.size(), 7u * 16u);
  std::vector<std::set<Index>> groups(7);
  for (std::size_t i = 0; i < channels.size(); ++i) groups[i / 16].insert(channels[i]);
  for (Index j = 0; j < 7; ++j) {
    EXPECT_EQ(groups[j].size(), 16u);
    EXPECT_EQ(*groups[j].begin(), 8 * j);
    EXPECT_EQ(*groups[j].rbegin(), 8 * j + 15);
  }
  EXPECT_EQ(*groups[6].rbegin(), c.c1 - 1);
  for (Index j = 0; j + 1 < 7; ++j) {
    std::vector<Index> common;
    std::set_intersection(groups[j].begin(), groups[j].end(), groups[j + 1].begin(), groups[j + 1].end(),
                          std::back_inserter(common));
    EXPECT_EQ(common.size(), 8u);
  }
}

TEST(ModelConfig, StrideEqualToGroupLengthPartitionsChannels) {
  ModelConfig c = toy_config();
  c.k = c.c2;
  EXPECT_EQ(c.groups(), 2);
  EXPECT_EQ(c.shared_bands(), 0);
  Dms2fModel<float> model(c, 1);
  std::vector<Index> seen(model.pixel_token_channels().begin(), model.pixel_token_channels().end());
  std::sort(seen.begin(), seen.end());
  for (Index i = 0; i < c.c1; ++i) EXPECT_EQ(seen[static_cast<std::size_t>(i)], i);
}

TEST(ModelConfig, RejectsBrokenGrouping) {
  ModelConfig c = toy_config();
  c.k = 3;  // 16 - 8 is not a multiple of 3
  EXPECT_THROW(Dms2fModel<float>(c, 1), std::invalid_argument);
  c = toy_config();
  c.c2 = 32;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = toy_config();
  c.k = 9;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = toy_config();
  c.bands = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = toy_config();
  c.spatial.d_model = 8;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ModelConfig, ParsesFusionNames) {
  for (Fusion f : {Fusion::gated, Fusion::addition, Fusion::spatial_only, Fusion::spectral_only}) {
    EXPECT_EQ(parse_fusion(to_string(f)), f);
  }
  EXPECT_THROW(parse_fusion("concat"), std::invalid_argument);
}

TEST(Model, InputProjectionReducesBands) {
  ModelConfig c;
  c.bands = 189;
  Dms2fModel<float> model(c, 2);
  std::mt19937_64 rng(2);
  Var<float> x(random_tensor({16, 16, 189}, rng).cast<float>());
  EXPECT_EQ(model.input_project(x, true).shape(), (Shape{16, 16, 64}));
  Var<float> wrong(Tensor<float>({16, 16, 188}));
  EXPECT_THROW(model.input_project(wrong, true), ShapeError);
}

TEST(Model, IdentityInputConvolutionPassesThrough) {
  ModelConfig c = toy_config();
  c.bands = c.c1;
  Dms2fModel<double> model(c, 3);
  model.input_conv.weight.value().matrix() = Matrix<double>::Identity(c.c1, c.c1);
  std::mt19937_64 rng(3);
  Var<double> x(random_tensor({8, 8, c.c1}, rng));
  EXPECT_EQ(model.input_conv(x).matrix(), x.matrix());
}

TEST(Model, InputProjectionGradient) {
  Dms2fModel<double> model(toy_config(), 4);
  std::mt19937_64 rng(4);
  Var<double> x(random_tensor({2, 8, 8, 12}, rng), true);
  auto loss = [&] { return probe_loss(model.input_project(x, true)); };
  EXPECT_LT(gradient_error(loss, x), 1e-3);
  for (Parameter<double>* p : {&model.input_conv.weight, &model.input_norm.gamma, &model.input_norm.beta}) {
    EXPECT_LT(gradient_error(loss, p->var()), 1e-3) << p->name();
  }
  // Batch statistics absorb a per-channel shift, so the conv bias has an
  // exactly zero gradient and a differenced one that is pure rounding noise.
  model.input_conv.bias.zero_grad();
  backward(loss());
  EXPECT_LT(model.input_conv.bias.grad().cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Model, SpatialBranchKeepsShapeAndScansRowMajor) {
  Dms2fModel<double> model(toy_config(), 5);
  std::mt19937_64 rng(5);
  Tensor<double> f = random_tensor({8, 8, 16}, rng);
  const Matrix<double> base = model.spatial_branch(Var<double>(f)).matrix();
  EXPECT_EQ(model.spatial_branch(Var<double>(f)).shape(), f.shape());

  // Pixel (r,c) is token r*w + c.
  EXPECT_EQ(f.reshaped({64, 16}).matrix().row(3 * 8 + 5), f.matrix().row(3 * 8 + 5));

  Tensor<double> last = f;
  last.matrix().row(63).array() += 1.0;
  const Matrix<double> after_last = model.spatial_branch(Var<double>(last)).matrix();
  EXPECT_EQ(after_last.row(0), base.row(0));

  Tensor<double> first = f;
  first.matrix().row(0).array() += 1.0;
  const Matrix<double> after_first = model.spatial_branch(Var<double>(first)).matrix();
  EXPECT_NE(after_first.row(63), base.row(63));
}

TEST(Model, SpectralBranchIsPerPixel) {
  Dms2fModel<double> model(toy_config(), 6);
  std::mt19937_64 rng(6);
  Tensor<double> f = random_tensor({2, 8, 8, 16}, rng);
  const Var<double> out = model.spectral_branch(Var<double>(f));
  EXPECT_EQ(out.shape(), f.shape());
  Tensor<double> moved = f;
  moved.matrix()(77, 3) += 0.5;
  const Matrix<double> after = model.spectral_branch(Var<double>(moved)).matrix();
  for (Index r = 0; r < f.rows(); ++r) {
    if (r == 77) {
      EXPECT_NE(after.row(r), out.matrix().row(r));
    } else {
      EXPECT_EQ(after.row(r), out.matrix().row(r)) << r;
    }
  }
}

TEST(Model, SpectralBranchChunkingMatchesSinglePass) {
  // 600 pixels span three checkpoint chunks; gradients must equal those of
  // the same pixels pushed through in separate calls.
  Dms2fModel<double> model(toy_config(), 7);
  std::mt19937_64 rng(7);
  Var<double> f(random_tensor({600, 16}, rng), true);
  auto loss = [&] { return probe_loss(model.spectral_branch(f)); };
  std::mt19937_64 pick(70);
  EXPECT_LT(sampled_gradient_error(loss, f, 40, pick), 1e-3);
  EXPECT_LT(sampled_gradient_error(loss, model.spectral_pos.var(), 20, pick), 1e-3);
  EXPECT_LT(sampled_gradient_error(loss, model.spectral_mamba.in_proj.var(), 20, pick), 1e-3);
}

TEST(Model, GateStaysInsideOpenInterval) {
  Dms2fModel<double> model(toy_config(), 8);
  std::mt19937_64 rng(8);
  const Var<double> a(random_tensor({8, 8, 16}, rng, 3.0)), b(random_tensor({8, 8, 16}, rng, 3.0));
  const Matrix<double> g = model.gate(a, b).matrix();
  EXPECT_GT(g.minCoeff(), 0.0);
  EXPECT_LT(g.maxCoeff(), 1.0);
}

TEST(Model, SaturatedGateSelectsOneBranch) {
  Dms2fModel<double> model(toy_config(), 9);
  std::mt19937_64 rng(9);
  const Var<double> f(random_tensor({8, 8, 16}, rng));
  const Var<double> spa = model.spatial_branch(f), spe = model.spectral_branch(f);

  model.gate_proj.bias->value().matrix().setConstant(100.0);
  EXPECT_LT((model.fuse(spa, spe).matrix() - model.fusion_proj(spa).matrix()).cwiseAbs().maxCoeff(), 1e-4);
  model.gate_proj.bias->value().matrix().setConstant(-100.0);
  EXPECT_LT((model.fuse(spa, spe).matrix() - model.fusion_proj(spe).matrix()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Model, FusedFeaturesLieBetweenBranches) {
  Dms2fModel<double> model(toy_config(), 10);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const Var<double> a(random_tensor({8, 8, 16}, rng, 2.0)), b(random_tensor({8, 8, 16}, rng, 2.0));
    const Matrix<double> fused = model.fuse_features(a, b).matrix();
    const Eigen::ArrayXXd lo = a.matrix().cwiseMin(b.matrix()).array();
    const Eigen::ArrayXXd hi = a.matrix().cwiseMax(b.matrix()).array();
    EXPECT_TRUE((fused.array() >= lo - 1e-12).all());
    EXPECT_TRUE((fused.array() <= hi + 1e-12).all());
  }
  const Var<double> same(random_tensor({8, 8, 16}, rng));
  EXPECT_EQ(model.fuse_features(same, same).matrix(), same.matrix());
}

TEST(Model, FusionVariantsCombineAsDocumented) {
  std::mt19937_64 rng(11);
  const Var<double> a(random_tensor({8, 8, 16}, rng)), b(random_tensor({8, 8, 16}, rng));
  Dms2fModel<double> add(toy_config(Fusion::addition), 11);
  Dms2fModel<double> spa(toy_config(Fusion::spatial_only), 11);
  Dms2fModel<double> spe(toy_config(Fusion::spectral_only), 11);
  EXPECT_EQ(add.fuse_features(a, b).matrix(), (a.matrix() + b.matrix()).eval());
  EXPECT_EQ(spa.fuse_features(a, b).matrix(), a.matrix());
  EXPECT_EQ(spe.fuse_features(a, b).matrix(), b.matrix());
  Var<double> mismatch(Tensor<double>({4, 8, 16}));
  EXPECT_THROW(add.fuse_features(a, mismatch), ShapeError);
}

TEST(Model, DecoderRestoresBandsAndIsAffineAtZero) {
  Dms2fModel<double> model(toy_config(), 12);
  std::mt19937_64 rng(12);
  const Var<double> f(random_tensor({8, 8, 16}, rng));
  EXPECT_EQ(model.decode(f).shape(), (Shape{8, 8, 12}));
  model.head.bias->value() = random_tensor({12}, rng);
  const Matrix<double> out = model.decode(Var<double>(Tensor<double>({8, 8, 16}))).matrix();
  for (Index r = 0; r < out.rows(); ++r) EXPECT_EQ(out.row(r), model.head.bias->value().matrix().reshaped(1, 12));
}

TEST(Model, ForwardRoundTripsShape) {
  ModelConfig c;
  c.bands = 189;
  Dms2fModel<float> model(c, 13);
  std::mt19937_64 rng(13);
  Var<float> x(random_tensor({16, 16, 189}, rng).cast<float>());
  NoGradGuard guard;
  const Var<float> y = model.forward(x, false);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(y.value().all_finite());
  Var<float> small(Tensor<float>({8, 8, 189}));
  EXPECT_THROW(model.forward(small, false), ShapeError);
}

TEST(Model, ToyModelGradientsMatchFiniteDifferences) {
  for (Fusion fusion : {Fusion::gated, Fusion::addition}) {
    Dms2fModel<double> model(toy_config(fusion), 14);
    std::mt19937_64 rng(14);
    Var<double> x(random_tensor({2, 8, 8, 12}, rng), true);
    auto loss = [&] { return probe_loss(model.forward(x, true)); };
    std::mt19937_64 pick(140);
    EXPECT_LT(sampled_gradient_error(loss, x, 60, pick), 1e-3);
    for (Parameter<double>* p : model.parameters()) {
      if (p == &model.input_conv.bias) continue;  // zero under batch statistics, see above
      EXPECT_LT(sampled_gradient_error(loss, p->var(), 12, pick), 1e-3) << p->name();
    }
  }
}

TEST(Model, PinnedGateEqualsSpatialOnlyBitForBit) {
  Dms2fModel<double> gated(toy_config(Fusion::gated), 15);
  Dms2fModel<double> spatial(toy_config(Fusion::spatial_only), 15);
  gated.gate_proj.bias->value().matrix().setConstant(100.0);
  std::mt19937_64 rng(15);
  const Var<double> x(random_tensor({2, 8, 8, 12}, rng));
  NoGradGuard guard;
  EXPECT_EQ(gated.forward(x, true).matrix(), spatial.forward(x, true).matrix());
  EXPECT_EQ(gated.forward(x, false).matrix(), spatial.forward(x, false).matrix());
}

TEST(Model, SpatialOnlyIgnoresSpectralParameters) {
  Dms2fModel<double> model(toy_config(Fusion::spatial_only), 16);
  std::mt19937_64 rng(16);
  const Var<double> x(random_tensor({8, 8, 12}, rng));
  NoGradGuard guard;
  const Matrix<double> before = model.forward(x, false).matrix();
  Matrix<double>& pos = model.spectral_pos.value().matrix();
  pos = pos.colwise().reverse().eval();
  Matrix<double>& w = model.spectral_mamba.in_proj.value().matrix();
  std::shuffle(w.data(), w.data() + w.size(), rng);
  EXPECT_EQ(model.forward(x, false).matrix(), before);
}

TEST(Model, VariantsExposeOnlyLiveParameters) {
  auto names = [](Fusion f) {
    Dms2fModel<float> m(toy_config(f), 17);
    std::set<std::string> out;
    for (const Parameter<float>* p : m.parameters()) out.insert(p->name());
    return out;
  };
  auto has_prefix = [](const std::set<std::string>& s, const std::string& prefix) {
    return std::any_of(s.begin(), s.end(), [&](const std::string& n) { return n.rfind(prefix, 0) == 0; });
  };
  const auto gated = names(Fusion::gated), add = names(Fusion::addition);
  const auto spa = names(Fusion::spatial_only), spe = names(Fusion::spectral_only);
  EXPECT_TRUE(has_prefix(gated, "fusion.gate"));
  EXPECT_FALSE(has_prefix(add, "fusion.gate"));
  EXPECT_FALSE(has_prefix(spa, "spectral."));
  EXPECT_FALSE(has_prefix(spe, "spatial."));
  EXPECT_TRUE(has_prefix(spe, "spectral."));
  EXPECT_EQ(gated.size(), add.size() + 2);
}

TEST(Model, ParameterCountFollowsFromShapes) {
  ModelConfig c;
  c.bands = 189;
  const Index c1 = c.c1, C = c.bands, d = c.spectral.d_model, g = c.groups();
  const Index expected = (C * c1 + c1) + 2 * c1                        // input conv + norm
                         + (9 + 25) * c1 * c1 + 2 * c1 + mamba_params(c.spatial)  // spatial branch
                         + d + c1 * d + mamba_params(c.spectral) + g * d * c1 + c1  // spectral branch
                         + 2 * c1 * c1 + c1 + c1 * c1 + c1                // gate + projection
                         + mamba_params(c.decoder) + (9 + 25) * c1 * c1 + 2 * c1 + 3 * c1 * C + C;
  EXPECT_EQ(parameter_count(c), expected);
  EXPECT_EQ(parameter_count(c), parameter_count(c));
  EXPECT_GT(forward_macs(c), 0.0);
}

TEST(Model, FloatAndDoubleModelsAgree) {
  Dms2fModel<float> f32(toy_config(), 18);
  Dms2fModel<double> f64(toy_config(), 18);
  std::mt19937_64 rng(18);
  const Tensor<double> x = random_tensor({8, 8, 12}, rng);
  NoGradGuard guard;
  const Matrix<double> a = f32.forward(Var<float>(x.cast<float>()), false).matrix().cast<double>();
  const Matrix<double> b = f64.forward(Var<double>(x), false).matrix();
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-4 * std::max(1.0, b.cwiseAbs().maxCoeff()));
}

TEST(Model, SameSeedGivesIdenticalOutputs) {
  Dms2fModel<double> a(toy_config(), 19), b(toy_config(), 19);
  std::mt19937_64 rng(19);
  const Var<double> x(random_tensor({8, 8, 12}, rng));
  NoGradGuard guard;
  EXPECT_EQ(a.forward(x, false).matrix(), b.forward(x, false).matrix());
}
