#include "dms2f/nn.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

using namespace dms2f;
using dms2f::testing::gradient_error;
using dms2f::testing::probe_loss;
using dms2f::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-3;

Var<double> leaf(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  return Var<double>(random_tensor(std::move(shape), rng, scale), true);
}

}  // namespace

TEST(Conv2d, OneByOneIdentityIsPassThrough) {
  std::mt19937_64 rng(1);
  Var<double> x(random_tensor({4, 5, 3}, rng));
  Tensor<double> w({1, 1, 3, 3});
  w.matrix().setIdentity();
  Var<double> bias(Tensor<double>(Shape{3}));
  Var<double> y = conv2d(x, Var<double>(w), &bias, 1);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.matrix(), x.matrix());
}

TEST(Conv2d, AllOnesStencilSumsNeighbourhood) {
  Var<double> x(Tensor<double>::constant({3, 3, 1}, 1.0));
  Var<double> w(Tensor<double>::constant({3, 3, 1, 1}, 1.0));
  Var<double> y = conv2d(x, w, static_cast<const Var<double>*>(nullptr), 3);
  EXPECT_DOUBLE_EQ(y.matrix()(4, 0), 9.0);  // centre pixel (1,1)
  EXPECT_DOUBLE_EQ(y.matrix()(0, 0), 4.0);  // corner sees a 2x2 window
}

TEST(Conv2d, RejectsMismatchedWeights) {
  Var<double> x(Tensor<double>({4, 4, 3}));
  Var<double> w(Tensor<double>({3, 3, 2, 5}));
  try {
    conv2d(x, w, static_cast<const Var<double>*>(nullptr), 3);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("3 input channels"), std::string::npos) << e.what();
  }
  EXPECT_THROW(conv2d(x, Var<double>(Tensor<double>({3, 3, 3, 5})), static_cast<const Var<double>*>(nullptr), 5),
               ShapeError);
  EXPECT_THROW(conv2d(x, Var<double>(Tensor<double>({2, 2, 3, 5})), static_cast<const Var<double>*>(nullptr), 2),
               ShapeError);
}

TEST(Conv2d, IsLinearInInput) {
  std::mt19937_64 rng(2);
  Var<double> w(random_tensor({5, 5, 3, 4}, rng));
  Tensor<double> a = random_tensor({2, 6, 7, 3}, rng);
  Tensor<double> b = random_tensor({2, 6, 7, 3}, rng);
  const double s = 1.7, t = -0.3;
  Tensor<double> mix(a.shape(), s * a.matrix() + t * b.matrix());
  const Var<double>* none = nullptr;
  Matrix<double> lhs = conv2d(Var<double>(mix), w, none, 5).matrix();
  Matrix<double> rhs = s * conv2d(Var<double>(a), w, none, 5).matrix() + t * conv2d(Var<double>(b), w, none, 5).matrix();
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (Index k : {1, 3, 5}) {
    Var<double> x = leaf({2, 5, 4, 3}, rng);
    Var<double> w = leaf({k, k, 3, 2}, rng);
    Var<double> b = leaf({2}, rng);
    auto loss = [&] { return sum(conv2d(x, w, &b, k)); };
    EXPECT_LT(gradient_error(loss, x), kGradTol) << "k=" << k;
    auto probe = [&] { return probe_loss(conv2d(x, w, &b, k)); };
    EXPECT_LT(gradient_error(probe, x), kGradTol) << "k=" << k;
    EXPECT_LT(gradient_error(probe, w), kGradTol) << "k=" << k;
    EXPECT_LT(gradient_error(probe, b), kGradTol) << "k=" << k;
  }
}

TEST(Primitives, ClosedFormValues) {
  Var<double> zero(Tensor<double>::constant({1}, 0.0));
  EXPECT_DOUBLE_EQ(sigmoid(zero).value().item(), 0.5);
  EXPECT_DOUBLE_EQ(gelu(zero).value().item(), 0.0);
  EXPECT_DOUBLE_EQ(silu(zero).value().item(), 0.0);
  EXPECT_NEAR(softplus(zero).value().item(), std::log(2.0), 1e-15);

  Var<double> extreme(Tensor<double>(Shape{4}, Matrix<double>{{-30.0, -5.0, 5.0, 30.0}}));
  const Matrix<double> s = sigmoid(extreme).matrix();
  EXPECT_GT(s.minCoeff(), 0.0);
  EXPECT_LT(s.maxCoeff(), 1.0);
}

TEST(Primitives, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  Var<double> x = leaf({3, 4, 5}, rng, 1.5);
  const std::vector<std::pair<std::string, std::function<Var<double>(const Var<double>&)>>> unaries = {
      {"sigmoid", [](const Var<double>& v) { return sigmoid(v); }},
      {"silu", [](const Var<double>& v) { return silu(v); }},
      {"gelu", [](const Var<double>& v) { return gelu(v); }},
      {"softplus", [](const Var<double>& v) { return softplus(v); }},
      {"exp", [](const Var<double>& v) { return exp(v); }},
      {"affine", [](const Var<double>& v) { return affine(v, -2.5, 0.75); }},
  };
  for (const auto& [name, fn] : unaries) {
    EXPECT_LT(gradient_error([&] { return probe_loss(fn(x)); }, x), kGradTol) << name;
  }

  Var<double> w = leaf({5, 6}, rng);
  Var<double> b = leaf({6}, rng);
  EXPECT_LT(gradient_error([&] { return probe_loss(linear(x, w, &b)); }, x), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(linear(x, w, &b)); }, w), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(linear(x, w, &b)); }, b), kGradTol);

  Var<double> g = leaf({5}, rng);
  Var<double> beta = leaf({5}, rng);
  EXPECT_LT(gradient_error([&] { return probe_loss(rms_norm(x, g, 1e-5)); }, x), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(rms_norm(x, g, 1e-5)); }, g), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(layer_norm(x, g, beta, 1e-5)); }, x), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(layer_norm(x, g, beta, 1e-5)); }, g), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(layer_norm(x, g, beta, 1e-5)); }, beta), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(scale_cols(x, g)); }, g), kGradTol);

  Var<double> y = leaf({3, 4, 5}, rng);
  EXPECT_LT(gradient_error([&] { return probe_loss(x * y); }, x), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(x - y); }, y), kGradTol);
}

TEST(Primitives, StructuralOpsGradients) {
  std::mt19937_64 rng(5);
  Var<double> x = leaf({2, 6, 4}, rng);
  Var<double> y = leaf({2, 6, 3}, rng);
  std::vector<Var<double>> parts{x, y};
  EXPECT_LT(gradient_error([&] { return probe_loss(concat_cols<double>(parts)); }, y), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(slice_cols(x, 1, 2)); }, x), kGradTol);
  std::vector<Var<double>> rows{x, x};
  EXPECT_LT(gradient_error([&] { return probe_loss(concat_rows<double>(rows)); }, x), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(slice_rows(x, 1, 1)); }, x), kGradTol);
  const std::vector<Index> idx{0, 3, 3, 11, 7};
  EXPECT_LT(gradient_error([&] { return probe_loss(gather_rows(x, std::span<const Index>(idx))); }, x), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(segment_mean(x, 3)); }, x), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(reshape(x, {4, 3, 4})); }, x), kGradTol);

  Var<double> w = leaf({3, 4}, rng);
  Var<double> cb = leaf({4}, rng);
  EXPECT_LT(gradient_error([&] { return probe_loss(causal_conv1d(x, w, cb, 4)); }, x), kGradTol);
  EXPECT_LT(gradient_error([&] { return probe_loss(causal_conv1d(x, w, cb, 4)); }, w), kGradTol);
}

TEST(BatchNorm, TrainAndEvalGradients) {
  std::mt19937_64 rng(6);
  BatchNorm2d<double> bn("bn", 4);
  Var<double> x = leaf({2, 3, 3, 4}, rng, 2.0);
  for (bool training : {true, false}) {
    auto loss = [&] { return probe_loss(bn(x, training)); };
    EXPECT_LT(gradient_error(loss, x), kGradTol) << training;
    EXPECT_LT(gradient_error(loss, bn.gamma.var()), kGradTol) << training;
    EXPECT_LT(gradient_error(loss, bn.beta.var()), kGradTol) << training;
  }
}

TEST(BatchNorm, TrainingNormalisesAndTracksRunningStats) {
  std::mt19937_64 rng(7);
  BatchNorm2d<double> bn("bn", 3);
  Tensor<double> t = random_tensor({64, 3}, rng, 3.0);
  t.matrix().array() += 5.0;
  Var<double> y = bn(Var<double>(t), true);
  EXPECT_LT(y.matrix().colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::RowVectorXd mu = t.matrix().colwise().mean();
  EXPECT_LT((bn.state.running_mean - 0.1 * mu).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BatchNorm, RejectsEmptyBatch) {
  BatchNorm2d<double> bn("bn", 3);
  Var<double> empty(Tensor<double>({0, 3}));
  EXPECT_THROW(bn(empty, true), ShapeError);
}

TEST(Backward, QuadraticGradient) {
  Parameter<double> p("p", Tensor<double>(Shape{2}, Matrix<double>{{1.0, 2.0}}));
  backward(sum(p.var() * p.var()));
  EXPECT_EQ(p.grad(), (Matrix<double>{{2.0, 4.0}}));
}

TEST(Backward, SigmoidAtZeroIsQuarterInput) {
  Parameter<double> w("w", Tensor<double>({3, 1}));
  Var<double> x(Tensor<double>(Shape{1, 3}, Matrix<double>{{0.5, -2.0, 3.0}}));
  backward(sum(sigmoid(matmul(x, w.var()))));
  EXPECT_EQ(w.grad(), (Matrix<double>{{0.125}, {-0.5}, {0.75}}));
}

TEST(Backward, CompositePipelineMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  Var<double> x = leaf({6, 6, 2}, rng);
  Var<double> w = leaf({3, 3, 2, 3}, rng, 0.5);
  auto loss = [&] { return sum(gelu(conv2d(x, w, static_cast<const Var<double>*>(nullptr), 3))); };
  EXPECT_LT(gradient_error(loss, x), kGradTol);
  EXPECT_LT(gradient_error(loss, w), kGradTol);
}

TEST(Backward, RejectsNonScalarLoss) {
  Var<double> x(Tensor<double>::constant({2, 2}, 1.0), true);
  EXPECT_THROW(backward(x * x), ShapeError);
}

TEST(Backward, ParameterGradientsAccumulateUntilCleared) {
  Parameter<double> p("p", Tensor<double>::constant({3}, 2.0));
  backward(sum(p.var() * p.var()));
  backward(sum(p.var() * p.var()));
  EXPECT_EQ(p.grad(), Matrix<double>::Constant(1, 3, 8.0));
  p.zero_grad();
  EXPECT_EQ(p.grad(), Matrix<double>::Zero(1, 3));
}

TEST(Backward, NoGradGuardStopsRecording) {
  Parameter<double> p("p", Tensor<double>::constant({3}, 2.0));
  Var<double> y;
  {
    NoGradGuard guard;
    y = sum(p.var() * p.var());
  }
  EXPECT_FALSE(y.requires_grad());
  backward(y);
  EXPECT_EQ(p.grad(), Matrix<double>::Zero(1, 3));
}

TEST(Backward, CheckpointMatchesDirectGradient) {
  std::mt19937_64 rng(9);
  Parameter<double> w("w", random_tensor({4, 4}, rng));
  Var<double> x = leaf({5, 4}, rng);
  std::function<Var<double>(const Var<double>&)> block = [&](const Var<double>& in) {
    return gelu(matmul(in, w.var())) * in;
  };
  backward(probe_loss(block(x)));
  const Matrix<double> direct_w = w.grad();
  const Matrix<double> direct_x = x.grad();
  w.zero_grad();
  x.zero_grad();
  backward(probe_loss(checkpoint(block, x)));
  EXPECT_LT((w.grad() - direct_w).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((x.grad() - direct_x).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Determinism, SameSeedSameOutputs) {
  auto run = [] {
    std::mt19937_64 rng(10);
    Conv2d<double> conv("c", 3, 4, 5, rng);
    Var<double> x(random_tensor({2, 7, 7, 3}, rng));
    return gelu(conv(x)).matrix();
  };
  const Matrix<double> a = run();
  const Matrix<double> b = run();
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}
