#include "dms2f/training.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

using namespace dms2f;
using dms2f::testing::gradient_error;
using dms2f::testing::random_tensor;

namespace {

ModelConfig small_model(Index bands) {
  ModelConfig c;
  c.bands = bands;
  c.patch = 8;
  c.c2 = 8;
  c.k = 4;
  c.spatial = {16, 4, 3, 2};
  c.spectral = {4, 4, 3, 2};
  c.decoder = {16, 4, 3, 2};
  c.set_embed(16);
  return c;
}

HsiCube small_scene(std::uint64_t seed = 0) {
  SceneSpec s;
  s.height = 24;
  s.width = 24;
  s.bands = 12;
  s.anomalies = 1;
  s.seed = seed;
  return normalize(synth_scene(s));
}

TrainConfig quick_train(Index epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.stride = 4;
  t.val_fraction = 0.2;
  t.seed = 3;
  t.mask = MaskSpec{0.5, 2, 4, 0.0};
  return t;
}

}  // namespace

TEST(MseLoss, ZeroForEqualInputs) {
  std::mt19937_64 rng(1);
  const Var<double> x(random_tensor({2, 3, 4}, rng));
  EXPECT_EQ(mse_loss(x, x).value().item(), 0.0);
}

TEST(MseLoss, UnitOffsetGivesOne) {
  std::mt19937_64 rng(2);
  const Tensor<double> x = random_tensor({3, 3, 5}, rng);
  Tensor<double> y = x;
  y.matrix().array() += 1.0;
  EXPECT_DOUBLE_EQ(mse_loss(Var<double>(y), Var<double>(x)).value().item(), 1.0);
}

TEST(MseLoss, GradientClosedFormAndFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Tensor<double> target = random_tensor({2, 3, 4}, rng);
  const Var<double> x_hat(random_tensor({2, 3, 4}, rng), true);
  backward(mse_loss(x_hat, Var<double>(target)));
  const Matrix<double> expected = 2.0 * (x_hat.matrix() - target.matrix()) / 24.0;
  EXPECT_LT((x_hat.grad() - expected).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT(gradient_error([&] { return mse_loss(x_hat, Var<double>(target)); }, x_hat), 1e-6);
}

TEST(MseLoss, ZeroGradientAtOptimumAndShapeCheck) {
  std::mt19937_64 rng(4);
  const Var<double> x(random_tensor({4, 4}, rng), true);
  backward(mse_loss(x, x.detach()));
  EXPECT_TRUE((x.grad().array() == 0.0).all());
  EXPECT_THROW(mse_loss(x, Var<double>(Tensor<double>({4, 3}))), ShapeError);
}

TEST(Adam, FirstStepOnSquareMovesByLearningRate) {
  Parameter<double> theta("theta", Tensor<double>::constant({1}, 1.0));
  AdamState<double> state;
  const ParamList<double> params{&theta};
  backward(sum(theta.var() * theta.var()));
  adam_step(params, state, AdamConfig{0.1, 0.0});
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(theta.value().item(), 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(theta.value().item(), 0.9, 1e-8);
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, ZeroGradientAndNoDecayLeavesParameters) {
  std::mt19937_64 rng(5);
  Parameter<double> p("p", random_tensor({3, 2}, rng));
  const Matrix<double> before = p.value().matrix();
  AdamState<double> state;
  p.zero_grad();
  for (int i = 0; i < 5; ++i) adam_step(ParamList<double>{&p}, state, AdamConfig{0.1, 0.0});
  EXPECT_TRUE(p.value().matrix() == before);
}

TEST(Adam, WeightDecayEntersTheGradient) {
  Parameter<double> p("p", Tensor<double>::constant({1}, 2.0));
  AdamState<double> state;
  p.zero_grad();
  adam_step(ParamList<double>{&p}, state, AdamConfig{0.01, 0.5});
  // g = 0 + 0.5 * 2 = 1, so the first step is -lr.
  EXPECT_NEAR(p.value().item(), 2.0 - 0.01, 1e-9);
}

TEST(Adam, NonFiniteGradientAbortsBeforeAnyUpdate) {
  Parameter<double> a("a", Tensor<double>::constant({2}, 1.0));
  Parameter<double> b("b", Tensor<double>::constant({2}, 1.0));
  a.grad().setConstant(0.5);
  b.grad().setConstant(0.5);
  b.grad()(0, 1) = std::numeric_limits<double>::quiet_NaN();
  AdamState<double> state;
  try {
    adam_step(ParamList<double>{&a, &b}, state, AdamConfig{0.1, 0.0});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos) << e.what();
  }
  EXPECT_TRUE((a.value().matrix().array() == 1.0).all());
  EXPECT_TRUE((b.value().matrix().array() == 1.0).all());
  EXPECT_EQ(state.step, 0);
}

TEST(Adam, ConvergesOnConvexQuadratic) {
  // f(theta) = sum_i w_i (theta_i - c_i)^2
  const Eigen::Vector4d w(1.0, 3.0, 0.5, 2.0), c(0.5, -1.0, 2.0, 0.0);
  Parameter<double> p("p", Tensor<double>({4}, Matrix<double>::Constant(1, 4, 3.0)));
  auto loss = [&] { return ((p.value().matrix().transpose() - c).array().square() * w.array()).sum(); };
  const double initial = loss();
  AdamState<double> state;
  std::vector<double> history;
  for (int step = 0; step < 200; ++step) {
    p.grad() = (2.0 * w.array() * (p.value().matrix().transpose() - c).array()).matrix().transpose();
    adam_step(ParamList<double>{&p}, state, AdamConfig{0.05, 0.0});
    history.push_back(loss());
  }
  EXPECT_LT(history.back(), 1e-3 * initial);
  // Far from the optimum the steps have constant size, so the loss falls monotonically.
  for (std::size_t i = 1; i < 40; ++i) EXPECT_LT(history[i], history[i - 1]) << "step " << i;
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate(16));
  t.lr = 0.0;
  EXPECT_THROW(t.validate(16), std::invalid_argument);
  t = TrainConfig{};
  t.val_fraction = 1.0;
  EXPECT_THROW(t.validate(16), std::invalid_argument);
  t = TrainConfig{};
  t.batch_size = 0;
  EXPECT_THROW(t.validate(16), std::invalid_argument);
  t = TrainConfig{};
  t.mask.max_side = 17;
  EXPECT_THROW(t.validate(16), std::invalid_argument);
}

TEST(Fit, EmptyValidationSplitRejected) {
  TrainConfig t = quick_train(1);
  t.val_fraction = 0.01;  // 36 patches -> floor(0.36) = 0
  EXPECT_THROW(fit(small_scene(), small_model(12), t), std::invalid_argument);
}

TEST(Fit, NeedsTwoPatches) {
  SceneSpec s;
  s.height = 8;
  s.width = 8;
  s.bands = 12;
  s.anomalies = 0;
  EXPECT_THROW(fit(normalize(synth_scene(s)), small_model(12), quick_train(1)), std::invalid_argument);
}

TEST(Fit, BandMismatchRejected) {
  EXPECT_THROW(fit(small_scene(), small_model(10), quick_train(1)), ShapeError);
}

TEST(Fit, ZeroEpochsReturnsInitialisation) {
  const TrainConfig t = quick_train(0);
  const FitResult r = fit(small_scene(), small_model(12), t);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.checkpoint.epoch, 0);
  Dms2fModel<float> fresh(small_model(12), t.seed);
  const ParamList<float> params = fresh.parameters();
  ASSERT_EQ(params.size(), r.checkpoint.parameters.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(r.checkpoint.parameters[i].name, params[i]->name());
    EXPECT_TRUE(r.checkpoint.parameters[i].value.matrix() == params[i]->value().matrix()) << params[i]->name();
  }
  EXPECT_TRUE(std::isfinite(r.checkpoint.val_loss));
}

TEST(Fit, SameSeedGivesIdenticalHistoriesAndSelectsMinimum) {
  const HsiCube cube = small_scene();
  const TrainConfig t = quick_train(4);
  const FitResult a = fit(cube, small_model(12), t);
  const FitResult b = fit(cube, small_model(12), t);
  ASSERT_EQ(a.history.size(), 4u);
  ASSERT_EQ(b.history.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
    EXPECT_GE(a.history[i].train_loss, 0.0);
  }
  double best = std::numeric_limits<double>::infinity();
  Index best_epoch = 0;
  for (const EpochRecord& r : a.history) {
    if (r.val_loss < best) {
      best = r.val_loss;
      best_epoch = r.epoch;
    }
  }
  EXPECT_EQ(a.checkpoint.val_loss, best);
  EXPECT_EQ(a.checkpoint.epoch, best_epoch);
  for (std::size_t i = 0; i < a.checkpoint.parameters.size(); ++i) {
    EXPECT_TRUE(a.checkpoint.parameters[i].value.matrix() == b.checkpoint.parameters[i].value.matrix());
  }

  TrainConfig other = t;
  other.seed = 4;
  EXPECT_NE(fit(cube, small_model(12), other).history[0].train_loss, a.history[0].train_loss);
}

TEST(Fit, ZeroValidationFractionSelectsOnTrainingSet) {
  TrainConfig t = quick_train(2);
  t.val_fraction = 0.0;
  const FitResult r = fit(small_scene(), small_model(12), t);
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.checkpoint.val_loss, std::min(r.history[0].val_loss, r.history[1].val_loss));
}

TEST(Fit, CallbackSeesEveryEpoch) {
  std::vector<Index> seen;
  fit(small_scene(), small_model(12), quick_train(3), [&](const EpochRecord& r) { seen.push_back(r.epoch); });
  EXPECT_EQ(seen, (std::vector<Index>{1, 2, 3}));
}

TEST(Fit, DefaultSceneLossHalvesWithinTwentyEpochs) {
  const HsiCube cube = normalize(synth_scene(SceneSpec{}));
  ModelConfig m;
  m.bands = cube.bands;
  TrainConfig t;
  t.epochs = 20;
  const FitResult r = fit(cube, m, t);
  ASSERT_EQ(r.history.size(), 20u);
  EXPECT_LT(r.history[19].train_loss, 0.5 * r.history[0].train_loss);
}

TEST(History, CsvLayout) {
  const auto p = std::filesystem::temp_directory_path() / "dms2f_history.csv";
  write_history_csv({{1, 0.5, 0.25}, {2, 0.125, 0.0625}}, p);
  std::ifstream in(p);
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  EXPECT_EQ(l1, "epoch,train_loss,val_loss");
  EXPECT_EQ(l2, "1,0.5,0.25");
  EXPECT_EQ(l3, "2,0.125,0.0625");
}
