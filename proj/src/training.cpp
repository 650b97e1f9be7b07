#include "dms2f/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace dms2f {

void TrainConfig::validate(Index patch_side) const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be > 0");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) fail("weight_decay must be >= 0");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(val_fraction >= 0 && val_fraction < 1)) fail("val_fraction must lie in [0, 1)");
  if (stride < 1 || stride > patch_side) fail("stride must lie in [1, patch]");
  try {
    mask.validate(patch_side);
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

template <typename Scalar>
Var<Scalar> mse_loss(const Var<Scalar>& x_hat, const Var<Scalar>& x) {
  if (x_hat.shape() != x.shape()) {
    throw ShapeError("mse_loss: prediction " + to_string(x_hat.shape()) + " vs target " + to_string(x.shape()));
  }
  Var<Scalar> diff = x_hat - x;
  return mean(diff * diff);
}

template <typename Scalar>
void adam_step(const ParamList<Scalar>& params, AdamState<Scalar>& state, const AdamConfig& config) {
  if (state.m.empty()) {
    for (const Parameter<Scalar>* p : params) {
      state.m.push_back(Matrix<Scalar>::Zero(p->value().rows(), p->value().cols()));
      state.v.push_back(Matrix<Scalar>::Zero(p->value().rows(), p->value().cols()));
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (const Parameter<Scalar>* p : params) {
    if (!p->grad().allFinite()) {
      throw NumericError("adam_step: non-finite gradient in parameter '" + p->name() + "', step skipped");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, double(state.step));
  const auto b1 = Scalar(config.beta1), b2 = Scalar(config.beta2), wd = Scalar(config.weight_decay);
  const auto step_size = Scalar(config.lr / bc1), root_bc2 = Scalar(std::sqrt(bc2)), eps = Scalar(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->value().matrix().array();
    const Matrix<Scalar> g = params[i]->grad() + wd * params[i]->value().matrix();
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    m = b1 * m + (1 - b1) * g.array();
    v = b2 * v + (1 - b2) * g.array().square();
    theta -= step_size * m / (v.sqrt() / root_bc2 + eps);
  }
}

namespace {

// Mean squared reconstruction error of unmasked patches, eval mode.
double evaluate(Dms2fModel<float>& model, const PatchSet<float>& set, const std::vector<Index>& ids, Index batch) {
  NoGradGuard guard;
  const Index per = set.patch_h * set.patch_w;
  const Index C = set.patches.dim(3);
  double total = 0.0;
  for (std::size_t start = 0; start < ids.size(); start += std::size_t(batch)) {
    const Index n = std::min<Index>(batch, Index(ids.size() - start));
    Tensor<float> x({n, set.patch_h, set.patch_w, C});
    for (Index b = 0; b < n; ++b) x.matrix().middleRows(b * per, per) = set.patch(ids[start + std::size_t(b)]);
    const Var<float> y = model.forward(Var<float>(x), false);
    total += (y.matrix() - x.matrix()).template cast<double>().squaredNorm();
  }
  return total / double(Index(ids.size()) * per * C);
}

}  // namespace

FitResult fit(const HsiCube& cube, const ModelConfig& model_config, const TrainConfig& tc,
              const std::function<void(const EpochRecord&)>& on_epoch) {
  cube.validate();
  model_config.validate();
  tc.validate(model_config.patch);
  if (model_config.bands != cube.bands) {
    throw ShapeError("fit: cube has " + std::to_string(cube.bands) + " bands, model expects " +
                     std::to_string(model_config.bands));
  }
  const PatchSet<float> set = extract_patches(cube.tensor(), model_config.patch, model_config.patch, tc.stride);
  const Index total = set.count();
  if (total < 2) throw std::invalid_argument("fit: cube yields " + std::to_string(total) + " patch, need >= 2");

  // Data order and masks use their own stream so that the model init depends
  // on the seed alone.
  std::mt19937_64 rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), Index(0));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<Index>(std::floor(tc.val_fraction * double(total)));
  if (tc.val_fraction > 0 && n_val == 0) {
    throw std::invalid_argument("fit: val_fraction " + std::to_string(tc.val_fraction) + " of " +
                                std::to_string(total) + " patches leaves an empty validation split");
  }
  const std::vector<Index> val_ids(order.begin(), order.begin() + n_val);
  std::vector<Index> train_ids(order.begin() + n_val, order.end());
  const std::vector<Index>& select_ids = n_val > 0 ? val_ids : train_ids;

  Dms2fModel<float> model(model_config, tc.seed);
  const ParamList<float> params = model.parameters();
  AdamState<float> adam;
  const AdamConfig ac{tc.lr, tc.weight_decay};

  FitResult result;
  if (tc.epochs == 0) {
    result.checkpoint = capture(model, tc.seed, 0, evaluate(model, set, select_ids, tc.batch_size));
    return result;
  }

  const Index per = set.patch_h * set.patch_w;
  const Index C = cube.bands;
  double best = std::numeric_limits<double>::infinity();
  for (Index epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(train_ids.begin(), train_ids.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train_ids.size(); start += std::size_t(tc.batch_size)) {
      const Index n = std::min<Index>(tc.batch_size, Index(train_ids.size() - start));
      Tensor<float> target({n, set.patch_h, set.patch_w, C});
      for (Index b = 0; b < n; ++b) {
        target.matrix().middleRows(b * per, per) = set.patch(train_ids[start + std::size_t(b)]);
      }
      Tensor<float> input = target;
      for (Index b = 0; b < n; ++b) {
        apply_random_mask<float>(input.matrix().middleRows(b * per, per), set.patch_h, set.patch_w, tc.mask, rng);
      }
      for (Parameter<float>* p : params) p->zero_grad();
      const Var<float> loss = mse_loss(model.forward(Var<float>(input), true), Var<float>(target));
      backward(loss);
      adam_step(params, adam, ac);
      loss_sum += double(loss.value().item()) * double(n);
    }
    EpochRecord rec{epoch, loss_sum / double(train_ids.size()), evaluate(model, set, select_ids, tc.batch_size)};
    result.history.push_back(rec);
    if (rec.val_loss < best) {
      best = rec.val_loss;
      result.checkpoint = capture(model, tc.seed, epoch, rec.val_loss);
    }
    if (on_epoch) on_epoch(rec);
  }
  if (!std::isfinite(best)) throw NumericError("fit: validation loss never became finite");
  return result;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,val_loss\n";
  char line[96];
  for (const EpochRecord& r : history) {
    std::snprintf(line, sizeof line, "%lld,%.17g,%.17g\n", static_cast<long long>(r.epoch), r.train_loss, r.val_loss);
    out << line;
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

#define DMS2F_INSTANTIATE(S)                                                           \
  template Var<S> mse_loss<S>(const Var<S>&, const Var<S>&);                           \
  template void adam_step<S>(const ParamList<S>&, AdamState<S>&, const AdamConfig&);

DMS2F_INSTANTIATE(float)
DMS2F_INSTANTIATE(double)
#undef DMS2F_INSTANTIATE

}  // namespace dms2f
