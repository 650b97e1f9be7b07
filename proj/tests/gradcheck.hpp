#pragma once

#include "dms2f/ops.hpp"

#include <algorithm>
#include <functional>
#include <random>

namespace dms2f::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) for d loss / d leaf,
/// numeric by central differences with step h.
inline double gradient_error(const std::function<Var<double>()>& loss, const Var<double>& leaf, double h = 1e-4) {
  leaf.zero_grad();
  backward(loss());
  const Matrix<double> analytic = leaf.grad();
  Matrix<double> numeric(analytic.rows(), analytic.cols());
  double* value = leaf.node()->value.data();
  for (Index i = 0; i < analytic.size(); ++i) {
    const double saved = value[i];
    value[i] = saved + h;
    const double up = loss().value().item();
    value[i] = saved - h;
    const double down = loss().value().item();
    value[i] = saved;
    numeric.data()[i] = (up - down) / (2 * h);
  }
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

/// Same measure restricted to `count` randomly chosen coordinates of leaf,
/// for tensors too large to difference exhaustively.
inline double sampled_gradient_error(const std::function<Var<double>()>& loss, const Var<double>& leaf, Index count,
                                     std::mt19937_64& rng, double h = 1e-4) {
  leaf.zero_grad();
  backward(loss());
  const Matrix<double> full = leaf.grad();
  std::vector<Index> picks(static_cast<std::size_t>(full.size()));
  for (Index i = 0; i < full.size(); ++i) picks[static_cast<std::size_t>(i)] = i;
  std::shuffle(picks.begin(), picks.end(), rng);
  picks.resize(static_cast<std::size_t>(std::min(count, full.size())));
  Eigen::VectorXd analytic(static_cast<Index>(picks.size())), numeric(static_cast<Index>(picks.size()));
  double* value = leaf.node()->value.data();
  for (std::size_t j = 0; j < picks.size(); ++j) {
    const Index i = picks[j];
    const double saved = value[i];
    value[i] = saved + h;
    const double up = loss().value().item();
    value[i] = saved - h;
    const double down = loss().value().item();
    value[i] = saved;
    analytic[static_cast<Index>(j)] = full.data()[i];
    numeric[static_cast<Index>(j)] = (up - down) / (2 * h);
  }
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

/// Fixed random projection so the checked loss exercises every output entry.
inline Var<double> probe_loss(const Var<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Var<double> w(random_tensor(y.shape(), rng));
  return sum(y * w);
}

}  // namespace dms2f::testing
