#pragma once

#include "dms2f/ops.hpp"

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace dms2f {

template <typename Scalar>
using ParamList = std::vector<Parameter<Scalar>*>;

template <typename Scalar>
using BufferList = std::vector<std::pair<std::string, Matrix<Scalar>*>>;

/// U(-b, b) with b = 1 / sqrt(fan_in), which keeps the variance of a chain of
/// activation-free layers from growing. Values are drawn in double so float
/// and double models built from one seed agree.
template <typename Scalar>
Tensor<Scalar> fan_in_uniform(Shape shape, Index fan_in, std::mt19937_64& rng);

template <typename Scalar>
Tensor<Scalar> uniform(Shape shape, double lo, double hi, std::mt19937_64& rng);

template <typename Scalar>
class Linear {
 public:
  Linear(const std::string& name, Index in, Index out, bool with_bias, std::mt19937_64& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const;
  void collect(ParamList<Scalar>& out);

  Parameter<Scalar> weight;  // (in, out)
  std::optional<Parameter<Scalar>> bias;
};

template <typename Scalar>
class Conv2d {
 public:
  Conv2d(const std::string& name, Index in, Index out, Index kernel, std::mt19937_64& rng);

  Var<Scalar> operator()(const Var<Scalar>& x) const;
  void collect(ParamList<Scalar>& out);
  Index kernel() const { return kernel_; }

  Parameter<Scalar> weight;  // (k, k, in, out)
  Parameter<Scalar> bias;

 private:
  Index kernel_;
};

template <typename Scalar>
class BatchNorm2d {
 public:
  BatchNorm2d(const std::string& name, Index channels);

  Var<Scalar> operator()(const Var<Scalar>& x, bool training);
  void collect(ParamList<Scalar>& out);
  void collect_buffers(BufferList<Scalar>& out);

  Parameter<Scalar> gamma;
  Parameter<Scalar> beta;
  BatchNormState<Scalar> state;

 private:
  std::string name_;
};

}  // namespace dms2f
