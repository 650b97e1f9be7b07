#include "dms2f/nn.hpp"

#include <cmath>

namespace dms2f {

template <typename Scalar>
Tensor<Scalar> uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  Scalar* p = t.data();
  for (Index i = 0; i < t.size(); ++i) p[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> fan_in_uniform(Shape shape, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform<Scalar>(std::move(shape), -bound, bound, rng);
}

template <typename Scalar>
Linear<Scalar>::Linear(const std::string& name, Index in, Index out, bool with_bias, std::mt19937_64& rng)
    : weight(name + ".weight", fan_in_uniform<Scalar>({in, out}, in, rng)) {
  if (with_bias) bias.emplace(name + ".bias", Tensor<Scalar>(Shape{out}));
}

template <typename Scalar>
Var<Scalar> Linear<Scalar>::operator()(const Var<Scalar>& x) const {
  return linear(x, weight.var(), bias ? &bias->var() : nullptr);
}

template <typename Scalar>
void Linear<Scalar>::collect(ParamList<Scalar>& out) {
  out.push_back(&weight);
  if (bias) out.push_back(&*bias);
}

template <typename Scalar>
Conv2d<Scalar>::Conv2d(const std::string& name, Index in, Index out, Index kernel, std::mt19937_64& rng)
    : weight(name + ".weight", fan_in_uniform<Scalar>({kernel, kernel, in, out}, kernel * kernel * in, rng)),
      bias(name + ".bias", Tensor<Scalar>(Shape{out})),
      kernel_(kernel) {}

template <typename Scalar>
Var<Scalar> Conv2d<Scalar>::operator()(const Var<Scalar>& x) const {
  return conv2d(x, weight.var(), &bias.var(), kernel_);
}

template <typename Scalar>
void Conv2d<Scalar>::collect(ParamList<Scalar>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename Scalar>
BatchNorm2d<Scalar>::BatchNorm2d(const std::string& name, Index channels)
    : gamma(name + ".gamma", Tensor<Scalar>::constant({channels}, Scalar(1))),
      beta(name + ".beta", Tensor<Scalar>(Shape{channels})),
      name_(name) {
  state.running_mean = Matrix<Scalar>::Zero(1, channels);
  state.running_var = Matrix<Scalar>::Ones(1, channels);
}

template <typename Scalar>
Var<Scalar> BatchNorm2d<Scalar>::operator()(const Var<Scalar>& x, bool training) {
  return batch_norm(x, gamma.var(), beta.var(), state, training);
}

template <typename Scalar>
void BatchNorm2d<Scalar>::collect(ParamList<Scalar>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

template <typename Scalar>
void BatchNorm2d<Scalar>::collect_buffers(BufferList<Scalar>& out) {
  out.emplace_back(name_ + ".running_mean", &state.running_mean);
  out.emplace_back(name_ + ".running_var", &state.running_var);
}

#define DMS2F_INSTANTIATE(S)                                                                  \
  template Tensor<S> uniform<S>(Shape, double, double, std::mt19937_64&);                    \
  template Tensor<S> fan_in_uniform<S>(Shape, Index, std::mt19937_64&);                     \
  template class Linear<S>;                                                                   \
  template class Conv2d<S>;                                                                   \
  template class BatchNorm2d<S>;

DMS2F_INSTANTIATE(float)
DMS2F_INSTANTIATE(double)
#undef DMS2F_INSTANTIATE

}  // namespace dms2f
