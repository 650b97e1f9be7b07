#pragma once

// Differentiable primitives. Every function records itself on the graph when
// an input requires a gradient; shapes follow the "rows x channels" view of
// Tensor, so pixel maps (B,h,w,c) and token sequences (S*L,c) share one layout.

#include "dms2f/autograd.hpp"

#include <span>

namespace dms2f {

// Elementwise arithmetic on identically shaped operands.
template <typename Scalar> Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b);

/// scale * x + shift, elementwise.
template <typename Scalar> Var<Scalar> affine(const Var<Scalar>& x, Scalar scale, Scalar shift);
/// x + bias, bias broadcast over rows; bias has x.cols() elements.
template <typename Scalar> Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& bias);
/// x scaled per column by w (w has x.cols() elements).
template <typename Scalar> Var<Scalar> scale_cols(const Var<Scalar>& x, const Var<Scalar>& w);

/// (R x K) * (K x N); the result keeps x's leading shape.
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& x, const Var<Scalar>& w);
/// matmul followed by an optional bias (pass nullptr for none).
template <typename Scalar> Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>* bias);

/// Same-padded 2-D convolution. x is (B,h,w,cin) or (h,w,cin); weights are
/// (k,k,cin,cout); bias has cout elements or is null.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weights, const Var<Scalar>* bias, Index kernel);

/// Depthwise causal 1-D convolution along consecutive rows. x holds
/// rows/seq_len independent sequences; weights are (k, channels), the last
/// tap multiplying the current step.
template <typename Scalar>
Var<Scalar> causal_conv1d(const Var<Scalar>& x, const Var<Scalar>& weights, const Var<Scalar>& bias, Index seq_len);

template <typename Scalar> Var<Scalar> sigmoid(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> silu(const Var<Scalar>& x);
/// Exact GELU, x * Phi(x).
template <typename Scalar> Var<Scalar> gelu(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> softplus(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> exp(const Var<Scalar>& x);

/// Per-row RMS normalisation with a learned per-channel gain.
template <typename Scalar> Var<Scalar> rms_norm(const Var<Scalar>& x, const Var<Scalar>& weight, Scalar eps);
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, Scalar eps);

template <typename Scalar>
struct BatchNormState {
  Matrix<Scalar> running_mean;
  Matrix<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);
};

/// Per-channel normalisation over all rows. In training mode the batch
/// statistics are used and the running estimates are updated (unbiased
/// variance); in eval mode the running estimates are used.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormState<Scalar>& state, bool training);

template <typename Scalar> Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts);
template <typename Scalar> Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count);
/// Concatenate along the leading axis; all parts must share trailing axes.
template <typename Scalar> Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts);
/// Rows [start, start+count) along the leading axis.
template <typename Scalar> Var<Scalar> slice_rows(const Var<Scalar>& x, Index start, Index count);
/// out.row(i) = x.row(index[i]); repeated indices accumulate on backward.
template <typename Scalar> Var<Scalar> gather_rows(const Var<Scalar>& x, std::span<const Index> index);
template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);
/// Mean over each run of `segment` consecutive rows.
template <typename Scalar> Var<Scalar> segment_mean(const Var<Scalar>& x, Index segment);

template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& x);

}  // namespace dms2f
