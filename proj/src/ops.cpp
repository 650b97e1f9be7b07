#include "dms2f/ops.hpp"

#include <cmath>
#include <sstream>

namespace dms2f {

namespace {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename Scalar>
Shape with_last(Shape shape, Index last) {
  if (shape.empty()) return {1, last};
  shape.back() = last;
  return shape;
}

template <typename Scalar>
void accumulate_if(Node<Scalar>& node, const Matrix<Scalar>& g) {
  if (node.requires_grad) node.accumulate(g);
}

// exp(-x) may overflow to inf, which still gives the correct limit 0.
template <typename Scalar>
Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> stable_sigmoid(const Matrix<Scalar>& x) {
  return (Scalar(1) + (-x.array()).exp()).inverse();
}

template <typename Scalar>
Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> as_row(const Tensor<Scalar>& t) {
  return Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(t.data(), t.size());
}

template <typename Scalar, typename Derived>
Matrix<Scalar> shaped_like(const Tensor<Scalar>& like, const Eigen::MatrixBase<Derived>& expr) {
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> row = expr;
  return Eigen::Map<const Matrix<Scalar>>(row.data(), like.rows(), like.cols());
}

// Same-padded patch matrix: one row per output pixel, (ky, kx, cin) columns.
template <typename Scalar>
Matrix<Scalar> im2col(const Matrix<Scalar>& x, Index batch, Index height, Index width, Index kernel) {
  const Index cin = x.cols();
  const Index pad = kernel / 2;
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(batch * height * width, kernel * kernel * cin);
  for (Index b = 0; b < batch; ++b) {
    for (Index y = 0; y < height; ++y) {
      for (Index xx = 0; xx < width; ++xx) {
        const Index row = (b * height + y) * width + xx;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index sx = xx + kx - pad;
            if (sx < 0 || sx >= width) continue;
            cols.row(row).segment((ky * kernel + kx) * cin, cin) = x.row((b * height + sy) * width + sx);
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
Matrix<Scalar> col2im(const Matrix<Scalar>& cols, Index batch, Index height, Index width, Index kernel, Index cin) {
  const Index pad = kernel / 2;
  Matrix<Scalar> x = Matrix<Scalar>::Zero(batch * height * width, cin);
  for (Index b = 0; b < batch; ++b) {
    for (Index y = 0; y < height; ++y) {
      for (Index xx = 0; xx < width; ++xx) {
        const Index row = (b * height + y) * width + xx;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index sx = xx + kx - pad;
            if (sx < 0 || sx >= width) continue;
            x.row((b * height + sy) * width + sx) += cols.row(row).segment((ky * kernel + kx) * cin, cin);
          }
        }
      }
    }
  }
  return x;
}

template <typename Scalar, typename F, typename D>
Var<Scalar> unary(const Var<Scalar>& x, F f, D dfdx) {
  Matrix<Scalar> y = f(x.matrix());
  return make_result<Scalar>(Tensor<Scalar>(x.shape(), std::move(y)), {x}, [dfdx](Node<Scalar>& self) {
    Node<Scalar>& in = *self.parents[0];
    const Matrix<Scalar> d = dfdx(in.value.matrix(), self.value.matrix());
    in.accumulate(self.grad.cwiseProduct(d));
  });
}

}  // namespace

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "add");
  return make_result<Scalar>(Tensor<Scalar>(a.shape(), a.matrix() + b.matrix()), {a, b}, [](Node<Scalar>& self) {
    accumulate_if(*self.parents[0], self.grad);
    accumulate_if(*self.parents[1], self.grad);
  });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "sub");
  return make_result<Scalar>(Tensor<Scalar>(a.shape(), a.matrix() - b.matrix()), {a, b}, [](Node<Scalar>& self) {
    accumulate_if(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
  });
}

template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "mul");
  return make_result<Scalar>(Tensor<Scalar>(a.shape(), a.matrix().cwiseProduct(b.matrix())), {a, b},
                             [](Node<Scalar>& self) {
                               Node<Scalar>& lhs = *self.parents[0];
                               Node<Scalar>& rhs = *self.parents[1];
                               if (lhs.requires_grad) lhs.accumulate(self.grad.cwiseProduct(rhs.value.matrix()));
                               if (rhs.requires_grad) rhs.accumulate(self.grad.cwiseProduct(lhs.value.matrix()));
                             });
}

template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& x, Scalar scale, Scalar shift) {
  Matrix<Scalar> y = (x.matrix().array() * scale + shift).matrix();
  return make_result<Scalar>(Tensor<Scalar>(x.shape(), std::move(y)), {x},
                             [scale](Node<Scalar>& self) { self.parents[0]->accumulate(self.grad * scale); });
}

template <typename Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& bias) {
  if (bias.value().size() != x.cols()) {
    throw ShapeError("add_bias: bias of shape " + to_string(bias.shape()) + " does not match " +
                     std::to_string(x.cols()) + " channels");
  }
  Matrix<Scalar> y = x.matrix().rowwise() + as_row(bias.value());
  return make_result<Scalar>(Tensor<Scalar>(x.shape(), std::move(y)), {x, bias}, [](Node<Scalar>& self) {
    accumulate_if(*self.parents[0], self.grad);
    Node<Scalar>& b = *self.parents[1];
    if (b.requires_grad) b.accumulate(shaped_like(b.value, self.grad.colwise().sum()));
  });
}

template <typename Scalar>
Var<Scalar> scale_cols(const Var<Scalar>& x, const Var<Scalar>& w) {
  if (w.value().size() != x.cols()) {
    throw ShapeError("scale_cols: weight of shape " + to_string(w.shape()) + " does not match " +
                     std::to_string(x.cols()) + " channels");
  }
  Matrix<Scalar> y = x.matrix().array().rowwise() * as_row(w.value()).array();
  return make_result<Scalar>(Tensor<Scalar>(x.shape(), std::move(y)), {x, w}, [](Node<Scalar>& self) {
    Node<Scalar>& in = *self.parents[0];
    Node<Scalar>& wn = *self.parents[1];
    if (in.requires_grad) in.accumulate((self.grad.array().rowwise() * as_row(wn.value).array()).matrix());
    if (wn.requires_grad) {
      Eigen::Matrix<Scalar, 1, Eigen::Dynamic> g = self.grad.cwiseProduct(in.value.matrix()).colwise().sum();
      wn.accumulate(shaped_like(wn.value, g));
    }
  });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& x, const Var<Scalar>& w) {
  if (w.value().rank() != 2 || w.rows() != x.cols()) {
    throw ShapeError("matmul: cannot multiply " + to_string(x.shape()) + " by " + to_string(w.shape()));
  }
  Matrix<Scalar> y(x.rows(), w.cols());
  y.noalias() = x.matrix() * w.matrix();
  return make_result<Scalar>(Tensor<Scalar>(with_last<Scalar>(x.shape(), w.cols()), std::move(y)), {x, w},
                             [](Node<Scalar>& self) {
                               Node<Scalar>& in = *self.parents[0];
                               Node<Scalar>& wn = *self.parents[1];
                               if (in.requires_grad) {
                                 Matrix<Scalar> g(in.value.rows(), in.value.cols());
                                 g.noalias() = self.grad * wn.value.matrix().transpose();
                                 in.accumulate(g);
                               }
                               if (wn.requires_grad) {
                                 Matrix<Scalar> g(wn.value.rows(), wn.value.cols());
                                 g.noalias() = in.value.matrix().transpose() * self.grad;
                                 wn.accumulate(g);
                               }
                             });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>* bias) {
  Var<Scalar> y = matmul(x, w);
  return bias ? add_bias(y, *bias) : y;
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weights, const Var<Scalar>* bias, Index kernel) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 && xs.size() != 4) {
    throw ShapeError("conv2d: expected (h,w,c) or (B,h,w,c) input, got " + to_string(xs));
  }
  if (kernel < 1 || kernel % 2 == 0) {
    throw ShapeError("conv2d: kernel must be odd and positive, got " + std::to_string(kernel));
  }
  const Index batch = xs.size() == 4 ? xs[0] : 1;
  const Index height = xs[xs.size() - 3];
  const Index width = xs[xs.size() - 2];
  const Index cin = xs.back();
  const Shape& ws = weights.shape();
  if (ws.size() != 4 || ws[0] != kernel || ws[1] != kernel || ws[2] != cin) {
    std::ostringstream msg;
    msg << "conv2d: weights " << to_string(ws) << " do not match a " << kernel << 'x' << kernel
        << " kernel over " << cin << " input channels (expected (" << kernel << ',' << kernel << ',' << cin
        << ",cout))";
    throw ShapeError(msg.str());
  }
  const Index cout = ws[3];
  if (bias && bias->value().size() != cout) {
    throw ShapeError("conv2d: bias " + to_string(bias->shape()) + " does not match " + std::to_string(cout) +
                     " output channels");
  }

  Matrix<Scalar> y(x.rows(), cout);
  if (kernel == 1) {
    y.noalias() = x.matrix() * weights.matrix();
  } else {
    y.noalias() = im2col(x.matrix(), batch, height, width, kernel) * weights.matrix();
  }
  if (bias) y.rowwise() += as_row(bias->value());

  std::vector<Var<Scalar>> inputs{x, weights};
  if (bias) inputs.push_back(*bias);
  return make_result<Scalar>(
      Tensor<Scalar>(with_last<Scalar>(xs, cout), std::move(y)), std::move(inputs),
      [batch, height, width, kernel, cin](Node<Scalar>& self) {
        Node<Scalar>& in = *self.parents[0];
        Node<Scalar>& wn = *self.parents[1];
        const Matrix<Scalar>& g = self.grad;
        if (kernel == 1) {
          if (wn.requires_grad) {
            Matrix<Scalar> gw(wn.value.rows(), wn.value.cols());
            gw.noalias() = in.value.matrix().transpose() * g;
            wn.accumulate(gw);
          }
          if (in.requires_grad) {
            Matrix<Scalar> gx(in.value.rows(), in.value.cols());
            gx.noalias() = g * wn.value.matrix().transpose();
            in.accumulate(gx);
          }
        } else {
          if (wn.requires_grad) {
            const Matrix<Scalar> cols = im2col(in.value.matrix(), batch, height, width, kernel);
            Matrix<Scalar> gw(wn.value.rows(), wn.value.cols());
            gw.noalias() = cols.transpose() * g;
            wn.accumulate(gw);
          }
          if (in.requires_grad) {
            Matrix<Scalar> gcols(g.rows(), wn.value.rows());
            gcols.noalias() = g * wn.value.matrix().transpose();
            in.accumulate(col2im(gcols, batch, height, width, kernel, cin));
          }
        }
        if (self.parents.size() > 2) {
          Node<Scalar>& b = *self.parents[2];
          if (b.requires_grad) b.accumulate(shaped_like(b.value, g.colwise().sum()));
        }
      });
}

template <typename Scalar>
Var<Scalar> causal_conv1d(const Var<Scalar>& x, const Var<Scalar>& weights, const Var<Scalar>& bias, Index seq_len) {
  const Index channels = x.cols();
  if (seq_len < 1 || x.rows() % seq_len != 0) {
    throw ShapeError("causal_conv1d: " + std::to_string(x.rows()) + " rows are not a multiple of sequence length " +
                     std::to_string(seq_len));
  }
  if (weights.value().rank() != 2 || weights.cols() != channels) {
    throw ShapeError("causal_conv1d: weights " + to_string(weights.shape()) + " do not match " +
                     std::to_string(channels) + " channels");
  }
  if (bias.value().size() != channels) throw ShapeError("causal_conv1d: bias size mismatch");
  const Index taps = weights.rows();
  const Index sequences = x.rows() / seq_len;
  const Matrix<Scalar>& xm = x.matrix();
  const Matrix<Scalar>& wm = weights.matrix();

  Matrix<Scalar> y(x.rows(), channels);
  y.rowwise() = as_row(bias.value());
  for (Index s = 0; s < sequences; ++s) {
    for (Index t = 0; t < seq_len; ++t) {
      const Index row = s * seq_len + t;
      for (Index j = 0; j < taps; ++j) {
        const Index src = t - (taps - 1) + j;
        if (src < 0) continue;
        y.row(row) += xm.row(s * seq_len + src).cwiseProduct(wm.row(j));
      }
    }
  }
  return make_result<Scalar>(
      Tensor<Scalar>(x.shape(), std::move(y)), {x, weights, bias}, [seq_len, sequences, taps](Node<Scalar>& self) {
        Node<Scalar>& in = *self.parents[0];
        Node<Scalar>& wn = *self.parents[1];
        Node<Scalar>& bn = *self.parents[2];
        const Matrix<Scalar>& g = self.grad;
        const Matrix<Scalar>& xv = in.value.matrix();
        const Matrix<Scalar>& wv = wn.value.matrix();
        Matrix<Scalar> gx = Matrix<Scalar>::Zero(xv.rows(), xv.cols());
        Matrix<Scalar> gw = Matrix<Scalar>::Zero(wv.rows(), wv.cols());
        for (Index s = 0; s < sequences; ++s) {
          for (Index t = 0; t < seq_len; ++t) {
            const Index row = s * seq_len + t;
            for (Index j = 0; j < taps; ++j) {
              const Index src = t - (taps - 1) + j;
              if (src < 0) continue;
              gx.row(s * seq_len + src) += g.row(row).cwiseProduct(wv.row(j));
              gw.row(j) += g.row(row).cwiseProduct(xv.row(s * seq_len + src));
            }
          }
        }
        accumulate_if(in, gx);
        accumulate_if(wn, gw);
        if (bn.requires_grad) bn.accumulate(shaped_like(bn.value, g.colwise().sum()));
      });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return unary(
      x, [](const Matrix<Scalar>& v) { return Matrix<Scalar>(stable_sigmoid(v)); },
      [](const Matrix<Scalar>&, const Matrix<Scalar>& y) {
        return Matrix<Scalar>(y.array() * (Scalar(1) - y.array()));
      });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  return unary(
      x, [](const Matrix<Scalar>& v) { return Matrix<Scalar>(v.array() * stable_sigmoid(v)); },
      [](const Matrix<Scalar>& in, const Matrix<Scalar>&) {
        const auto s = stable_sigmoid(in);
        return Matrix<Scalar>(s * (Scalar(1) + in.array() * (Scalar(1) - s)));
      });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  constexpr Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
  return unary(
      x,
      [](const Matrix<Scalar>& in) {
        return Matrix<Scalar>(in.unaryExpr([](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); }));
      },
      [](const Matrix<Scalar>& in, const Matrix<Scalar>&) {
        return Matrix<Scalar>(in.unaryExpr([](Scalar v) {
          const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
          return cdf + v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
        }));
      });
}

template <typename Scalar>
Var<Scalar> softplus(const Var<Scalar>& x) {
  return unary(
      x,
      [](const Matrix<Scalar>& v) {
        return Matrix<Scalar>(v.array().max(Scalar(0)) + (-v.array().abs()).exp().log1p());
      },
      [](const Matrix<Scalar>& in, const Matrix<Scalar>&) { return Matrix<Scalar>(stable_sigmoid(in)); });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& x) {
  return unary(
      x, [](const Matrix<Scalar>& v) { return Matrix<Scalar>(v.array().exp()); },
      [](const Matrix<Scalar>&, const Matrix<Scalar>& y) { return y; });
}

template <typename Scalar>
Var<Scalar> rms_norm(const Var<Scalar>& x, const Var<Scalar>& weight, Scalar eps) {
  if (weight.value().size() != x.cols()) throw ShapeError("rms_norm: weight size mismatch");
  const Index d = x.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_rms =
      ((x.matrix().array().square().rowwise().sum() / Scalar(d)) + eps).rsqrt();
  Matrix<Scalar> normed = x.matrix().array().colwise() * inv_rms.array();
  Matrix<Scalar> y = normed.array().rowwise() * as_row(weight.value()).array();
  return make_result<Scalar>(
      Tensor<Scalar>(x.shape(), std::move(y)), {x, weight},
      [inv_rms = std::move(inv_rms), normed = std::move(normed), d](Node<Scalar>& self) {
        Node<Scalar>& in = *self.parents[0];
        Node<Scalar>& wn = *self.parents[1];
        if (wn.requires_grad) {
          Eigen::Matrix<Scalar, 1, Eigen::Dynamic> gw = self.grad.cwiseProduct(normed).colwise().sum();
          wn.accumulate(shaped_like(wn.value, gw));
        }
        if (in.requires_grad) {
          Matrix<Scalar> g = self.grad.array().rowwise() * as_row(wn.value).array();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> proj = g.cwiseProduct(normed).rowwise().sum() / Scalar(d);
          Matrix<Scalar> gx = ((g - (normed.array().colwise() * proj.array()).matrix()).array().colwise() *
                               inv_rms.array())
                                  .matrix();
          in.accumulate(gx);
        }
      });
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, Scalar eps) {
  if (weight.value().size() != x.cols() || bias.value().size() != x.cols()) {
    throw ShapeError("layer_norm: affine parameter size mismatch");
  }
  const Index d = x.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mu = x.matrix().rowwise().mean();
  Matrix<Scalar> centered = x.matrix().colwise() - mu;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std =
      ((centered.array().square().rowwise().sum() / Scalar(d)) + eps).rsqrt();
  Matrix<Scalar> normed = centered.array().colwise() * inv_std.array();
  Matrix<Scalar> y = (normed.array().rowwise() * as_row(weight.value()).array()).rowwise() + as_row(bias.value()).array();
  return make_result<Scalar>(
      Tensor<Scalar>(x.shape(), std::move(y)), {x, weight, bias},
      [inv_std = std::move(inv_std), normed = std::move(normed), d](Node<Scalar>& self) {
        Node<Scalar>& in = *self.parents[0];
        Node<Scalar>& wn = *self.parents[1];
        Node<Scalar>& bn = *self.parents[2];
        if (wn.requires_grad) wn.accumulate(shaped_like(wn.value, self.grad.cwiseProduct(normed).colwise().sum()));
        if (bn.requires_grad) bn.accumulate(shaped_like(bn.value, self.grad.colwise().sum()));
        if (in.requires_grad) {
          Matrix<Scalar> g = self.grad.array().rowwise() * as_row(wn.value).array();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> g_mean = g.rowwise().mean();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gn_mean = g.cwiseProduct(normed).rowwise().sum() / Scalar(d);
          Matrix<Scalar> gx = g.colwise() - g_mean;
          gx -= (normed.array().colwise() * gn_mean.array()).matrix();
          gx = gx.array().colwise() * inv_std.array();
          in.accumulate(gx);
        }
      });
}

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormState<Scalar>& state, bool training) {
  const Index channels = x.cols();
  const Index n = x.rows();
  if (gamma.value().size() != channels || beta.value().size() != channels) {
    throw ShapeError("batch_norm: affine parameter size mismatch");
  }
  if (state.running_mean.size() != channels || state.running_var.size() != channels) {
    throw ShapeError("batch_norm: running statistics size mismatch");
  }
  if (n == 0) throw ShapeError("batch_norm: empty batch");

  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mu;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> var;
  if (training) {
    mu = x.matrix().colwise().mean();
    var = (x.matrix().rowwise() - mu).array().square().colwise().sum().matrix() / Scalar(n);
    const Scalar unbias = n > 1 ? Scalar(n) / Scalar(n - 1) : Scalar(1);
    const Scalar m = state.momentum;
    state.running_mean = (Scalar(1) - m) * state.running_mean + m * Eigen::Map<const Matrix<Scalar>>(mu.data(), state.running_mean.rows(), state.running_mean.cols());
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> var_unbiased = var * unbias;
    state.running_var = (Scalar(1) - m) * state.running_var + m * Eigen::Map<const Matrix<Scalar>>(var_unbiased.data(), state.running_var.rows(), state.running_var.cols());
  } else {
    mu = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(state.running_mean.data(), channels);
    var = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(state.running_var.data(), channels);
  }
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> inv_std = (var.array() + state.eps).rsqrt().matrix();
  Matrix<Scalar> normed = (x.matrix().rowwise() - mu).array().rowwise() * inv_std.array();
  Matrix<Scalar> y = (normed.array().rowwise() * as_row(gamma.value()).array()).rowwise() + as_row(beta.value()).array();

  return make_result<Scalar>(
      Tensor<Scalar>(x.shape(), std::move(y)), {x, gamma, beta},
      [inv_std = std::move(inv_std), normed = std::move(normed), training, n](Node<Scalar>& self) {
        Node<Scalar>& in = *self.parents[0];
        Node<Scalar>& gn = *self.parents[1];
        Node<Scalar>& bn = *self.parents[2];
        if (gn.requires_grad) gn.accumulate(shaped_like(gn.value, self.grad.cwiseProduct(normed).colwise().sum()));
        if (bn.requires_grad) bn.accumulate(shaped_like(bn.value, self.grad.colwise().sum()));
        if (in.requires_grad) {
          Matrix<Scalar> g = self.grad.array().rowwise() * as_row(gn.value).array();
          if (training) {
            Eigen::Matrix<Scalar, 1, Eigen::Dynamic> g_mean = g.colwise().mean();
            Eigen::Matrix<Scalar, 1, Eigen::Dynamic> gn_mean = g.cwiseProduct(normed).colwise().sum() / Scalar(n);
            g.rowwise() -= g_mean;
            g -= (normed.array().rowwise() * gn_mean.array()).matrix();
          }
          g = g.array().rowwise() * inv_std.array();
          in.accumulate(g);
        }
      });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    total += p.cols();
  }
  Matrix<Scalar> y(rows, total);
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    y.middleCols(offset, p.cols()) = p.matrix();
    offset += p.cols();
  }
  return make_result<Scalar>(Tensor<Scalar>(with_last<Scalar>(parts[0].shape(), total), std::move(y)),
                             std::vector<Var<Scalar>>(parts.begin(), parts.end()),
                             [offsets = std::move(offsets)](Node<Scalar>& self) {
                               for (std::size_t i = 0; i < self.parents.size(); ++i) {
                                 Node<Scalar>& p = *self.parents[i];
                                 if (p.requires_grad) p.accumulate(self.grad.middleCols(offsets[i], p.value.cols()));
                               }
                             });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw ShapeError("slice_cols: range out of bounds");
  Matrix<Scalar> y = x.matrix().middleCols(start, count);
  return make_result<Scalar>(Tensor<Scalar>(with_last<Scalar>(x.shape(), count), std::move(y)), {x},
                             [start, count](Node<Scalar>& self) {
                               Node<Scalar>& in = *self.parents[0];
                               in.grad_or_zero().middleCols(start, count) += self.grad;
                             });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  if (shape.size() < 2) throw ShapeError("concat_rows: inputs need rank >= 2");
  Index lead = 0;
  Index rows = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw ShapeError("concat_rows: trailing shape mismatch " + to_string(s) + " vs " + to_string(shape));
    }
    lead += s[0];
    rows += p.rows();
  }
  shape[0] = lead;
  Matrix<Scalar> y(rows, parts[0].cols());
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    y.middleRows(offset, p.rows()) = p.matrix();
    offset += p.rows();
  }
  return make_result<Scalar>(Tensor<Scalar>(std::move(shape), std::move(y)),
                             std::vector<Var<Scalar>>(parts.begin(), parts.end()),
                             [offsets = std::move(offsets)](Node<Scalar>& self) {
                               for (std::size_t i = 0; i < self.parents.size(); ++i) {
                                 Node<Scalar>& p = *self.parents[i];
                                 if (p.requires_grad) p.accumulate(self.grad.middleRows(offsets[i], p.value.rows()));
                               }
                             });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& x, Index start, Index count) {
  Shape shape = x.shape();
  if (shape.size() < 2) throw ShapeError("slice_rows: input needs rank >= 2");
  if (start < 0 || count < 0 || start + count > shape[0]) throw ShapeError("slice_rows: range out of bounds");
  const Index unit = shape[0] == 0 ? 0 : x.rows() / shape[0];
  shape[0] = count;
  Matrix<Scalar> y = x.matrix().middleRows(start * unit, count * unit);
  return make_result<Scalar>(Tensor<Scalar>(std::move(shape), std::move(y)), {x},
                             [first = start * unit](Node<Scalar>& self) {
                               Node<Scalar>& in = *self.parents[0];
                               in.grad_or_zero().middleRows(first, self.grad.rows()) += self.grad;
                             });
}

template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, std::span<const Index> index) {
  const Index n = static_cast<Index>(index.size());
  Matrix<Scalar> y(n, x.cols());
  for (Index i = 0; i < n; ++i) {
    const Index src = index[static_cast<std::size_t>(i)];
    if (src < 0 || src >= x.rows()) throw ShapeError("gather_rows: index out of range");
    y.row(i) = x.matrix().row(src);
  }
  return make_result<Scalar>(Tensor<Scalar>(Shape{n, x.cols()}, std::move(y)), {x},
                             [index = std::vector<Index>(index.begin(), index.end())](Node<Scalar>& self) {
                               Matrix<Scalar>& g = self.parents[0]->grad_or_zero();
                               for (std::size_t i = 0; i < index.size(); ++i) {
                                 g.row(index[i]) += self.grad.row(static_cast<Index>(i));
                               }
                             });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> y = x.value().reshaped(std::move(shape));
  return make_result<Scalar>(std::move(y), {x}, [](Node<Scalar>& self) {
    Node<Scalar>& in = *self.parents[0];
    in.accumulate(Eigen::Map<const Matrix<Scalar>>(self.grad.data(), in.value.rows(), in.value.cols()));
  });
}

template <typename Scalar>
Var<Scalar> segment_mean(const Var<Scalar>& x, Index segment) {
  if (segment < 1 || x.rows() % segment != 0) {
    throw ShapeError("segment_mean: " + std::to_string(x.rows()) + " rows not divisible by " + std::to_string(segment));
  }
  const Index groups = x.rows() / segment;
  Matrix<Scalar> y(groups, x.cols());
  for (Index i = 0; i < groups; ++i) y.row(i) = x.matrix().middleRows(i * segment, segment).colwise().mean();
  return make_result<Scalar>(Tensor<Scalar>(Shape{groups, x.cols()}, std::move(y)), {x},
                             [segment, groups](Node<Scalar>& self) {
                               Matrix<Scalar>& g = self.parents[0]->grad_or_zero();
                               const Scalar inv = Scalar(1) / Scalar(segment);
                               for (Index i = 0; i < groups; ++i) {
                                 g.middleRows(i * segment, segment).rowwise() += self.grad.row(i) * inv;
                               }
                             });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> y(Shape{});
  y.matrix()(0, 0) = x.matrix().sum();
  return make_result<Scalar>(std::move(y), {x}, [](Node<Scalar>& self) {
    Node<Scalar>& in = *self.parents[0];
    in.accumulate(Matrix<Scalar>::Constant(in.value.rows(), in.value.cols(), self.grad(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  if (x.value().size() == 0) throw ShapeError("mean of empty tensor");
  return affine(sum(x), Scalar(1) / Scalar(x.value().size()), Scalar(0));
}

#define DMS2F_INSTANTIATE(S)                                                                                  \
  template Var<S> operator+ <S>(const Var<S>&, const Var<S>&);                                                \
  template Var<S> operator- <S>(const Var<S>&, const Var<S>&);                                                \
  template Var<S> operator* <S>(const Var<S>&, const Var<S>&);                                                \
  template Var<S> affine<S>(const Var<S>&, S, S);                                                             \
  template Var<S> add_bias<S>(const Var<S>&, const Var<S>&);                                                  \
  template Var<S> scale_cols<S>(const Var<S>&, const Var<S>&);                                                \
  template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                                    \
  template Var<S> linear<S>(const Var<S>&, const Var<S>&, const Var<S>*);                                     \
  template Var<S> conv2d<S>(const Var<S>&, const Var<S>&, const Var<S>*, Index);                              \
  template Var<S> causal_conv1d<S>(const Var<S>&, const Var<S>&, const Var<S>&, Index);                       \
  template Var<S> sigmoid<S>(const Var<S>&);                                                                  \
  template Var<S> silu<S>(const Var<S>&);                                                                     \
  template Var<S> gelu<S>(const Var<S>&);                                                                     \
  template Var<S> softplus<S>(const Var<S>&);                                                                 \
  template Var<S> exp<S>(const Var<S>&);                                                                      \
  template Var<S> rms_norm<S>(const Var<S>&, const Var<S>&, S);                                               \
  template Var<S> layer_norm<S>(const Var<S>&, const Var<S>&, const Var<S>&, S);                              \
  template Var<S> batch_norm<S>(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormState<S>&, bool);       \
  template Var<S> concat_cols<S>(std::span<const Var<S>>);                                                    \
  template Var<S> slice_cols<S>(const Var<S>&, Index, Index);                                                 \
  template Var<S> concat_rows<S>(std::span<const Var<S>>);                                                    \
  template Var<S> slice_rows<S>(const Var<S>&, Index, Index);                                                 \
  template Var<S> gather_rows<S>(const Var<S>&, std::span<const Index>);                                      \
  template Var<S> reshape<S>(const Var<S>&, Shape);                                                           \
  template Var<S> segment_mean<S>(const Var<S>&, Index);                                                      \
  template Var<S> sum<S>(const Var<S>&);                                                                      \
  template Var<S> mean<S>(const Var<S>&);

DMS2F_INSTANTIATE(float)
DMS2F_INSTANTIATE(double)
#undef DMS2F_INSTANTIATE

}  // namespace dms2f
