#include "dms2f/ssm.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

namespace dms2f {

namespace {

template <typename Scalar>
using StateArray = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
void check_scan_shapes(const Matrix<Scalar>& u, const Matrix<Scalar>& delta, const Matrix<Scalar>& A,
                       const Matrix<Scalar>& B, const Matrix<Scalar>& C, const Matrix<Scalar>& D, Index seq_len) {
  const Index rows = u.rows();
  const Index inner = u.cols();
  const Index n = A.cols();
  std::ostringstream msg;
  if (seq_len < 1 || rows < 1 || rows % seq_len != 0) {
    msg << "selective_scan: " << rows << " steps do not split into sequences of length " << seq_len;
  } else if (delta.rows() != rows || delta.cols() != inner) {
    msg << "selective_scan: delta is " << delta.rows() << 'x' << delta.cols() << ", expected " << rows << 'x' << inner;
  } else if (A.rows() != inner) {
    msg << "selective_scan: A has " << A.rows() << " rows, expected " << inner;
  } else if (B.rows() != rows || B.cols() != n || C.rows() != rows || C.cols() != n) {
    msg << "selective_scan: B/C must be " << rows << 'x' << n;
  } else if (D.size() != inner) {
    msg << "selective_scan: D has " << D.size() << " entries, expected " << inner;
  } else {
    return;
  }
  throw ShapeError(msg.str());
}

[[noreturn]] void throw_non_finite(Index sequence, Index step) {
  std::ostringstream msg;
  msg << "selective_scan: non-finite state at step " << step << " of sequence " << sequence;
  throw NumericError(msg.str());
}

// a = exp(A * delta[t, i]) row by row. A colwise broadcast does not
// vectorise the exp, so the product is formed first.
template <typename Scalar, typename Out>
void decay_factors(const Matrix<Scalar>& A, const Matrix<Scalar>& delta, Index t, Out&& a) {
  for (Index i = 0; i < A.rows(); ++i) a.row(i) = A.row(i).array() * delta(t, i);
  a = a.exp();
}

template <typename Scalar>
void scan_block(const Matrix<Scalar>& u, const Matrix<Scalar>& delta, const Matrix<Scalar>& A,
                const Matrix<Scalar>& B, const Matrix<Scalar>& C, const Matrix<Scalar>& D, Index first, Index count,
                Index seq_start, Index sequence, StateArray<Scalar>& h, Matrix<Scalar>* y, StateArray<Scalar>* decay,
                bool check_each) {
  const Index inner = u.cols();
  const Index n = A.cols();
  StateArray<Scalar> a(inner, n);
  for (Index t = first; t < first + count; ++t) {
    decay_factors(A, delta, t, a);
    const Scalar* b = B.row(t).data();
    const Scalar* c = C.row(t).data();
    for (Index i = 0; i < inner; ++i) {
      const Scalar dtu = delta(t, i) * u(t, i);
      Scalar* hi = h.row(i).data();
      const Scalar* ai = a.row(i).data();
      Scalar acc = 0;
#pragma omp simd reduction(+ : acc)
      for (Index k = 0; k < n; ++k) {
        hi[k] = ai[k] * hi[k] + dtu * b[k];
        acc += c[k] * hi[k];
      }
      if (y) (*y)(t, i) = acc + D.data()[i] * u(t, i);
    }
    if (check_each && !h.allFinite()) throw_non_finite(sequence, t - seq_start);
    if (decay) *decay *= a;
  }
}

// Runs steps [first, first+count) of one sequence from state h. Optionally
// writes outputs and multiplies the running decay product. A non-finite
// state stays non-finite, so only the end state is checked; on failure the
// block is replayed step by step to name the first bad step.
template <typename Scalar>
void scan_steps(const Matrix<Scalar>& u, const Matrix<Scalar>& delta, const Matrix<Scalar>& A,
                const Matrix<Scalar>& B, const Matrix<Scalar>& C, const Matrix<Scalar>& D, Index first, Index count,
                Index seq_start, Index sequence, StateArray<Scalar>& h, Matrix<Scalar>* y,
                StateArray<Scalar>* decay) {
  const StateArray<Scalar> h0 = h;
  scan_block<Scalar>(u, delta, A, B, C, D, first, count, seq_start, sequence, h, y, decay, false);
  if (h.allFinite()) return;
  h = h0;
  scan_block<Scalar>(u, delta, A, B, C, D, first, count, seq_start, sequence, h, y, nullptr, true);
}

template <typename F>
void parallel_for(Index count, unsigned threads, F&& fn) {
  if (threads <= 1 || count <= 1) {
    for (Index i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    const unsigned workers = static_cast<unsigned>(std::min<Index>(threads, count));
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (Index i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

void MambaConfig::validate() const {
  if (d_model < 1 || d_state < 1 || d_conv < 1 || expand < 1) {
    std::ostringstream msg;
    msg << "mamba config must be positive: d_model=" << d_model << " d_state=" << d_state << " d_conv=" << d_conv
        << " expand=" << expand;
    throw std::invalid_argument(msg.str());
  }
}

template <typename Scalar>
Matrix<Scalar> selective_scan(const Matrix<Scalar>& u, const Matrix<Scalar>& delta, const Matrix<Scalar>& A,
                              const Matrix<Scalar>& B, const Matrix<Scalar>& C, const Matrix<Scalar>& D,
                              Index seq_len) {
  check_scan_shapes(u, delta, A, B, C, D, seq_len);
  Matrix<Scalar> y(u.rows(), u.cols());
  StateArray<Scalar> h(u.cols(), A.cols());
  const Index sequences = u.rows() / seq_len;
  for (Index s = 0; s < sequences; ++s) {
    h.setZero();
    scan_steps<Scalar>(u, delta, A, B, C, D, s * seq_len, seq_len, s * seq_len, s, h, &y, nullptr);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> selective_scan_blocked(const Matrix<Scalar>& u, const Matrix<Scalar>& delta, const Matrix<Scalar>& A,
                                      const Matrix<Scalar>& B, const Matrix<Scalar>& C, const Matrix<Scalar>& D,
                                      Index seq_len, Index block_len, unsigned threads) {
  check_scan_shapes(u, delta, A, B, C, D, seq_len);
  if (block_len < 1) throw std::invalid_argument("selective_scan_blocked: block length must be positive");
  const Index inner = u.cols();
  const Index n = A.cols();
  const Index sequences = u.rows() / seq_len;
  const Index blocks = (seq_len + block_len - 1) / block_len;
  const Index items = sequences * blocks;
  auto block_rows = [&](Index item) {
    const Index s = item / blocks;
    const Index b = item % blocks;
    const Index first = s * seq_len + b * block_len;
    return std::pair{first, std::min(block_len, seq_len - b * block_len)};
  };

  // Local end states from a zero start, and each block's total decay.
  std::vector<StateArray<Scalar>> end_state(static_cast<std::size_t>(items));
  std::vector<StateArray<Scalar>> decay(static_cast<std::size_t>(items));
  parallel_for(items, threads, [&](Index item) {
    auto [first, count] = block_rows(item);
    auto& h = end_state[static_cast<std::size_t>(item)];
    auto& p = decay[static_cast<std::size_t>(item)];
    h = StateArray<Scalar>::Zero(inner, n);
    p = StateArray<Scalar>::Ones(inner, n);
    const Index s = item / blocks;
    scan_steps<Scalar>(u, delta, A, B, C, D, first, count, s * seq_len, s, h, nullptr, &p);
  });

  // Carry: state entering block b+1 = decay_b * carry_b + end_b.
  std::vector<StateArray<Scalar>> carry(static_cast<std::size_t>(items));
  for (Index s = 0; s < sequences; ++s) {
    StateArray<Scalar> state = StateArray<Scalar>::Zero(inner, n);
    for (Index b = 0; b < blocks; ++b) {
      const auto i = static_cast<std::size_t>(s * blocks + b);
      carry[i] = state;
      state = decay[i] * state + end_state[i];
    }
  }

  Matrix<Scalar> y(u.rows(), inner);
  parallel_for(items, threads, [&](Index item) {
    auto [first, count] = block_rows(item);
    StateArray<Scalar> h = carry[static_cast<std::size_t>(item)];
    const Index s = item / blocks;
    scan_steps<Scalar>(u, delta, A, B, C, D, first, count, s * seq_len, s, h, &y, nullptr);
  });
  return y;
}

template <typename Scalar>
Var<Scalar> selective_scan(const Var<Scalar>& u, const Var<Scalar>& delta, const Var<Scalar>& A, const Var<Scalar>& B,
                           const Var<Scalar>& C, const Var<Scalar>& D, Index seq_len) {
  Matrix<Scalar> y = selective_scan(u.matrix(), delta.matrix(), A.matrix(), B.matrix(), C.matrix(), D.matrix(), seq_len);
  return make_result<Scalar>(Tensor<Scalar>(u.shape(), std::move(y)), {u, delta, A, B, C, D}, [seq_len](Node<Scalar>& self) {
    const Matrix<Scalar>& U = self.parents[0]->value.matrix();
    const Matrix<Scalar>& Dt = self.parents[1]->value.matrix();
    const Matrix<Scalar>& Am = self.parents[2]->value.matrix();
    const Matrix<Scalar>& Bm = self.parents[3]->value.matrix();
    const Matrix<Scalar>& Cm = self.parents[4]->value.matrix();
    const Matrix<Scalar>& Dm = self.parents[5]->value.matrix();
    const Matrix<Scalar>& G = self.grad;
    const Index inner = U.cols();
    const Index n = Am.cols();
    const Index rows = U.rows();
    const Index sequences = rows / seq_len;

    Matrix<Scalar> gu = Matrix<Scalar>::Zero(rows, inner);
    Matrix<Scalar> gdelta = Matrix<Scalar>::Zero(rows, inner);
    StateArray<Scalar> gA = StateArray<Scalar>::Zero(inner, n);
    Matrix<Scalar> gB = Matrix<Scalar>::Zero(rows, n);
    Matrix<Scalar> gC = Matrix<Scalar>::Zero(rows, n);
    Eigen::Array<Scalar, 1, Eigen::Dynamic> gD = Eigen::Array<Scalar, 1, Eigen::Dynamic>::Zero(inner);

    // Per-sequence replay buffers: states and decays, inner rows per step.
    StateArray<Scalar> states(seq_len * inner, n);
    StateArray<Scalar> decays(seq_len * inner, n);
    StateArray<Scalar> h(inner, n);
    StateArray<Scalar> dh(inner, n);

    for (Index s = 0; s < sequences; ++s) {
      const Index base = s * seq_len;
      h.setZero();
      for (Index t = 0; t < seq_len; ++t) {
        const Index r = base + t;
        auto a = decays.middleRows(t * inner, inner);
        decay_factors(Am, Dt, r, a);
        const Scalar* b = Bm.row(r).data();
        for (Index i = 0; i < inner; ++i) {
          const Scalar dtu = Dt(r, i) * U(r, i);
          Scalar* hi = h.row(i).data();
          const Scalar* ai = a.row(i).data();
          for (Index k = 0; k < n; ++k) hi[k] = ai[k] * hi[k] + dtu * b[k];
        }
        states.middleRows(t * inner, inner) = h;
      }

      dh.setZero();
      for (Index t = seq_len - 1; t >= 0; --t) {
        const Index r = base + t;
        const Scalar* b = Bm.row(r).data();
        const Scalar* c = Cm.row(r).data();
        Scalar* gb = gB.row(r).data();
        Scalar* gc = gC.row(r).data();
        for (Index i = 0; i < inner; ++i) {
          const Scalar g = G(r, i);
          const Scalar dt = Dt(r, i);
          const Scalar ui = U(r, i);
          const Scalar dtu = dt * ui;
          gD(i) += g * ui;
          gu(r, i) += g * Dm.data()[i];
          const Scalar* hi = &states(t * inner + i, 0);
          const Scalar* ai = &decays(t * inner + i, 0);
          const Scalar* ami = Am.row(i).data();
          Scalar* dhi = dh.row(i).data();
          Scalar* gai = gA.row(i).data();
          Scalar dh_b = 0, gdt = 0;
#pragma omp simd reduction(+ : dh_b)
          for (Index k = 0; k < n; ++k) {
            gc[k] += g * hi[k];
            dhi[k] += g * c[k];
            dh_b += dhi[k] * b[k];
            gb[k] += dtu * dhi[k];
          }
          if (t > 0) {
            const Scalar* hp = &states((t - 1) * inner + i, 0);
#pragma omp simd reduction(+ : gdt)
            for (Index k = 0; k < n; ++k) {
              const Scalar w = dhi[k] * ai[k] * hp[k];
              gai[k] += w * dt;
              gdt += w * ami[k];
            }
          }
          for (Index k = 0; k < n; ++k) dhi[k] *= ai[k];
          gdelta(r, i) += gdt + ui * dh_b;
          gu(r, i) += dt * dh_b;
        }
      }
    }

    auto push = [](Node<Scalar>& node, const Matrix<Scalar>& g) {
      if (node.requires_grad) node.accumulate(g);
    };
    push(*self.parents[0], gu);
    push(*self.parents[1], gdelta);
    push(*self.parents[2], gA.matrix());
    push(*self.parents[3], gB);
    push(*self.parents[4], gC);
    Node<Scalar>& dnode = *self.parents[5];
    if (dnode.requires_grad) {
      dnode.accumulate(Eigen::Map<const Matrix<Scalar>>(gD.data(), dnode.value.rows(), dnode.value.cols()));
    }
  });
}

template <typename Scalar>
MambaBlock<Scalar>::MambaBlock(const std::string& name, const MambaConfig& config, std::mt19937_64& rng)
    : norm_weight(name + ".norm.weight", Tensor<Scalar>::constant({config.d_model}, Scalar(1))),
      in_proj(name + ".in_proj", fan_in_uniform<Scalar>({config.d_model, 2 * config.inner()}, config.d_model, rng)),
      conv_weight(name + ".conv.weight", fan_in_uniform<Scalar>({config.d_conv, config.inner()}, config.d_conv, rng)),
      conv_bias(name + ".conv.bias", Tensor<Scalar>(Shape{config.inner()})),
      x_proj(name + ".x_proj",
             fan_in_uniform<Scalar>({config.inner(), config.dt_rank() + 2 * config.d_state}, config.inner(), rng)),
      dt_proj(name + ".dt_proj",
              uniform<Scalar>({config.dt_rank(), config.inner()}, -1.0 / std::sqrt(double(config.dt_rank())),
                              1.0 / std::sqrt(double(config.dt_rank())), rng)),
      dt_bias(name + ".dt_bias", Tensor<Scalar>(Shape{config.inner()})),
      a_log(name + ".a_log", Tensor<Scalar>(Shape{config.inner(), config.d_state})),
      d_skip(name + ".d", Tensor<Scalar>::constant({config.inner()}, Scalar(1))),
      out_proj(name + ".out_proj", fan_in_uniform<Scalar>({config.inner(), config.d_model}, config.inner(), rng)),
      config_(config) {
  config.validate();
  // Step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus.
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  Scalar* bias = dt_bias.value().data();
  for (Index i = 0; i < config.inner(); ++i) {
    const double dt = std::max(std::exp(log_dt(rng)), 1e-4);
    bias[i] = static_cast<Scalar>(dt + std::log(-std::expm1(-dt)));
  }
  // S4D-real initialisation: A[i, n] = -(n + 1).
  auto& a = a_log.value().matrix();
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index n = 0; n < a.cols(); ++n) a(i, n) = static_cast<Scalar>(std::log(double(n + 1)));
  }
}

template <typename Scalar>
void MambaBlock<Scalar>::collect(ParamList<Scalar>& out) {
  for (auto* p : {&norm_weight, &in_proj, &conv_weight, &conv_bias, &x_proj, &dt_proj, &dt_bias, &a_log, &d_skip,
                  &out_proj}) {
    out.push_back(p);
  }
}

template <typename Scalar>
Index MambaBlock<Scalar>::parameter_count() const {
  Index total = 0;
  for (const auto* p : {&norm_weight, &in_proj, &conv_weight, &conv_bias, &x_proj, &dt_proj, &dt_bias, &a_log, &d_skip,
                        &out_proj}) {
    total += p->size();
  }
  return total;
}

template <typename Scalar>
Var<Scalar> mamba_forward(const Var<Scalar>& x, const MambaBlock<Scalar>& block, Index seq_len) {
  const MambaConfig& cfg = block.config();
  if (x.cols() != cfg.d_model) {
    throw ShapeError("mamba_forward: input has " + std::to_string(x.cols()) + " features, block expects d_model=" +
                     std::to_string(cfg.d_model));
  }
  const Index inner = cfg.inner();
  const Index rank = cfg.dt_rank();
  const Index n = cfg.d_state;

  Var<Scalar> normed = rms_norm(x, block.norm_weight.var(), Scalar(1e-5));
  Var<Scalar> xz = matmul(normed, block.in_proj.var());
  Var<Scalar> main = slice_cols(xz, 0, inner);
  Var<Scalar> gate = slice_cols(xz, inner, inner);
  main = silu(causal_conv1d(main, block.conv_weight.var(), block.conv_bias.var(), seq_len));

  Var<Scalar> sel = matmul(main, block.x_proj.var());
  Var<Scalar> delta = softplus(add_bias(matmul(slice_cols(sel, 0, rank), block.dt_proj.var()), block.dt_bias.var()));
  Var<Scalar> b = slice_cols(sel, rank, n);
  Var<Scalar> c = slice_cols(sel, rank + n, n);
  Var<Scalar> a = affine(exp(block.a_log.var()), Scalar(-1), Scalar(0));

  Var<Scalar> y = selective_scan(main, delta, a, b, c, block.d_skip.var(), seq_len);
  y = y * silu(gate);
  return x + matmul(y, block.out_proj.var());
}

double mamba_macs(const MambaConfig& c, double tokens) {
  const double inner = double(c.inner());
  const double per_token = double(c.d_model) * 2 * inner        // in_proj
                           + inner * double(c.d_conv)           // causal conv
                           + inner * double(c.dt_rank() + 2 * c.d_state)  // selection projection
                           + double(c.dt_rank()) * inner        // delta projection
                           + 3 * inner * double(c.d_state)      // decay, input, readout
                           + inner                              // gating
                           + inner * double(c.d_model);         // out_proj
  return per_token * tokens;
}

#define DMS2F_INSTANTIATE(S)                                                                                         \
  template Matrix<S> selective_scan<S>(const Matrix<S>&, const Matrix<S>&, const Matrix<S>&, const Matrix<S>&,       \
                                       const Matrix<S>&, const Matrix<S>&, Index);                                   \
  template Matrix<S> selective_scan_blocked<S>(const Matrix<S>&, const Matrix<S>&, const Matrix<S>&,                 \
                                               const Matrix<S>&, const Matrix<S>&, const Matrix<S>&, Index, Index,   \
                                               unsigned);                                                            \
  template Var<S> selective_scan<S>(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&,       \
                                    const Var<S>&, Index);                                                           \
  template class MambaBlock<S>;                                                                                      \
  template Var<S> mamba_forward<S>(const Var<S>&, const MambaBlock<S>&, Index);

DMS2F_INSTANTIATE(float)
DMS2F_INSTANTIATE(double)
#undef DMS2F_INSTANTIATE

}  // namespace dms2f
