#pragma once

// Selective state-space (S6) scan and the Mamba block built around it.
//
// For each channel i and state index n the scan runs
//
//   h_t[i,n] = exp(delta_t[i] * A[i,n]) * h_{t-1}[i,n] + delta_t[i] * B_t[n] * u_t[i]
//   y_t[i]   = sum_n C_t[n] * h_t[i,n] + D[i] * u_t[i]
//
// with h_0 = 0. Work is Theta(L * inner * N) per sequence. Several sequences
// of equal length can be stacked along the rows.

#include "dms2f/nn.hpp"

namespace dms2f {

struct MambaConfig {
  Index d_model = 64;
  Index d_state = 16;
  Index d_conv = 4;
  Index expand = 2;

  Index inner() const { return expand * d_model; }
  /// Rank of the low-rank delta projection, ceil(d_model / 16).
  Index dt_rank() const { return (d_model + 15) / 16; }
  void validate() const;

  friend bool operator==(const MambaConfig&, const MambaConfig&) = default;
};

/// Sequential reference scan. u, delta: (S*L, inner); A: (inner, N);
/// B, C: (S*L, N); D: 1 x inner. Throws NumericError naming the step when a
/// state goes non-finite.
template <typename Scalar>
Matrix<Scalar> selective_scan(const Matrix<Scalar>& u, const Matrix<Scalar>& delta, const Matrix<Scalar>& A,
                              const Matrix<Scalar>& B, const Matrix<Scalar>& C, const Matrix<Scalar>& D,
                              Index seq_len);

/// Two-level blocked scan: per-block local scans from a zero state, a carry
/// pass over block boundaries, then per-block replay from the carried state.
/// Blocks are independent in the first and last phase and are spread over
/// `threads` workers.
template <typename Scalar>
Matrix<Scalar> selective_scan_blocked(const Matrix<Scalar>& u, const Matrix<Scalar>& delta, const Matrix<Scalar>& A,
                                      const Matrix<Scalar>& B, const Matrix<Scalar>& C, const Matrix<Scalar>& D,
                                      Index seq_len, Index block_len, unsigned threads = 1);

/// Differentiable scan; the backward pass recomputes states one sequence at a
/// time instead of storing them.
template <typename Scalar>
Var<Scalar> selective_scan(const Var<Scalar>& u, const Var<Scalar>& delta, const Var<Scalar>& A, const Var<Scalar>& B,
                           const Var<Scalar>& C, const Var<Scalar>& D, Index seq_len);

template <typename Scalar>
class MambaBlock {
 public:
  MambaBlock(const std::string& name, const MambaConfig& config, std::mt19937_64& rng);

  const MambaConfig& config() const { return config_; }
  void collect(ParamList<Scalar>& out);
  Index parameter_count() const;

  Parameter<Scalar> norm_weight;   // (d_model)
  Parameter<Scalar> in_proj;       // (d_model, 2*inner)
  Parameter<Scalar> conv_weight;   // (d_conv, inner)
  Parameter<Scalar> conv_bias;     // (inner)
  Parameter<Scalar> x_proj;        // (inner, dt_rank + 2N)
  Parameter<Scalar> dt_proj;       // (dt_rank, inner)
  Parameter<Scalar> dt_bias;       // (inner)
  Parameter<Scalar> a_log;         // (inner, N); A = -exp(a_log)
  Parameter<Scalar> d_skip;        // (inner)
  Parameter<Scalar> out_proj;      // (inner, d_model)

 private:
  MambaConfig config_;
};

/// Pre-norm Mamba block with residual: x + out(scan(silu(conv(in_x))) * silu(z)).
/// x holds x.rows()/seq_len sequences of d_model-wide tokens.
template <typename Scalar>
Var<Scalar> mamba_forward(const Var<Scalar>& x, const MambaBlock<Scalar>& block, Index seq_len);

/// Multiply-accumulate count of one block over `tokens` tokens.
double mamba_macs(const MambaConfig& config, double tokens);

}  // namespace dms2f
