#pragma once

#include "dms2f/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dms2f {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Matrix<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  void accumulate(const Matrix<Scalar>& g);
  Matrix<Scalar>& grad_or_zero();
};

/// Handle to a value in the dynamically recorded computation graph.
template <typename Scalar>
class Var {
 public:
  Var();
  explicit Var(Tensor<Scalar> value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  const Tensor<Scalar>& value() const { return node_->value; }
  const Matrix<Scalar>& matrix() const { return node_->value.matrix(); }
  const Shape& shape() const { return node_->value.shape(); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Accumulated gradient; zeros when nothing has flowed in yet.
  const Matrix<Scalar>& grad() const { return node_->grad_or_zero(); }
  void zero_grad() const { node_->grad.resize(0, 0); }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Learnable tensor with a persistent gradient slot. Gradients add up across
/// backward passes until zero_grad().
template <typename Scalar>
class Parameter {
 public:
  Parameter(std::string name, Tensor<Scalar> init);
  Parameter(const Parameter&) = delete;
  Parameter& operator=(const Parameter&) = delete;
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const std::string& name() const { return name_; }
  const Var<Scalar>& var() const { return var_; }
  Tensor<Scalar>& value() { return var_.node()->value; }
  const Tensor<Scalar>& value() const { return var_.node()->value; }
  Matrix<Scalar>& grad() { return var_.node()->grad_or_zero(); }
  const Matrix<Scalar>& grad() const { return var_.node()->grad_or_zero(); }
  void zero_grad() { var_.node()->grad.setZero(value().rows(), value().cols()); }
  Index size() const { return value().size(); }

 private:
  std::string name_;
  Var<Scalar> var_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds the result of an operation. The node is only wired into the graph
/// when recording is on and some input needs a gradient.
template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                        std::function<void(Node<Scalar>&)> backward_fn);

/// Reverse sweep from a scalar loss; every reachable leaf gets d loss / d leaf
/// added to its grad.
template <typename Scalar>
void backward(const Var<Scalar>& loss);

/// Reverse sweep seeded with an arbitrary upstream gradient of root's shape.
template <typename Scalar>
void backward(const Var<Scalar>& root, const Matrix<Scalar>& seed);

/// Gradient checkpointing: runs `fn` without recording and re-runs it during
/// the backward sweep. `fn` must be deterministic and must not mutate state.
template <typename Scalar>
Var<Scalar> checkpoint(const std::function<Var<Scalar>(const Var<Scalar>&)>& fn, const Var<Scalar>& input);

}  // namespace dms2f
