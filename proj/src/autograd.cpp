#include "dms2f/autograd.hpp"

#include <unordered_set>

namespace dms2f {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
void Node<Scalar>::accumulate(const Matrix<Scalar>& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

template <typename Scalar>
Matrix<Scalar>& Node<Scalar>::grad_or_zero() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
  }
  return grad;
}

template <typename Scalar>
Var<Scalar>::Var() : node_(std::make_shared<Node<Scalar>>()) {}

template <typename Scalar>
Var<Scalar>::Var(Tensor<Scalar> value, bool requires_grad) : node_(std::make_shared<Node<Scalar>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Parameter<Scalar>::Parameter(std::string name, Tensor<Scalar> init)
    : name_(std::move(name)), var_(std::move(init), true) {}

template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                        std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
void backward(const Var<Scalar>& root, const Matrix<Scalar>& seed) {
  if (seed.rows() != root.rows() || seed.cols() != root.cols()) {
    throw ShapeError("backward seed shape does not match root " + to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; the graph may be deep (one node per op).
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<Scalar>* node : order) {
    if (!node->is_leaf()) node->grad.resize(0, 0);
  }
  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->is_leaf() || node->grad.size() == 0) continue;
    node->backward_fn(*node);
    // Interior gradients are not needed past this point.
    node->grad.resize(0, 0);
  }
}

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  backward(loss, Matrix<Scalar>(Matrix<Scalar>::Ones(loss.rows(), loss.cols())));
}

template <typename Scalar>
Var<Scalar> checkpoint(const std::function<Var<Scalar>(const Var<Scalar>&)>& fn, const Var<Scalar>& input) {
  Tensor<Scalar> out;
  {
    NoGradGuard guard;
    out = fn(input.detach()).value();
  }
  return make_result<Scalar>(std::move(out), {input}, [fn](Node<Scalar>& self) {
    Var<Scalar> replay_input(self.parents[0]->value, true);
    Var<Scalar> replay = fn(replay_input);
    backward(replay, self.grad);
    self.parents[0]->accumulate(replay_input.grad());
  });
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template class Parameter<float>;
template class Parameter<double>;

#define DMS2F_INSTANTIATE(S)                                                                          \
  template Var<S> make_result<S>(Tensor<S>, std::vector<Var<S>>, std::function<void(Node<S>&)>);    \
  template void backward<S>(const Var<S>&);                                                           \
  template void backward<S>(const Var<S>&, const Matrix<S>&);                                         \
  template Var<S> checkpoint<S>(const std::function<Var<S>(const Var<S>&)>&, const Var<S>&);

DMS2F_INSTANTIATE(float)
DMS2F_INSTANTIATE(double)
#undef DMS2F_INSTANTIATE

}  // namespace dms2f
