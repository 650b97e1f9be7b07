#include "dms2f/tensor.hpp"

#include <sstream>

namespace dms2f {

namespace {

Index leading_extent(const Shape& shape) {
  Index n = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) n *= shape[i];
  return n;
}

Index trailing_extent(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

void check_extents(const Shape& shape) {
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
  }
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

template <typename Scalar>
Tensor<Scalar>::Tensor() : Tensor(Shape{}) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_ = Matrix<Scalar>::Zero(leading_extent(shape_), trailing_extent(shape_));
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Matrix<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.rows() != leading_extent(shape_) || data_.cols() != trailing_extent(shape_)) {
    std::ostringstream msg;
    msg << "tensor data " << data_.rows() << 'x' << data_.cols() << " does not match shape "
        << to_string(shape_);
    throw ShapeError(msg.str());
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::constant(Shape shape, Scalar value) {
  Tensor t(std::move(shape));
  t.data_.setConstant(value);
  return t;
}

template <typename Scalar>
Index Tensor<Scalar>::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return data_(0, 0);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const {
  if (numel(shape) != size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  Matrix<Scalar> data = Eigen::Map<const Matrix<Scalar>>(data_.data(), leading_extent(shape),
                                                          trailing_extent(shape));
  return Tensor(std::move(shape), std::move(data));
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace dms2f
