#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>
#include <vector>

namespace dms2f {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

// Row-major dense storage shared by every tensor. A tensor of shape
// (d0, ..., dn-1, c) is viewed as a (d0*...*dn-1) x c matrix, so pixel-major
// feature maps are "one row per pixel, one column per channel".
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename Scalar>
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Matrix<Scalar> data);

  static Tensor constant(Shape shape, Scalar value);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  /// Extent of axis `axis`; negative values count from the back.
  Index dim(Index axis) const;
  Index rows() const { return data_.rows(); }
  Index cols() const { return data_.cols(); }
  Index size() const { return data_.size(); }

  Matrix<Scalar>& matrix() { return data_; }
  const Matrix<Scalar>& matrix() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar item() const;
  bool all_finite() const { return data_.allFinite(); }

  /// Same values, new shape; element count must match.
  Tensor reshaped(Shape shape) const;

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

 private:
  Shape shape_;
  Matrix<Scalar> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dms2f
