#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "advlab/error.hpp"

namespace advlab {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string to_string(const Shape& shape);

/// Product of dimensions; throws ShapeError on empty, zero or negative dimensions.
Index checked_numel(const Shape& shape);

/// Dense row-major n-dimensional array.
///
/// A Tensor is a plain value: shape plus contiguous storage. Gradient
/// bookkeeping lives on the Tape (see tape.hpp), which holds Tensors for node
/// values and adjoints.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Storage::Zero(checked_numel(shape_))) {}

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_)) {
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Storage(Eigen::Map<const Storage>(values.begin(), Index(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    const Index n = checked_numel(shape);
    return Tensor(std::move(shape), Storage::Constant(n, value));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return Index(shape_.size()); }
  Index dim(Index axis) const { return shape_[std::size_t(axis < 0 ? rank() + axis : axis)]; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Row-major matrix view with the given number of rows.
  Eigen::Map<RowMatrix<Scalar>> matrix(Index rows) {
    return Eigen::Map<RowMatrix<Scalar>>(data_.data(), rows, size() / rows);
  }
  Eigen::Map<const RowMatrix<Scalar>> matrix(Index rows) const {
    return Eigen::Map<const RowMatrix<Scalar>>(data_.data(), rows, size() / rows);
  }

  Tensor reshaped(Shape shape) const {
    if (checked_numel(shape) != size()) {
      throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  Shape shape_;
  Storage data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace advlab
