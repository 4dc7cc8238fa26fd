#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vitdf/error.hpp"

namespace vitdf {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major n-d array. A scalar is represented with an empty shape.
///
/// `requires_grad` marks the tensor as a trainable leaf when it is placed on a
/// Tape; `grad` is an optional slot of the same shape filled by callers that
/// want to carry a gradient alongside the value.
template <typename Scalar>
class BasicTensor {
 public:
  using value_type = Scalar;
  using MatrixMap = Eigen::Map<RowMajorMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMajorMatrix<Scalar>>;
  using VectorMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstVectorMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  BasicTensor() : shape_{}, data_(1, Scalar(0)) {}

  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(element_count(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       vitdf::to_string(shape_));
    }
  }

  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{}, std::vector<Scalar>{v}); }
  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), Scalar(1)); }
  static BasicTensor vector(std::initializer_list<Scalar> v) {
    return BasicTensor(Shape{v.size()}, std::vector<Scalar>(v));
  }
  static BasicTensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
    std::vector<Scalar> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return BasicTensor(Shape{rows.size(), cols}, std::move(data));
  }
  static BasicTensor from_matrix(const RowMajorMatrix<Scalar>& m) {
    return BasicTensor(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                       std::vector<Scalar>(m.data(), m.data() + m.size()));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string());
    return shape_[axis];
  }
  std::string shape_string() const { return vitdf::to_string(shape_); }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }
  const std::vector<Scalar>& values() const noexcept { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }
  Scalar& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  Scalar at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  Scalar item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string());
    return data_[0];
  }

  /// View as a rows x cols matrix. Rank-1 tensors map to a single row.
  MatrixMap matrix() { return MatrixMap(data_.data(), rows2d(), cols2d()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows2d(), cols2d()); }
  VectorMap array() { return VectorMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstVectorMap array() const { return ConstVectorMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }

  BasicTensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string() + " to " + vitdf::to_string(shape));
    }
    BasicTensor out(std::move(shape), data_);
    out.requires_grad_ = requires_grad_;
    return out;
  }

  template <typename Other>
  BasicTensor<Other> cast() const {
    std::vector<Other> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](Scalar v) { return static_cast<Other>(v); });
    return BasicTensor<Other>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  BasicTensor& set_requires_grad(bool on = true) {
    requires_grad_ = on;
    return *this;
  }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<const Scalar> grad() const noexcept { return grad_; }
  void set_grad(const BasicTensor& g) {
    if (g.shape() != shape_) throw ShapeError("gradient shape " + g.shape_string() + " != " + shape_string());
    grad_.assign(g.data_.begin(), g.data_.end());
  }
  void clear_grad() { grad_.clear(); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + vitdf::to_string(shape_));
    }
  }
  Eigen::Index rows2d() const {
    if (shape_.size() < 2) return 1;
    return static_cast<Eigen::Index>(data_.size() / shape_.back());
  }
  Eigen::Index cols2d() const {
    if (shape_.empty()) return 1;
    return static_cast<Eigen::Index>(shape_.back());
  }

  Shape shape_;
  std::vector<Scalar> data_;
  bool requires_grad_ = false;
  std::vector<Scalar> grad_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

template <typename Scalar>
Scalar max_abs_diff(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + a.shape_string() + " vs " + b.shape_string());
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace vitdf
