#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rescaps/errors.hpp"

namespace rescaps {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t k = 0; k < shape.size(); ++k) os << (k ? "x" : "") << shape[k];
  os << ']';
  return os.str();
}

/// Row-major strides for `shape`.
inline std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> s(shape.size(), 1);
  for (int k = static_cast<int>(shape.size()) - 2; k >= 0; --k) s[k] = s[k + 1] * shape[k + 1];
  return s;
}

/// Normalizes a possibly negative axis against `rank`.
inline int resolve_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  return a;
}

/// Dense row-major tensor backed by an Eigen column array.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_dims();
    data_ = Array::Constant(numel(shape_), fill);
  }

  Tensor(Shape shape, Array values) : shape_(std::move(shape)), data_(std::move(values)) {
    check_dims();
    if (data_.size() != numel(shape_))
      throw DimensionError("tensor of shape " + rescaps::to_string(shape_) + " needs " +
                           std::to_string(numel(shape_)) + " elements, got " +
                           std::to_string(data_.size()));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Array(Eigen::Map<const Array>(values.begin(),
                                                               static_cast<Index>(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_[resolve_axis(axis, rank())]; }
  Index size() const { return data_.size(); }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index k) { return data_[k]; }
  Scalar operator[](Index k) const { return data_[k]; }

  /// Multi-index access, e.g. t(b, i, j).
  template <typename... Ix>
  Scalar& operator()(Ix... ix) {
    return data_[offset({static_cast<Index>(ix)...})];
  }
  template <typename... Ix>
  Scalar operator()(Ix... ix) const {
    return data_[offset({static_cast<Index>(ix)...})];
  }

  Index offset(std::initializer_list<Index> ix) const {
    if (static_cast<int>(ix.size()) != rank())
      throw DimensionError("index rank mismatch for shape " + rescaps::to_string(shape_));
    Index off = 0;
    auto it = ix.begin();
    for (int k = 0; k < rank(); ++k, ++it) off = off * shape_[k] + *it;
    return off;
  }

  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor " + rescaps::to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw DimensionError("cannot reshape " + rescaps::to_string(shape_) + " to " +
                           rescaps::to_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

  void set_zero() { data_.setZero(); }

 private:
  void check_dims() const {
    for (Index d : shape_)
      if (d < 0) throw DimensionError("negative extent in " + rescaps::to_string(shape_));
  }

  Shape shape_;
  Array data_;
};

/// Compile-time helper: the arrays of two same-shaped tensors as Eigen expressions.
template <typename Scalar>
bool same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape();
}

/// Max absolute elementwise difference; throws on shape mismatch.
template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!same_shape(a, b))
    throw DimensionError("max_abs_diff shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  if (a.size() == 0) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace rescaps
