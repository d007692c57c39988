#ifndef VOLMIL_TENSOR_HPP_
#define VOLMIL_TENSOR_HPP_

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace volmil {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

/// Thrown when operand shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMatrix<T>>;

/// Dense row-major n-dimensional array.
///
/// Storage is a flat Eigen vector; `matrix()` views the tensor as
/// (size / last extent) x (last extent), which is how every dense layer
/// consumes it.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_extents();
    data_.setConstant(shape_size(shape_), fill);
  }
  Tensor(Shape shape, ColVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
  }
  Tensor(Shape shape, std::initializer_list<T> values) : shape_(std::move(shape)) {
    check_extents();
    if (static_cast<Index>(values.size()) != shape_size(shape_))
      throw ShapeError("initializer length does not match shape " + shape_string(shape_));
    data_.resize(shape_size(shape_));
    std::copy(values.begin(), values.end(), data_.data());
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const {
    if (axis < 0) axis += rank();
    return shape_.at(static_cast<std::size_t>(axis));
  }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  ColVector<T>& vec() { return data_; }
  const ColVector<T>& vec() const { return data_; }

  T& operator[](Index i) { return data_[i]; }
  T operator[](Index i) const { return data_[i]; }

  T& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  T at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  Index rows() const { return shape_.empty() ? 1 : size() / shape_.back(); }
  Index cols() const { return shape_.empty() ? 1 : shape_.back(); }
  RowMap<T> matrix() { return RowMap<T>(data_.data(), rows(), cols()); }
  ConstRowMap<T> matrix() const { return ConstRowMap<T>(data_.data(), rows(), cols()); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, data_.template cast<U>().eval());
  }

  void fill(T value) { data_.setConstant(value); }
  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (Index e : shape_)
      if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
  }
  Index offset(std::initializer_list<Index> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw ShapeError("index rank mismatch");
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : idx) {
      if (i < 0 || i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  ColVector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  if (a.size() == 0) return T(0);
  return (a.vec() - b.vec()).cwiseAbs().maxCoeff();
}

}  // namespace volmil

#endif  // VOLMIL_TENSOR_HPP_
