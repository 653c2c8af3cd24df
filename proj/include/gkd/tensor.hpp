#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gkd {

using Shape = std::vector<std::size_t>;

/// Raised when tensor shapes are inconsistent with an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Dense row-major N-dimensional array. Every dimension is positive and the
/// element count always equals the product of the shape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{1}, data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                       shape_string(shape_));
    }
    return shape_[axis];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t flat) noexcept { return data_[flat]; }
  const T& operator[](std::size_t flat) const noexcept { return data_[flat]; }

  /// Row-major strides, innermost dimension has stride 1.
  Shape strides() const {
    Shape out(shape_.size(), 1);
    for (std::size_t i = shape_.size(); i-- > 1;) out[i - 1] = out[i] * shape_[i];
    return out;
  }

  std::size_t flat_index(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size()) {
      throw ShapeError("index rank " + std::to_string(index.size()) +
                       " does not match tensor rank " + std::to_string(shape_.size()));
    }
    std::size_t flat = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= shape_[i]) {
        throw std::out_of_range("index " + std::to_string(index[i]) + " out of range on axis " +
                                std::to_string(i) + " of " + shape_string(shape_));
      }
      flat = flat * shape_[i] + index[i];
    }
    return flat;
  }

  T& at(std::initializer_list<std::size_t> index) {
    return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
  }
  const T& at(std::initializer_list<std::size_t> index) const {
    return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out(*this);
    out.reshape(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }

  void reshape(Shape shape) {
    validate_shape(shape);
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace gkd
