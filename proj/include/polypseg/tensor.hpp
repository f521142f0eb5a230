#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "polypseg/error.hpp"

namespace polypseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array. The element type is the scalar for real tensors
/// (float for training, double for gradient checks) and std::int32_t for
/// label maps and pooling indices.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{}); }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-D accessors for NCHW layouts.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h,
              std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(),
                         [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (auto d : shape_) {
      if (d == 0) {
        throw ShapeError("tensor dimensions must be positive, got " +
                         shape_str(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using LabelTensor = Tensor<std::int32_t>;

/// Byte-level equality, distinguishing -0.0 from 0.0 and NaN payloads.
template <class T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(
      reinterpret_cast<const unsigned char*>(a.data()),
      reinterpret_cast<const unsigned char*>(a.data() + a.size()),
      reinterpret_cast<const unsigned char*>(b.data()));
}

template <class T>
void require_shape(const Tensor<T>& t, const Shape& expected,
                   const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected shape " +
                     shape_str(expected) + ", got " + shape_str(t.shape()));
  }
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " +
                     std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  T acc{};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
T sum(const Tensor<T>& a) {
  T acc{};
  for (auto v : a.vec()) acc += v;
  return acc;
}

}  // namespace polypseg
