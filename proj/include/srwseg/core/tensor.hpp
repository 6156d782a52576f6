#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "srwseg/core/error.hpp"

namespace srwseg {

using Shape = std::vector<int>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

/// Dense row-major array of rank 1..4. Rank-4 tensors use the (N, C, H, W) layout.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    for (int d : shape_) {
      if (d < 0) throw ValidationError("negative tensor extent in " + to_string(shape_));
    }
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != element_count(shape_)) {
      throw ValidationError("value count " + std::to_string(data_.size()) + " does not match shape " +
                            to_string(shape_));
    }
  }

  bool empty() const { return data_.empty() && shape_.empty(); }
  int rank() const { return static_cast<int>(shape_.size()); }
  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int i, int j) { return data_[offset(i, j)]; }
  const T& at(int i, int j) const { return data_[offset(i, j)]; }
  T& at(int i, int j, int k) { return data_[offset(i, j, k)]; }
  const T& at(int i, int j, int k) const { return data_[offset(i, j, k)]; }
  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  /// Pointer to the contiguous (H, W) plane of sample n, channel c.
  T* plane(int n, int c) { return data_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * plane_size(); }
  const T* plane(int n, int c) const {
    return data_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * plane_size();
  }
  std::size_t plane_size() const { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
      throw ValidationError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }

  void check_same(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_) {
      throw ValidationError(std::string("shape mismatch in ") + what + ": " + to_string(shape_) + " vs " +
                            to_string(o.shape_));
    }
  }

 private:
  std::size_t offset(int i, int j) const {
    assert(rank() == 2);
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t offset(int i, int j, int k) const {
    assert(rank() == 3);
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t offset(int n, int c, int h, int w) const {
    assert(rank() == 4);
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
void require_rank(const Tensor<T>& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ValidationError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          to_string(t.shape()));
  }
}

template <class T>
void require_finite(const Tensor<T>& t, const char* what) {
  if (!t.all_finite()) throw ValidationError(std::string(what) + ": input contains non-finite values");
}

/// Validates the FeatureMap contract: rank 4, every extent >= 1, finite entries.
template <class T>
void require_feature_map(const Tensor<T>& t, const char* what) {
  require_rank(t, 4, what);
  for (int d : t.shape()) {
    if (d < 1) throw ValidationError(std::string(what) + ": empty extent in " + to_string(t.shape()));
  }
  require_finite(t, what);
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same(b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

template <class T>
T sum(const Tensor<T>& t) {
  return std::accumulate(t.values().begin(), t.values().end(), T{});
}

}  // namespace srwseg
