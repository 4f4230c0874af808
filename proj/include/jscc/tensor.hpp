#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "jscc/error.hpp"

namespace jscc {

/// Batch-first 4-D shape (N, C, H, W).
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const { return std::size_t(n) * c * h * w; }
  /// Elements per batch item.
  std::size_t item_size() const { return std::size_t(c) * h * w; }
  std::size_t plane() const { return std::size_t(h) * w; }
  Shape with_batch(int batch) const { return {batch, c, h, w}; }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
  }
};

/// Dense row-major NCHW tensor with value semantics.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ConfigError("tensor data size " + std::to_string(data_.size()) +
                        " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  int batch() const { return shape_.n; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int h, int w) {
    return data_[((std::size_t(n) * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[((std::size_t(n) * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  std::span<T> item(int n) {
    return {data_.data() + std::size_t(n) * shape_.item_size(), shape_.item_size()};
  }
  std::span<const T> item(int n) const {
    return {data_.data() + std::size_t(n) * shape_.item_size(), shape_.item_size()};
  }

  /// Copy of batch item n as a batch of one.
  Tensor slice(int n) const { return slice(n, 1); }
  Tensor slice(int first, int count) const {
    Tensor out(shape_.with_batch(count));
    auto begin = data_.begin() + std::ptrdiff_t(first) * std::ptrdiff_t(shape_.item_size());
    std::copy(begin, begin + std::ptrdiff_t(out.size()), out.data_.begin());
    return out;
  }
  void set_item(int n, std::span<const T> src) {
    std::copy(src.begin(), src.end(), item(n).begin());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Shape s) {
    if (s.size() != data_.size()) {
      throw ConfigError("cannot reshape " + shape_.str() + " to " + s.str());
    }
    shape_ = s;
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o);
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
  friend Tensor operator*(T s, Tensor a) { return a *= s; }

  /// this += s * o
  void axpy(T s, const Tensor& o) {
    check_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_same(const Tensor& o) const {
    if (o.shape_ != shape_) {
      throw ConfigError("shape mismatch: " + shape_.str() + " vs " + o.shape_.str());
    }
  }

  Shape shape_{};
  std::vector<T> data_;
};

template <typename T>
double squared_norm(std::span<const T> v) {
  double acc = 0.0;
  for (T x : v) acc += double(x) * double(x);
  return acc;
}

template <typename T>
double squared_norm(std::span<T> v) {
  return squared_norm(std::span<const T>(v));
}

template <typename T>
double squared_norm(const Tensor<T>& t) {
  return squared_norm(std::span<const T>(t.values()));
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

/// Concatenate batch-of-one (or larger) tensors along the batch axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> parts) {
  if (parts.empty()) return {};
  Shape s = parts.front().shape();
  int n = 0;
  for (const auto& p : parts) {
    if (p.shape().with_batch(0) != s.with_batch(0)) {
      throw ConfigError("cannot stack " + p.shape().str() + " with " + s.str());
    }
    n += p.batch();
  }
  Tensor<T> out(s.with_batch(n));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.data() + offset);
    offset += p.size();
  }
  return out;
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  return stack(std::span<const Tensor<T>>(parts));
}

}  // namespace jscc
