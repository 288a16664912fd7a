// Dense row-major tensor of rank <= 4. Deliberately minimal: the layers and
// attention operators index flat storage directly for speed; this class only
// owns the buffer and shape bookkeeping.
#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "adr/common.hpp"

namespace adr {

template <typename R>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(count(shape_), R(0));
  }
  Tensor(std::vector<int> shape, std::vector<R> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_))
      throw ValidationError("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, R value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  R* data() { return data_.data(); }
  const R* data() const { return data_.data(); }
  std::vector<R>& vec() { return data_; }
  const std::vector<R>& vec() const { return data_; }

  R& operator[](std::size_t i) { return data_[i]; }
  const R& operator[](std::size_t i) const { return data_[i]; }

  // Rank-specific accessors; callers are expected to know the layout.
  R& at2(int a, int b) { return data_[idx2(a, b)]; }
  const R& at2(int a, int b) const { return data_[idx2(a, b)]; }
  R& at3(int a, int b, int c) { return data_[idx3(a, b, c)]; }
  const R& at3(int a, int b, int c) const { return data_[idx3(a, b, c)]; }
  R& at4(int a, int b, int c, int d) { return data_[idx4(a, b, c, d)]; }
  const R& at4(int a, int b, int c, int d) const { return data_[idx4(a, b, c, d)]; }

  std::size_t idx2(int a, int b) const {
    return static_cast<std::size_t>(a) * shape_[1] + b;
  }
  std::size_t idx3(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c;
  }
  std::size_t idx4(int a, int b, int c, int d) const {
    return ((static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d;
  }

  void fill(R v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // First index whose value is non-finite, or -1 when all entries are finite.
  std::ptrdiff_t first_non_finite() const {
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!is_finite_value(data_[i])) return static_cast<std::ptrdiff_t>(i);
    return -1;
  }

  template <typename R2>
  Tensor<R2> cast() const {
    std::vector<R2> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<R2>(data_[i]);
    return Tensor<R2>(shape_, std::move(out));
  }

 private:
  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ValidationError("Tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<int> shape_;
  std::vector<R> data_;
};

template <typename R>
std::string shape_str(const Tensor<R>& t) {
  std::string s = "[";
  for (int i = 0; i < t.rank(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.dim(i));
  }
  return s + "]";
}

}  // namespace adr
