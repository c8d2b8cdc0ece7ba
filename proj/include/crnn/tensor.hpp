// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crnn/error.hpp"

namespace crnn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array of doubles. Rank is dynamic: the model moves
/// between rank-2 weights, rank-3 sequences and rank-4 feature maps.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  /// Builds a rank-2 tensor from nested rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  double& operator()(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  double operator()(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  /// Same data viewed under another shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " +
                           shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  /// Exact equality of shape and every stored bit pattern's value.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_) {
      throw DimensionError(std::string(what) + ": shape mismatch " +
                           shape_str(shape_) + " vs " + shape_str(o.shape_));
    }
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw DimensionError("index rank " + std::to_string(idx.size()) +
                           " does not match tensor rank " +
                           std::to_string(shape_.size()));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) throw DimensionError("index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Matrix product of rank-2 tensors.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

enum class ReduceOp { sum, mean, max };

/// Reduces over `axes`; the remaining axes keep their order. Reducing every
/// axis yields a shape-[1] tensor.
inline Tensor reduce(const Tensor& t, ReduceOp op, std::vector<std::size_t> axes) {
  std::vector<bool> reduced(t.rank(), false);
  for (std::size_t ax : axes) {
    if (ax >= t.rank()) {
      throw DimensionError("reduce: axis " + std::to_string(ax) +
                           " invalid for shape " + shape_str(t.shape()));
    }
    reduced[ax] = true;
  }

  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t ax = 0; ax < t.rank(); ++ax) {
    if (reduced[ax]) {
      count *= t.dim(ax);
    } else {
      out_shape.push_back(t.dim(ax));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const double init = op == ReduceOp::max ? -std::numeric_limits<double>::infinity() : 0.0;
  Tensor out(out_shape, init);

  std::vector<std::size_t> idx(t.rank(), 0);
  for (std::size_t flat = 0; flat < t.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t ax = 0; ax < t.rank(); ++ax) {
      if (!reduced[ax]) o = o * t.dim(ax) + idx[ax];
    }
    const double v = t[flat];
    if (op == ReduceOp::max) {
      out[o] = std::max(out[o], v);
    } else {
      out[o] += v;
    }
    for (std::size_t ax = t.rank(); ax-- > 0;) {
      if (++idx[ax] < t.dim(ax)) break;
      idx[ax] = 0;
    }
  }
  if (op == ReduceOp::mean) out *= 1.0 / static_cast<double>(count);
  return out;
}

inline Tensor reduce_all(const Tensor& t, ReduceOp op) {
  std::vector<std::size_t> axes(t.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return reduce(t, op, axes);
}

}  // namespace crnn
