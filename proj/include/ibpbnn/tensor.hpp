#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ibpbnn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor of doubles. A rank-0 tensor (empty shape) is a
/// scalar holding exactly one value.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    }
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    if (o.shape_ != shape_) {
      throw ShapeError("in-place add of " + shape_str(o.shape_) + " into " + shape_str(shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

namespace detail {

/// Result shape of numpy-style broadcasting, or ShapeError naming both shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast shapes " + shape_str(a) + " and " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// For each flat index of `out`, the flat index into a tensor of shape `in`
/// broadcast against it.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n, 0);
  if (in == out) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  if (shape_numel(in) == 1) return idx;
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > off;) {
    const std::size_t d = in[i - off];
    in_stride[i] = d == 1 ? 0 : s;
    s *= d;
  }
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t j = 0;
    for (std::size_t i = 0; i < r; ++i) j += counter[i] * in_stride[i];
    idx[flat] = j;
    for (std::size_t i = r; i-- > 0;) {
      if (++counter[i] < out[i]) break;
      counter[i] = 0;
    }
  }
  return idx;
}

}  // namespace detail

/// Sum `t` down to `target` shape (the adjoint of broadcasting).
inline Tensor reduce_to(const Tensor& t, const Shape& target) {
  if (t.shape() == target) return t;
  Tensor out(target, 0.0);
  const auto idx = detail::broadcast_index(target, t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[idx[i]] += t[i];
  return out;
}

inline Tensor broadcast_to(const Tensor& t, const Shape& target) {
  if (t.shape() == target) return t;
  const Shape bs = detail::broadcast_shape(t.shape(), target, "broadcast");
  if (bs != target) {
    throw ShapeError("broadcast: cannot broadcast " + shape_str(t.shape()) + " to " +
                     shape_str(target));
  }
  Tensor out(target);
  const auto idx = detail::broadcast_index(t.shape(), target);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[idx[i]];
  return out;
}

template <class F>
Tensor map(const Tensor& t, F&& f) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = f(t[i]);
  return out;
}

template <class F>
Tensor zip_broadcast(const Tensor& a, const Tensor& b, F&& f, const char* op) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), op);
  const auto ia = detail::broadcast_index(a.shape(), s);
  const auto ib = detail::broadcast_index(b.shape(), s);
  Tensor out(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[ia[i]], b[ib[i]]);
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out(Shape{n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t n = a.dim(0), m = a.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a[i * m + j];
  return out;
}

inline double sum_all(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return s;
}

}  // namespace ibpbnn
