#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pfed {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// Dense row-major tensor of doubles. Values are immutable by convention once
// they enter a GradTape; plain Tensors are freely mutable.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match data length " +
                                  std::to_string(data_.size()));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  // Row-major matrix from nested initializer data.
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }

  std::size_t rows() const {
    require_2d();
    return shape_[0];
  }
  std::size_t cols() const {
    require_2d();
    return shape_[1];
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  // raw row pointers for 2-d hot loops
  double* row(std::size_t i) { return data_.data() + i * shape_[1]; }
  const double* row(std::size_t i) const { return data_.data() + i * shape_[1]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  void require_2d() const {
    if (shape_.size() != 2) throw std::logic_error("tensor: expected 2-d tensor, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

// y += a * x
inline void axpy(double a, const Tensor& x, Tensor& y) {
  if (!x.same_shape(y))
    throw std::invalid_argument("axpy: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  const double* xs = x.data();
  double* ys = y.data();
  for (std::size_t i = 0; i < y.numel(); ++i) ys[i] += a * xs[i];
}

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (std::size_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t[i]));
  return m;
}

// Max-norm relative difference; denominator floored to keep zero tensors comparable.
inline double rel_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("rel_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double num = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) num = std::max(num, std::abs(a[i] - b[i]));
  return num / std::max({max_abs(a), max_abs(b), 1e-30});
}

}  // namespace pfed
