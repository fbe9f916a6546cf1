#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rsddpm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Thrown whenever two operands disagree in shape. Nothing broadcasts implicitly.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

/// Dense row-major array of reals. The flat buffer always holds exactly
/// product(shape) elements.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0)) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Real(0)); }
  static Tensor full(Shape shape, Real v) { return Tensor(std::move(shape), v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  const std::vector<Real>& vector() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <class Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](Real v) { return static_cast<Other>(v); });
    return Tensor<Other>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor shape " + shape_string(shape) + " has a zero dimension");
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

// Element-wise helpers on plain (untracked) tensors.

template <class Real, class Fn>
Tensor<Real> zip_with(const Tensor<Real>& a, const Tensor<Real>& b, const char* what, Fn fn) {
  require_same_shape(a.shape(), b.shape(), what);
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i], b[i]);
  return out;
}

template <class Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) {
  return zip_with(a, b, "add", [](Real x, Real y) { return x + y; });
}

template <class Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) {
  return zip_with(a, b, "sub", [](Real x, Real y) { return x - y; });
}

template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) {
  return zip_with(a, b, "mul", [](Real x, Real y) { return x * y; });
}

template <class Real>
Tensor<Real> operator*(Real s, const Tensor<Real>& a) {
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * a[i];
  return out;
}

/// a*x + b*y, computed element-wise in that order.
template <class Real>
Tensor<Real> axpby(Real a, const Tensor<Real>& x, Real b, const Tensor<Real>& y) {
  return zip_with(x, y, "axpby", [a, b](Real u, Real v) { return a * u + b * v; });
}

template <class Real>
Tensor<Real> clamp(const Tensor<Real>& a, Real lo, Real hi) {
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::clamp(a[i], lo, hi);
  return out;
}

template <class Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class Real>
Real max_abs(const Tensor<Real>& a) {
  Real m = 0;
  for (auto v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace rsddpm
