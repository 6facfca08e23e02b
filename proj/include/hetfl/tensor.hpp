#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hetfl/errors.hpp"

namespace hetfl {

// Dense row-major tensor of 64-bit reals.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (data_.size() != count(shape_)) {
      throw ShapeError("tensor data has " + std::to_string(data_.size()) + " elements, shape " +
                       shape_string(shape_) + " needs " + std::to_string(count(shape_)));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t numel() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  [[nodiscard]] std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  // Scalar value of a single-element tensor.
  [[nodiscard]] double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  [[nodiscard]] bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  // Copy of the selected rows of a rank-2 tensor.
  [[nodiscard]] Tensor gather_rows(std::span<const std::size_t> idx) const {
    const std::size_t c = cols();
    std::vector<double> out;
    out.reserve(idx.size() * c);
    for (std::size_t r : idx) {
      if (r >= rows()) throw ShapeError("row index out of range");
      out.insert(out.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * c),
                 data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
    }
    return Tensor({idx.size(), c}, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  static std::string shape_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
  }

 private:
  static void check_extents(const Shape& s) {
    for (std::size_t e : s) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(s));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// Bitwise equality, treating -0.0 and 0.0 as distinct and NaN payloads as compared bits.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(), [](double p, double q) {
    return std::bit_cast<std::uint64_t>(p) == std::bit_cast<std::uint64_t>(q);
  });
}

}  // namespace hetfl
