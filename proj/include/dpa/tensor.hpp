#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dpa {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Value type; participates in a recorded
/// computation only through a Tape (see tape.hpp).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Extents of a rank-2 tensor; rank-1 tensors are treated as one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Scalar value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  Tensor row(std::size_t r) const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Bit-for-bit equality of shape and payload (distinguishes -0.0 from 0.0).
bool bitwise_equal(const Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);

/// Elementwise sign with sign(0) = 0. Not recorded on any tape.
Tensor sign(const Tensor& t);

/// Clamp every element to [max(center - eps, lo), min(center + eps, hi)].
/// The bounds are tightened by one ulp where rounding would otherwise let
/// |out - center| evaluate above eps, so the L-inf predicate holds exactly.
Tensor clip_box(const Tensor& x, const Tensor& center, double eps, double lo, double hi);

double linf_distance(const Tensor& a, const Tensor& b);

}  // namespace dpa
