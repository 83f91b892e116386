#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dike/error.hpp"

namespace dike {

/// Dense row-major tensor of 64-bit reals. Rank 0 is a scalar (one value),
/// rank 1 a vector, rank 2 a matrix. Value semantics throughout; no view
/// aliasing, no hidden state.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value);
  static Tensor vec(std::vector<double> values);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 accessors; rank 0/1 are treated as a single column.
  std::size_t rows() const { return rank() >= 1 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape_[1] : 1; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  /// The sole value of a size-1 tensor.
  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  std::string shape_str() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Plain value-level arithmetic (no differentiation). The autodiff tape
// forwards to these for its own evaluations so both paths round identically.

Tensor matmul(const Tensor& a, const Tensor& b);     // (m,k)x(k,n)
Tensor matvec(const Tensor& a, const Tensor& x);     // (m,k)x(k)
Tensor transpose(const Tensor& a);
Tensor outer(const Tensor& u, const Tensor& v);      // (m)x(n) -> (m,n)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor hadamard(const Tensor& a, const Tensor& b);

double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);                       // Euclidean / Frobenius
double sum_squares_val(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double cosine_val(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Softmax of a vector, max-stabilized.
Tensor softmax_vec(const Tensor& logits);
/// -log softmax(logits)[target], max-stabilized.
double cross_entropy_val(const Tensor& logits, std::size_t target);

}  // namespace dike
