#include "dike/linalg.hpp"

#include <cmath>

namespace dike {

Tensor cholesky(const Tensor& a) {
  if (a.rank() != 2 || a.rows() != a.cols())
    fail(ErrorKind::Dimension, "cholesky: expected square matrix, got " + a.shape_str());
  const std::size_t n = a.rows();
  Tensor l = Tensor::zeros({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a.at(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l.at(j, k) * l.at(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag))
      fail(ErrorKind::Factorization,
           "cholesky: matrix not positive definite at pivot " + std::to_string(j));
    const double ljj = std::sqrt(diag);
    l.at(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double acc = a.at(i, j);
      for (std::size_t k = 0; k < j; ++k) acc -= l.at(i, k) * l.at(j, k);
      l.at(i, j) = acc / ljj;
    }
  }
  return l;
}

Tensor solve_spd(const Tensor& a, const Tensor& b) {
  const Tensor l = cholesky(a);
  const std::size_t n = a.rows();
  const bool vector_rhs = b.rank() == 1;
  const std::size_t m = vector_rhs ? 1 : b.cols();
  if (b.rows() != n)
    fail(ErrorKind::Dimension, "solve_spd: rhs rows " + b.shape_str() + " vs system " + a.shape_str());
  Tensor x = b;
  // L y = b (forward), then L^T x = y (backward), column by column.
  auto at = [&](Tensor& t, std::size_t i, std::size_t j) -> double& {
    return t.data()[i * m + j];
  };
  for (std::size_t col = 0; col < m; ++col) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = at(x, i, col);
      for (std::size_t k = 0; k < i; ++k) acc -= l.at(i, k) * at(x, k, col);
      at(x, i, col) = acc / l.at(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double acc = at(x, i, col);
      for (std::size_t k = i + 1; k < n; ++k) acc -= l.at(k, i) * at(x, k, col);
      at(x, i, col) = acc / l.at(i, i);
    }
  }
  return x;
}

Tensor right_solve_spd(const Tensor& m, const Tensor& a) {
  return transpose(solve_spd(a, transpose(m)));
}

}  // namespace dike
