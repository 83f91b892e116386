#pragma once

#include "dike/tensor.hpp"

namespace dike {

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Throws a factorization error naming the failing pivot if A is not SPD.
Tensor cholesky(const Tensor& a);

/// Solves A X = B for SPD A via Cholesky; B may be rank-1 or rank-2.
/// Never forms an explicit inverse.
Tensor solve_spd(const Tensor& a, const Tensor& b);

/// X = M A^{-1} for SPD A, computed as solve_spd(A, M^T)^T.
Tensor right_solve_spd(const Tensor& m, const Tensor& a);

}  // namespace dike
