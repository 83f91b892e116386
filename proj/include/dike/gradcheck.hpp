#pragma once

#include <functional>

#include "dike/autodiff.hpp"

namespace dike {

/// Builds a scalar loss from one leaf; grad_check calls it repeatedly with
/// perturbed leaf values.
using ScalarBuilder = std::function<ad::NodeId(ad::Tape&, ad::NodeId)>;

/// Max over coordinates of the relative difference between the tape gradient
/// and central finite differences at x. Per-coordinate denominator is
/// max(|g_ad|, |g_fd|, 1e-3) so exact zeros compare cleanly.
double grad_check(const ScalarBuilder& build, const Tensor& x, double eps);

}  // namespace dike
