#include "dike/gradcheck.hpp"

#include <cmath>

namespace dike {

double grad_check(const ScalarBuilder& build, const Tensor& x, double eps) {
  ad::Tape tape;
  const ad::NodeId leaf = tape.param(x);
  const ad::NodeId root = build(tape, leaf);
  tape.backward(root);
  const Tensor g_ad = tape.grad(leaf);

  auto eval = [&](const Tensor& probe) {
    ad::Tape t;
    const ad::NodeId l = t.input(probe);
    return t.val(build(t, l)).item();
  };

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval(probe);
    probe[i] = x[i] - eps;
    const double down = eval(probe);
    probe[i] = x[i];
    const double g_fd = (up - down) / (2.0 * eps);
    const double denom = std::max({std::fabs(g_ad[i]), std::fabs(g_fd), 1e-3});
    worst = std::max(worst, std::fabs(g_ad[i] - g_fd) / denom);
  }
  return worst;
}

}  // namespace dike
