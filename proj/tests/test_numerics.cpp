#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dike/autodiff.hpp"
#include "dike/gradcheck.hpp"
#include "dike/linalg.hpp"
#include "dike/rng.hpp"
#include "dike/serialize.hpp"
#include "dike/tensor.hpp"

using namespace dike;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double stddev = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

// Independent matmul oracle: naive triple loop, accumulation order j-major.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::zeros({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
      c.at(i, j) = acc;
    }
  return c;
}

// Gaussian CDF through a truncated Maclaurin series for erf, evaluated in
// extended precision; independent of std::erf.
double phi_series(double x) {
  const long double z = static_cast<long double>(x) / 1.41421356237309504880168872420969808L;
  long double term = z, sum = z;
  for (int n = 1; n < 40; ++n) {
    term *= -z * z / n;
    sum += term / (2 * n + 1);
  }
  const long double erf = sum * 2.0L / 1.77245385090551602729816748334114518L;  // 2/sqrt(pi)
  return static_cast<double>(0.5L * (1.0L + erf));
}

}  // namespace

TEST_CASE("matmul: identity, hand result, oracle agreement") {
  Rng rng(11);
  const Tensor a = random_tensor(rng, {3, 3});
  CHECK(max_abs_diff(matmul(Tensor::identity(3), a), a) == 0.0);

  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor v = Tensor::from({2, 1}, {0, 1});
  const Tensor mv = matmul(m, v);
  CHECK(mv.at(0, 0) == 2.0);
  CHECK(mv.at(1, 0) == 4.0);

  const Tensor x = random_tensor(rng, {5, 7});
  const Tensor y = random_tensor(rng, {7, 3});
  CHECK(max_abs_diff(matmul(x, y), matmul_oracle(x, y)) < 1e-12);

  CHECK_THROWS_AS(matmul(x, x), Error);
}

TEST_CASE("gelu: exact-CDF values") {
  ad::Tape tape;
  const auto out = tape.val(tape.gelu(tape.input(Tensor::vec({0.0, 1.0, -10.0}))));
  CHECK(out[0] == 0.0);
  CHECK(out[1] == doctest::Approx(1.0 * phi_series(1.0)).epsilon(1e-9));
  CHECK(out[1] == doctest::Approx(0.841345).epsilon(1e-5));
  CHECK(std::fabs(out[2]) < 1e-8);
}

TEST_CASE("softmax cross entropy: saturated, uniform, extended-precision oracle") {
  const Tensor saturated = Tensor::vec({1e6, 0.0, 0.0});
  CHECK(cross_entropy_val(saturated, 0) < 1e-9);

  const Tensor uniform = Tensor::vec({0.3, 0.3, 0.3, 0.3});
  CHECK(cross_entropy_val(uniform, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor(rng, {9}, 3.0);
    const std::size_t target = trial % 9;
    long double z = 0.0L;
    for (std::size_t i = 0; i < logits.size(); ++i) z += std::exp((long double)logits[i]);
    const double expected = static_cast<double>(std::log(z) - (long double)logits[target]);
    CHECK(cross_entropy_val(logits, target) == doctest::Approx(expected).epsilon(1e-10));
  }

  CHECK_THROWS_AS(cross_entropy_val(uniform, 4), Error);
}

TEST_CASE("solve_spd: identity, scalar, residual bound, pivot error") {
  Rng rng(3);
  const Tensor b = random_tensor(rng, {4, 2});
  CHECK(max_abs_diff(solve_spd(Tensor::identity(4), b), b) == 0.0);

  const Tensor x = solve_spd(Tensor::from({1, 1}, {2.0}), Tensor::from({1, 1}, {2.0}));
  CHECK(x.item() == doctest::Approx(1.0).epsilon(1e-15));

  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 6 + trial;
    const Tensor m = random_tensor(rng, {n, n});
    Tensor a = matmul(transpose(m), m);
    for (std::size_t i = 0; i < n; ++i) a.at(i, i) += 1.0;
    const Tensor rhs = random_tensor(rng, {n, 3});
    const Tensor sol = solve_spd(a, rhs);
    const double residual = norm2(sub(matmul(a, sol), rhs));
    CHECK(residual <= 1e-8 * norm2(rhs));
  }

  Tensor not_spd = Tensor::from({2, 2}, {1.0, 2.0, 2.0, 1.0});
  try {
    solve_spd(not_spd, Tensor::from({2, 1}, {1.0, 1.0}));
    FAIL("expected factorization error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Factorization);
    CHECK(std::string(e.what()).find("pivot 1") != std::string::npos);
  }
}

TEST_CASE("grad_check: quadratic, constant") {
  Rng rng(5);
  const Tensor x = random_tensor(rng, {6});
  const double err = grad_check(
      [](ad::Tape& t, ad::NodeId leaf) { return t.sum_squares(leaf); }, x, 1e-5);
  CHECK(err <= 1e-7);

  // Constant function: tape gradient is exactly zero.
  ad::Tape tape;
  const ad::NodeId leaf = tape.param(x);
  const ad::NodeId c = tape.input(Tensor::scalar(3.0));
  const ad::NodeId root = tape.add(c, tape.scale(tape.sum_squares(leaf), 0.0));
  tape.backward(root);
  CHECK(max_abs(tape.grad(leaf)) == 0.0);
}

TEST_CASE("backward of composite ops agrees with finite differences") {
  Rng rng(17);
  const Tensor w = random_tensor(rng, {5, 4});
  const Tensor gain = random_tensor(rng, {4}, 0.3);
  const Tensor bias = random_tensor(rng, {4}, 0.3);
  const Tensor other = random_tensor(rng, {5});

  auto build = [&](ad::Tape& t, ad::NodeId leaf) {
    const ad::NodeId g = t.input(gain);
    const ad::NodeId b = t.input(bias);
    const ad::NodeId normed = t.layer_norm(leaf, g, b);
    const ad::NodeId activated = t.gelu(t.matmul(normed, t.transpose(t.input(w))));
    const ad::NodeId cos = t.cosine(t.pick_row(activated, 1), t.input(other));
    const ad::NodeId ce = t.cross_entropy(t.pick_row(activated, 2), 3);
    return t.add(t.add(cos, ce), t.sqrt_scalar(t.sum_squares(normed)));
  };
  const Tensor x = random_tensor(rng, {3, 4});
  CHECK(grad_check(build, x, 1e-5) <= 1e-4);
}

TEST_CASE("causal softmax rows sum to one and mask the future") {
  Rng rng(23);
  ad::Tape tape;
  const Tensor scores = random_tensor(rng, {5, 5});
  const Tensor probs = tape.val(tape.causal_softmax(tape.input(scores)));
  for (std::size_t i = 0; i < 5; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      row += probs.at(i, j);
      if (j > i) CHECK(probs.at(i, j) == 0.0);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }

  auto build = [&](ad::Tape& t, ad::NodeId leaf) {
    return t.cross_entropy(t.pick_row(t.causal_softmax(leaf), 3), 2);
  };
  CHECK(grad_check(build, scores, 1e-5) <= 1e-4);
}

TEST_CASE("deterministic evaluation: same inputs, same bits") {
  Rng rng(29);
  const Tensor a = random_tensor(rng, {8, 8});
  const Tensor b = random_tensor(rng, {8, 8});
  CHECK(bitwise_equal(matmul(a, b), matmul(a, b)));
  ad::Tape t1, t2;
  const auto r1 = t1.val(t1.gelu(t1.matmul(t1.input(a), t1.input(b))));
  const auto r2 = t2.val(t2.gelu(t2.matmul(t2.input(a), t2.input(b))));
  CHECK(bitwise_equal(r1, r2));
}

TEST_CASE("tensor container round-trips bit-exactly") {
  Rng rng(31);
  const Tensor t = random_tensor(rng, {3, 5});
  const auto dir = std::filesystem::temp_directory_path() / "dike_numerics_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "t.dktn";
  save_tensor(path, t);
  CHECK(bitwise_equal(load_tensor(path), t));

  NamedTensors bundle = {{"alpha", t}, {"beta", random_tensor(rng, {7})}};
  const auto bpath = dir / "b.dktb";
  save_bundle(bpath, bundle);
  const NamedTensors loaded = load_bundle(bpath);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].first == "alpha");
  CHECK(bitwise_equal(loaded[0].second, bundle[0].second));
  CHECK(bitwise_equal(loaded[1].second, bundle[1].second));
  std::filesystem::remove_all(dir);
}

TEST_CASE("solve_spd composed with multiplication is the identity") {
  Rng rng(37);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3 + static_cast<std::size_t>(rng.below(10));
    const Tensor m = random_tensor(rng, {n, n});
    Tensor a = matmul(transpose(m), m);
    for (std::size_t i = 0; i < n; ++i) a.at(i, i) += 1.0;
    const Tensor x = random_tensor(rng, {n, 2});
    const Tensor back = solve_spd(a, matmul(a, x));
    CHECK(norm2(sub(back, x)) <= 1e-8 * std::max(1.0, norm2(x)));
  }
}
