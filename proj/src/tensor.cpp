#include "dike/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace dike {

namespace {
std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}
}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_.assign(shape_product(t.shape_), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (double& v : t.data_) v = value;
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.data_.assign(1, value);
  return t;
}

Tensor Tensor::vec(std::vector<double> values) {
  Tensor t;
  t.shape_ = {values.size()};
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values) {
  if (shape_product(shape) != values.size())
    fail(ErrorKind::Dimension, "tensor data length " + std::to_string(values.size()) +
                                   " does not match shape product " +
                                   std::to_string(shape_product(shape)));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  if (size() != 1) fail(ErrorKind::Dimension, "item() on tensor of size " + std::to_string(size()));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ")";
  return os.str();
}

namespace {
void require_rank2(const Tensor& t, const char* who) {
  if (t.rank() != 2) fail(ErrorKind::Dimension, std::string(who) + ": expected rank-2, got " + t.shape_str());
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul lhs");
  require_rank2(b, "matmul rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    fail(ErrorKind::Dimension, "matmul inner extents differ: " + a.shape_str() + " x " + b.shape_str());
  Tensor c = Tensor::zeros({m, n});
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ap[i * k + p];
      const double* brow = bp + p * n;
      double* crow = cp + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor matvec(const Tensor& a, const Tensor& x) {
  require_rank2(a, "matvec lhs");
  if (x.rank() != 1) fail(ErrorKind::Dimension, "matvec rhs: expected rank-1, got " + x.shape_str());
  const std::size_t m = a.rows(), k = a.cols();
  if (x.size() != k)
    fail(ErrorKind::Dimension, "matvec extents differ: " + a.shape_str() + " x " + x.shape_str());
  Tensor y = Tensor::zeros({m});
  const double* ap = a.data();
  const double* xp = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    const double* arow = ap + i * k;
    for (std::size_t p = 0; p < k; ++p) acc += arow[p] * xp[p];
    y[i] = acc;
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor outer(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1 || v.rank() != 1)
    fail(ErrorKind::Dimension, "outer: expected rank-1 inputs, got " + u.shape_str() + ", " + v.shape_str());
  Tensor t = Tensor::zeros({u.size(), v.size()});
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) t.at(i, j) = u[i] * v[j];
  return t;
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (!a.same_shape(b))
    fail(ErrorKind::Dimension, std::string(who) + ": shapes differ, " + a.shape_str() + " vs " + b.shape_str());
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s;
  return c;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(const Tensor& a) { return std::sqrt(sum_squares_val(a)); }

double sum_squares_val(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * a[i];
  return acc;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i]));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double cosine_val(const Tensor& a, const Tensor& b) {
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0)
    fail(ErrorKind::Data, "cosine of zero-norm vector");
  return dot(a, b) / (na * nb);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Tensor softmax_vec(const Tensor& logits) {
  if (logits.rank() != 1) fail(ErrorKind::Dimension, "softmax_vec: expected rank-1");
  double m = logits[0];
  for (std::size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
  Tensor p = Tensor::zeros({logits.size()});
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (std::size_t i = 0; i < p.size(); ++i) p[i] /= z;
  return p;
}

double cross_entropy_val(const Tensor& logits, std::size_t target) {
  if (logits.rank() != 1) fail(ErrorKind::Dimension, "cross_entropy_val: expected rank-1");
  if (target >= logits.size())
    fail(ErrorKind::Data, "cross entropy target " + std::to_string(target) + " out of range " +
                              std::to_string(logits.size()));
  double m = logits[0];
  for (std::size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += std::exp(logits[i] - m);
  return std::log(z) - (logits[target] - m);
}

}  // namespace dike
