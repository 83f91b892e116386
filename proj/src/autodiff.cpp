#include "dike/autodiff.hpp"

#include <cmath>
#include <numbers>

namespace dike::ad {

namespace {

double gelu_val(double x) { return x * 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_deriv(double x) {
  const double phi = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return phi + x * pdf;
}

}  // namespace

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::param(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Add;
  n.a = a;
  n.b = b;
  n.value = dike::add(val(a), val(b));
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Sub;
  n.a = a;
  n.b = b;
  n.value = dike::sub(val(a), val(b));
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double s) {
  Node n;
  n.op = Op::Scale;
  n.a = a;
  n.scalar = s;
  n.value = dike::scale(val(a), s);
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

NodeId Tape::add_rowvec(NodeId mat, NodeId row) {
  const Tensor& m = val(mat);
  const Tensor& r = val(row);
  if (m.rank() != 2 || r.rank() != 1 || m.cols() != r.size())
    fail(ErrorKind::Dimension, "add_rowvec: " + m.shape_str() + " + " + r.shape_str());
  Node n;
  n.op = Op::AddRowVec;
  n.a = mat;
  n.b = row;
  n.value = m;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) n.value.at(i, j) += r[j];
  n.needs_grad = nodes_[mat].needs_grad || nodes_[row].needs_grad;
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::MatMul;
  n.a = a;
  n.b = b;
  n.value = dike::matmul(val(a), val(b));
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

NodeId Tape::matvec(NodeId a, NodeId x) {
  Node n;
  n.op = Op::MatVec;
  n.a = a;
  n.b = x;
  n.value = dike::matvec(val(a), val(x));
  n.needs_grad = nodes_[a].needs_grad || nodes_[x].needs_grad;
  return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
  Node n;
  n.op = Op::Transpose;
  n.a = a;
  n.value = dike::transpose(val(a));
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

NodeId Tape::gelu(NodeId a) {
  Node n;
  n.op = Op::Gelu;
  n.a = a;
  n.value = val(a);
  const std::size_t count = n.value.size();
  if (nodes_[a].needs_grad) {
    // Cache the derivative so backward skips erf/exp recomputation.
    n.stash = Tensor::zeros({count});
    for (std::size_t i = 0; i < count; ++i) {
      const double x = n.value[i];
      n.stash[i] = gelu_deriv(x);
      n.value[i] = gelu_val(x);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) n.value[i] = gelu_val(n.value[i]);
  }
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias) {
  const Tensor& xv = val(x);
  const Tensor& g = val(gain);
  const Tensor& b = val(bias);
  const std::size_t cols = xv.rank() == 2 ? xv.cols() : xv.size();
  const std::size_t rows = xv.rank() == 2 ? xv.rows() : 1;
  if (g.size() != cols || b.size() != cols)
    fail(ErrorKind::Dimension, "layer_norm: gain/bias width mismatch");
  Node n;
  n.op = Op::LayerNorm;
  n.a = x;
  n.b = gain;
  n.c = bias;
  n.value = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = n.value.data() + r * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += row[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < cols; ++j) row[j] = g[j] * ((row[j] - mu) * inv) + b[j];
  }
  n.needs_grad = nodes_[x].needs_grad || nodes_[gain].needs_grad || nodes_[bias].needs_grad;
  return push(std::move(n));
}

NodeId Tape::causal_softmax(NodeId scores) {
  const Tensor& s = val(scores);
  if (s.rank() != 2 || s.rows() != s.cols())
    fail(ErrorKind::Dimension, "causal_softmax: expected square matrix, got " + s.shape_str());
  const std::size_t t = s.rows();
  Node n;
  n.op = Op::CausalSoftmax;
  n.a = scores;
  n.value = Tensor::zeros({t, t});
  for (std::size_t i = 0; i < t; ++i) {
    double m = s.at(i, 0);
    for (std::size_t j = 1; j <= i; ++j) m = std::max(m, s.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      n.value.at(i, j) = std::exp(s.at(i, j) - m);
      z += n.value.at(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) n.value.at(i, j) /= z;
  }
  n.needs_grad = nodes_[scores].needs_grad;
  return push(std::move(n));
}

NodeId Tape::causal_attention(NodeId q, NodeId k, NodeId v, std::uint32_t heads) {
  const Tensor& qv = val(q);
  const Tensor& kv = val(k);
  const Tensor& vv = val(v);
  if (qv.rank() != 2 || !qv.same_shape(kv) || !qv.same_shape(vv))
    fail(ErrorKind::Dimension, "causal_attention: q/k/v shapes differ");
  const std::size_t t = qv.rows(), d = qv.cols();
  if (heads == 0 || d % heads != 0)
    fail(ErrorKind::Dimension, "causal_attention: width not divisible by heads");
  const std::size_t hd = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Node n;
  n.op = Op::CausalAttention;
  n.a = q;
  n.b = k;
  n.c = v;
  n.aux = heads;
  n.value = Tensor::zeros({t, d});
  n.stash = Tensor::zeros({heads * t * t});  // per-head causal softmax rows
  std::vector<double> scores(t);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    double* probs = n.stash.data() + h * t * t;
    for (std::size_t i = 0; i < t; ++i) {
      double m = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        const double* qi = qv.data() + i * d + off;
        const double* kj = kv.data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) acc += qi[c] * kj[c];
        scores[j] = acc * inv_scale;
        m = std::max(m, scores[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        probs[i * t + j] = std::exp(scores[j] - m);
        z += probs[i * t + j];
      }
      double* out = n.value.data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const double p = probs[i * t + j] / z;
        probs[i * t + j] = p;
        const double* vj = vv.data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) out[c] += p * vj[c];
      }
    }
  }
  n.needs_grad = nodes_[q].needs_grad || nodes_[k].needs_grad || nodes_[v].needs_grad;
  return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId table, std::vector<std::uint32_t> ids) {
  const Tensor& t = val(table);
  if (t.rank() != 2) fail(ErrorKind::Dimension, "gather_rows: table must be rank-2");
  Node n;
  n.op = Op::GatherRows;
  n.a = table;
  n.value = Tensor::zeros({ids.size(), t.cols()});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= t.rows())
      fail(ErrorKind::Data, "gather_rows: id " + std::to_string(ids[r]) + " out of range");
    for (std::size_t j = 0; j < t.cols(); ++j) n.value.at(r, j) = t.at(ids[r], j);
  }
  n.list = std::move(ids);
  n.needs_grad = nodes_[table].needs_grad;
  return push(std::move(n));
}

NodeId Tape::pick_row(NodeId mat, std::uint32_t row) {
  const Tensor& m = val(mat);
  if (m.rank() != 2 || row >= m.rows())
    fail(ErrorKind::Dimension, "pick_row: row " + std::to_string(row) + " of " + m.shape_str());
  Node n;
  n.op = Op::PickRow;
  n.a = mat;
  n.aux = row;
  n.value = Tensor::zeros({m.cols()});
  for (std::size_t j = 0; j < m.cols(); ++j) n.value[j] = m.at(row, j);
  n.needs_grad = nodes_[mat].needs_grad;
  return push(std::move(n));
}

NodeId Tape::replace_row(NodeId mat, NodeId vec, std::uint32_t row) {
  const Tensor& m = val(mat);
  const Tensor& v = val(vec);
  if (m.rank() != 2 || v.rank() != 1 || v.size() != m.cols() || row >= m.rows())
    fail(ErrorKind::Dimension,
         "replace_row: row " + std::to_string(row) + ", " + m.shape_str() + " <- " + v.shape_str());
  Node n;
  n.op = Op::ReplaceRow;
  n.a = mat;
  n.b = vec;
  n.aux = row;
  n.value = m;
  for (std::size_t j = 0; j < m.cols(); ++j) n.value.at(row, j) = v[j];
  n.needs_grad = nodes_[mat].needs_grad || nodes_[vec].needs_grad;
  return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId mat, std::uint32_t c0, std::uint32_t c1) {
  const Tensor& m = val(mat);
  if (m.rank() != 2 || c0 >= c1 || c1 > m.cols())
    fail(ErrorKind::Dimension, "slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                                   ") of " + m.shape_str());
  Node n;
  n.op = Op::SliceCols;
  n.a = mat;
  n.list = {c0, c1};
  n.value = Tensor::zeros({m.rows(), c1 - c0});
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = c0; j < c1; ++j) n.value.at(i, j - c0) = m.at(i, j);
  n.needs_grad = nodes_[mat].needs_grad;
  return push(std::move(n));
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat_cols: no parts");
  const std::size_t rows = val(parts[0]).rows();
  std::size_t cols = 0;
  bool needs = false;
  for (NodeId p : parts) {
    if (val(p).rank() != 2 || val(p).rows() != rows)
      fail(ErrorKind::Dimension, "concat_cols: row mismatch");
    cols += val(p).cols();
    needs = needs || nodes_[p].needs_grad;
  }
  Node n;
  n.op = Op::ConcatCols;
  n.list.assign(parts.begin(), parts.end());
  n.value = Tensor::zeros({rows, cols});
  std::size_t off = 0;
  for (NodeId p : parts) {
    const Tensor& src = val(p);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < src.cols(); ++j) n.value.at(i, off + j) = src.at(i, j);
    off += src.cols();
  }
  n.needs_grad = needs;
  return push(std::move(n));
}

NodeId Tape::cross_entropy(NodeId logits, std::uint32_t target) {
  const Tensor& l = val(logits);
  if (l.rank() != 1) fail(ErrorKind::Dimension, "cross_entropy: expected rank-1 logits");
  Node n;
  n.op = Op::CrossEntropyVec;
  n.a = logits;
  n.aux = target;
  n.value = Tensor::scalar(cross_entropy_val(l, target));
  n.needs_grad = nodes_[logits].needs_grad;
  return push(std::move(n));
}

NodeId Tape::cross_entropy_rows(NodeId logits, std::vector<std::uint32_t> targets,
                                std::uint32_t first_row) {
  const Tensor& l = val(logits);
  if (l.rank() != 2) fail(ErrorKind::Dimension, "cross_entropy_rows: expected rank-2 logits");
  if (first_row + targets.size() > l.rows())
    fail(ErrorKind::Dimension, "cross_entropy_rows: rows out of range");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const std::size_t r = first_row + i;
    if (targets[i] >= l.cols())
      fail(ErrorKind::Data, "cross_entropy_rows: target out of range");
    double m = l.at(r, 0);
    for (std::size_t j = 1; j < l.cols(); ++j) m = std::max(m, l.at(r, j));
    double z = 0.0;
    for (std::size_t j = 0; j < l.cols(); ++j) z += std::exp(l.at(r, j) - m);
    total += std::log(z) - (l.at(r, targets[i]) - m);
  }
  Node n;
  n.op = Op::CrossEntropyRows;
  n.a = logits;
  n.aux = first_row;
  n.list = std::move(targets);
  n.value = Tensor::scalar(total);
  n.needs_grad = nodes_[logits].needs_grad;
  return push(std::move(n));
}

NodeId Tape::cosine(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Cosine;
  n.a = a;
  n.b = b;
  n.value = Tensor::scalar(cosine_val(val(a), val(b)));
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

NodeId Tape::sum_squares(NodeId a) {
  Node n;
  n.op = Op::SumSquares;
  n.a = a;
  n.value = Tensor::scalar(sum_squares_val(val(a)));
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

NodeId Tape::sqrt_scalar(NodeId a) {
  const Tensor& x = val(a);
  if (x.size() != 1) fail(ErrorKind::Dimension, "sqrt_scalar: expected scalar");
  if (x.item() < 0.0) fail(ErrorKind::Data, "sqrt_scalar: negative input");
  Node n;
  n.op = Op::SqrtScalar;
  n.a = a;
  n.value = Tensor::scalar(std::sqrt(x.item()));
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

NodeId Tape::logsumexp(const std::vector<NodeId>& scalars) {
  if (scalars.empty()) fail(ErrorKind::Dimension, "logsumexp: empty set");
  double m = val(scalars[0]).item();
  for (NodeId id : scalars) m = std::max(m, val(id).item());
  double z = 0.0;
  bool needs = false;
  for (NodeId id : scalars) {
    z += std::exp(val(id).item() - m);
    needs = needs || nodes_[id].needs_grad;
  }
  Node n;
  n.op = Op::LogSumExp;
  n.list.assign(scalars.begin(), scalars.end());
  n.scalar = m;
  n.value = Tensor::scalar(m + std::log(z));
  n.needs_grad = needs;
  return push(std::move(n));
}

void Tape::add_into(Tensor& dst, const Tensor& g) {
  if (dst.empty()) {
    dst = g;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void Tape::accumulate(NodeId id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
    return;
  }
  add_into(n.grad, g);
}

void Tape::accumulate(NodeId id, Tensor&& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = std::move(g);
    n.has_grad = true;
    return;
  }
  add_into(n.grad, g);
}

void Tape::backward(NodeId root) {
  if (val(root).size() != 1) fail(ErrorKind::Dimension, "backward: root must be scalar");
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
  if (!nodes_[root].needs_grad) return;  // constant function: all gradients stay zero
  nodes_[root].grad = Tensor::full(val(root).shape(), 1.0);
  nodes_[root].has_grad = true;
  for (NodeId id = root + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || n.op == Op::Leaf) continue;
    backward_node(n);
  }
}

void Tape::backward_node(Node& n) {
  const Tensor& g = n.grad;
  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::Add:
      accumulate(n.a, g);
      accumulate(n.b, g);
      break;
    case Op::Sub: {
      accumulate(n.a, g);
      if (nodes_[n.b].needs_grad) accumulate(n.b, dike::scale(g, -1.0));
      break;
    }
    case Op::Scale:
      if (nodes_[n.a].needs_grad) accumulate(n.a, dike::scale(g, n.scalar));
      break;
    case Op::AddRowVec: {
      accumulate(n.a, g);
      if (nodes_[n.b].needs_grad) {
        Tensor dv = Tensor::zeros({g.cols()});
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) dv[j] += g.at(i, j);
        accumulate(n.b, std::move(dv));
      }
      break;
    }
    case Op::MatMul: {
      const Tensor& a = val(n.a);
      const Tensor& b = val(n.b);
      const std::size_t m = a.rows(), k = a.cols(), cols = b.cols();
      if (nodes_[n.a].needs_grad) {
        Tensor da = Tensor::zeros({m, k});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < cols; ++j) acc += g.at(i, j) * b.at(p, j);
            da.at(i, p) = acc;
          }
        accumulate(n.a, std::move(da));
      }
      if (nodes_[n.b].needs_grad) {
        Tensor db = Tensor::zeros({k, cols});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            for (std::size_t j = 0; j < cols; ++j) db.at(p, j) += av * g.at(i, j);
          }
        accumulate(n.b, std::move(db));
      }
      break;
    }
    case Op::MatVec: {
      const Tensor& a = val(n.a);
      const Tensor& x = val(n.b);
      if (nodes_[n.a].needs_grad) accumulate(n.a, outer(g, x));
      if (nodes_[n.b].needs_grad) {
        Tensor dx = Tensor::zeros({a.cols()});
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t p = 0; p < a.cols(); ++p) dx[p] += a.at(i, p) * g[i];
        accumulate(n.b, std::move(dx));
      }
      break;
    }
    case Op::Transpose:
      accumulate(n.a, dike::transpose(g));
      break;
    case Op::Gelu: {
      Tensor dx = g;
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= n.stash[i];
      accumulate(n.a, std::move(dx));
      break;
    }
    case Op::LayerNorm: {
      const Tensor& x = val(n.a);
      const Tensor& gn = val(n.b);
      const std::size_t cols = x.rank() == 2 ? x.cols() : x.size();
      const std::size_t rows = x.rank() == 2 ? x.rows() : 1;
      Tensor dx = Tensor::zeros(x.shape());
      Tensor dgain = Tensor::zeros({cols});
      Tensor dbias = Tensor::zeros({cols});
      std::vector<double> xhat(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          xhat[j] = (xr[j] - mu) * inv;
          const double dxh = gr[j] * gn[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xhat[j];
          dgain[j] += gr[j] * xhat[j];
          dbias[j] += gr[j];
        }
        mean_dxh /= static_cast<double>(cols);
        mean_dxh_xh /= static_cast<double>(cols);
        double* dxr = dx.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) {
          const double dxh = gr[j] * gn[j];
          dxr[j] = inv * (dxh - mean_dxh - xhat[j] * mean_dxh_xh);
        }
      }
      if (nodes_[n.a].needs_grad) accumulate(n.a, std::move(dx));
      if (nodes_[n.b].needs_grad) accumulate(n.b, std::move(dgain));
      if (nodes_[n.c].needs_grad) accumulate(n.c, std::move(dbias));
      break;
    }
    case Op::CausalSoftmax: {
      const Tensor& y = n.value;
      const std::size_t t = y.rows();
      Tensor dx = Tensor::zeros({t, t});
      for (std::size_t i = 0; i < t; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j <= i; ++j) s += g.at(i, j) * y.at(i, j);
        for (std::size_t j = 0; j <= i; ++j) dx.at(i, j) = y.at(i, j) * (g.at(i, j) - s);
      }
      accumulate(n.a, std::move(dx));
      break;
    }
    case Op::CausalAttention: {
      const Tensor& qv = val(n.a);
      const Tensor& kv = val(n.b);
      const Tensor& vv = val(n.c);
      const std::size_t t = qv.rows(), d = qv.cols();
      const std::size_t heads = n.aux, hd = d / heads;
      const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
      Tensor dq = Tensor::zeros({t, d});
      Tensor dk = Tensor::zeros({t, d});
      Tensor dv = Tensor::zeros({t, d});
      std::vector<double> dprobs(t), dscores(t);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        const double* probs = n.stash.data() + h * t * t;
        for (std::size_t i = 0; i < t; ++i) {
          const double* gi = g.data() + i * d + off;
          // dP_ij = g_i . v_j ; dV_j += P_ij g_i
          for (std::size_t j = 0; j <= i; ++j) {
            const double p = probs[i * t + j];
            const double* vj = vv.data() + j * d + off;
            double* dvj = dv.data() + j * d + off;
            double acc = 0.0;
            for (std::size_t c = 0; c < hd; ++c) {
              acc += gi[c] * vj[c];
              dvj[c] += p * gi[c];
            }
            dprobs[j] = acc;
          }
          double dot_pg = 0.0;
          for (std::size_t j = 0; j <= i; ++j) dot_pg += dprobs[j] * probs[i * t + j];
          for (std::size_t j = 0; j <= i; ++j)
            dscores[j] = probs[i * t + j] * (dprobs[j] - dot_pg) * inv_scale;
          double* dqi = dq.data() + i * d + off;
          const double* qi = qv.data() + i * d + off;
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = dscores[j];
            const double* kj = kv.data() + j * d + off;
            double* dkj = dk.data() + j * d + off;
            for (std::size_t c = 0; c < hd; ++c) {
              dqi[c] += ds * kj[c];
              dkj[c] += ds * qi[c];
            }
          }
        }
      }
      if (nodes_[n.a].needs_grad) accumulate(n.a, std::move(dq));
      if (nodes_[n.b].needs_grad) accumulate(n.b, std::move(dk));
      if (nodes_[n.c].needs_grad) accumulate(n.c, std::move(dv));
      break;
    }
    case Op::GatherRows: {
      const Tensor& table = val(n.a);
      Tensor dt = Tensor::zeros(table.shape());
      for (std::size_t r = 0; r < n.list.size(); ++r)
        for (std::size_t j = 0; j < table.cols(); ++j) dt.at(n.list[r], j) += g.at(r, j);
      accumulate(n.a, std::move(dt));
      break;
    }
    case Op::PickRow: {
      const Tensor& m = val(n.a);
      Tensor dm = Tensor::zeros(m.shape());
      for (std::size_t j = 0; j < m.cols(); ++j) dm.at(n.aux, j) = g[j];
      accumulate(n.a, std::move(dm));
      break;
    }
    case Op::ReplaceRow: {
      if (nodes_[n.a].needs_grad) {
        Tensor dm = g;
        for (std::size_t j = 0; j < dm.cols(); ++j) dm.at(n.aux, j) = 0.0;
        accumulate(n.a, std::move(dm));
      }
      if (nodes_[n.b].needs_grad) {
        Tensor dv = Tensor::zeros({g.cols()});
        for (std::size_t j = 0; j < g.cols(); ++j) dv[j] = g.at(n.aux, j);
        accumulate(n.b, std::move(dv));
      }
      break;
    }
    case Op::SliceCols: {
      const Tensor& m = val(n.a);
      Tensor dm = Tensor::zeros(m.shape());
      const std::uint32_t c0 = n.list[0], c1 = n.list[1];
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = c0; j < c1; ++j) dm.at(i, j) = g.at(i, j - c0);
      accumulate(n.a, std::move(dm));
      break;
    }
    case Op::ConcatCols: {
      std::size_t off = 0;
      for (NodeId p : n.list) {
        const Tensor& src = val(p);
        if (nodes_[p].needs_grad) {
          Tensor dp = Tensor::zeros(src.shape());
          for (std::size_t i = 0; i < src.rows(); ++i)
            for (std::size_t j = 0; j < src.cols(); ++j) dp.at(i, j) = g.at(i, off + j);
          accumulate(p, std::move(dp));
        }
        off += src.cols();
      }
      break;
    }
    case Op::CrossEntropyVec: {
      const Tensor& l = val(n.a);
      Tensor dl = softmax_vec(l);
      dl[n.aux] -= 1.0;
      accumulate(n.a, dike::scale(dl, g.item()));
      break;
    }
    case Op::CrossEntropyRows: {
      const Tensor& l = val(n.a);
      Tensor dl = Tensor::zeros(l.shape());
      for (std::size_t i = 0; i < n.list.size(); ++i) {
        const std::size_t r = n.aux + i;
        double m = l.at(r, 0);
        for (std::size_t j = 1; j < l.cols(); ++j) m = std::max(m, l.at(r, j));
        double z = 0.0;
        for (std::size_t j = 0; j < l.cols(); ++j) z += std::exp(l.at(r, j) - m);
        for (std::size_t j = 0; j < l.cols(); ++j)
          dl.at(r, j) = g.item() * std::exp(l.at(r, j) - m) / z;
        dl.at(r, n.list[i]) -= g.item();
      }
      accumulate(n.a, std::move(dl));
      break;
    }
    case Op::Cosine: {
      const Tensor& a = val(n.a);
      const Tensor& b = val(n.b);
      const double na = norm2(a), nb = norm2(b);
      const double c = n.value.item();
      const double gs = g.item();
      if (nodes_[n.a].needs_grad) {
        Tensor da = Tensor::zeros(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i)
          da[i] = gs * (b[i] / (na * nb) - c * a[i] / (na * na));
        accumulate(n.a, std::move(da));
      }
      if (nodes_[n.b].needs_grad) {
        Tensor db = Tensor::zeros(b.shape());
        for (std::size_t i = 0; i < b.size(); ++i)
          db[i] = gs * (a[i] / (na * nb) - c * b[i] / (nb * nb));
        accumulate(n.b, std::move(db));
      }
      break;
    }
    case Op::SumSquares: {
      accumulate(n.a, dike::scale(val(n.a), 2.0 * g.item()));
      break;
    }
    case Op::SqrtScalar: {
      // Subgradient 0 at the origin keeps perfect reconstructions finite.
      const double y = n.value.item();
      if (y > 0.0) accumulate(n.a, Tensor::scalar(0.5 * g.item() / y));
      break;
    }
    case Op::LogSumExp: {
      const double m = n.scalar;
      double z = 0.0;
      for (NodeId id : n.list) z += std::exp(val(id).item() - m);
      for (NodeId id : n.list) {
        if (!nodes_[id].needs_grad) continue;
        accumulate(id, Tensor::scalar(g.item() * std::exp(val(id).item() - m) / z));
      }
      break;
    }
  }
}

Tensor Tape::grad(NodeId id) const {
  const Node& n = nodes_[id];
  if (n.has_grad) return n.grad;
  return Tensor::zeros(n.value.shape());
}

void Tape::reset() { nodes_.clear(); }

void Tape::truncate(std::size_t keep) {
  if (keep < nodes_.size()) nodes_.resize(keep);
}

}  // namespace dike::ad
