#pragma once

#include <cstdint>
#include <vector>

#include "dike/tensor.hpp"

namespace dike::ad {

using NodeId = std::uint32_t;

/// Reverse-mode tape over a closed set of primitives: exactly what the toy
/// language model, the disentangler losses, and the residual-shift
/// optimization need. Nodes are appended in evaluation order, so reverse
/// index order is a reverse topological order and the backward pass visits
/// each node exactly once.
class Tape {
 public:
  /// Constant leaf; gradients do not flow into it.
  NodeId input(Tensor value);
  /// Differentiable leaf.
  NodeId param(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId add_rowvec(NodeId mat, NodeId row);              // (m,n) + (n)
  NodeId matmul(NodeId a, NodeId b);                      // (m,k)x(k,n)
  NodeId matvec(NodeId a, NodeId x);                      // (m,k)x(k)
  NodeId transpose(NodeId a);
  NodeId gelu(NodeId a);                                  // x * Phi(x), exact CDF
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);  // per row, eps = 1e-5
  NodeId causal_softmax(NodeId scores);                   // (t,t), row i over cols 0..i
  /// Multi-head causal attention over already-projected (t,d) q/k/v: per head,
  /// softmax(q_h k_h^T / sqrt(d_h)) v_h, heads concatenated back to (t,d).
  NodeId causal_attention(NodeId q, NodeId k, NodeId v, std::uint32_t heads);
  NodeId gather_rows(NodeId table, std::vector<std::uint32_t> ids);
  NodeId pick_row(NodeId mat, std::uint32_t row);         // -> rank-1
  NodeId replace_row(NodeId mat, NodeId vec, std::uint32_t row);
  NodeId slice_cols(NodeId mat, std::uint32_t c0, std::uint32_t c1);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId cross_entropy(NodeId logits, std::uint32_t target);  // rank-1 logits -> scalar
  /// Sum over i of -log softmax(logits[first_row + i])[targets[i]].
  NodeId cross_entropy_rows(NodeId logits, std::vector<std::uint32_t> targets,
                            std::uint32_t first_row);
  NodeId cosine(NodeId a, NodeId b);                      // rank-1 pair -> scalar
  NodeId sum_squares(NodeId a);                           // -> scalar
  NodeId sqrt_scalar(NodeId a);
  NodeId logsumexp(const std::vector<NodeId>& scalars);   // max-stabilized

  const Tensor& val(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].needs_grad; }

  /// Accumulates gradients of a scalar root into every differentiable node.
  void backward(NodeId root);
  /// Gradient after backward(); zeros if the node was unreachable.
  Tensor grad(NodeId id) const;

  std::size_t node_count() const { return nodes_.size(); }
  void reset();
  /// Drops every node past `keep`; lets long-lived constant prefixes (model
  /// parameters) be reused across many forward passes.
  void truncate(std::size_t keep);

 private:
  enum class Op : std::uint8_t {
    Leaf, Add, Sub, Scale, AddRowVec, MatMul, MatVec, Transpose, Gelu,
    LayerNorm, CausalSoftmax, CausalAttention, GatherRows, PickRow, ReplaceRow,
    SliceCols, ConcatCols, CrossEntropyVec, CrossEntropyRows, Cosine,
    SumSquares, SqrtScalar, LogSumExp,
  };

  struct Node {
    Op op = Op::Leaf;
    Tensor value;
    Tensor grad;
    Tensor stash;  // op-specific cache (attention probabilities)
    NodeId a = 0, b = 0, c = 0;
    std::vector<std::uint32_t> list;  // variadic inputs or per-op integer data
    double scalar = 0.0;
    std::uint32_t aux = 0;
    bool needs_grad = false;
    bool has_grad = false;
  };

  NodeId push(Node node);
  void accumulate(NodeId id, const Tensor& g);
  void accumulate(NodeId id, Tensor&& g);
  void add_into(Tensor& dst, const Tensor& g);
  void backward_node(Node& n);

  std::vector<Node> nodes_;
};

constexpr double kLayerNormEps = 1e-5;

}  // namespace dike::ad
