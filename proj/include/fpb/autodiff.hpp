#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fpb/tensor.hpp"

namespace fpb::ad {

using NodeId = int;
using IndexTable = std::shared_ptr<const std::vector<std::int64_t>>;

// Reverse-mode autodiff over an append-only expression graph. Values are
// computed eagerly as nodes are created. backward() emits gradient nodes
// built from the same op vocabulary, so a gradient is itself differentiable:
// calling backward() on an expression that contains gradient nodes yields
// second-order derivatives. Ops whose local derivative is piecewise constant
// (sign, slope masks, row-max selection) propagate zero, which is the
// almost-everywhere correct second derivative.
class Graph {
 public:
  // Leaves.
  NodeId leaf(Tensor value, bool requires_grad = false, std::string name = "");
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  // Elementwise, same-shape unless noted.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId leaky_relu(NodeId a, double alpha);
  NodeId leaky_relu_slope(NodeId a, double alpha);  // d/dx leaky_relu; grad-opaque
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId abs(NodeId a);
  NodeId sign(NodeId a);  // grad-opaque

  // Linear algebra (2-D).
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);

  // Reductions and broadcasts.
  NodeId sum_all(NodeId a);                    // any shape -> [1]
  NodeId row_sum(NodeId a);                    // [m,n] -> [m,1]
  NodeId col_sum(NodeId a);                    // [m,n] -> [1,n]
  NodeId row_max(NodeId a);                    // [m,n] -> [m,1]; grad-opaque
  NodeId broadcast_col(NodeId a, std::size_t n);   // [m,1] -> [m,n]
  NodeId broadcast_row(NodeId a, std::size_t m);   // [1,n] -> [m,n]
  NodeId broadcast_scalar(NodeId a, Shape shape);  // [1] -> shape

  // Structure.
  NodeId reshape(NodeId a, Shape shape);
  // out[i] = table[i] >= 0 ? a.flat[table[i]] : 0
  NodeId gather(NodeId a, IndexTable table, Shape out_shape);
  // out.flat[table[i]] += a[i] for table[i] >= 0; table.size() == a.size()
  NodeId scatter(NodeId a, IndexTable table, Shape out_shape);

  const Tensor& value(NodeId id) const;
  const std::string& name(NodeId id) const;
  bool requires_grad(NodeId id) const;

  std::size_t size() const { return nodes_.size(); }
  // Drops all nodes with id >= n. Only safe for suffixes the caller owns.
  void truncate(std::size_t n);

  // Appends gradient nodes of a scalar `loss` with respect to each node in
  // `wrt` and returns them in the same order. Leaves the rest of the graph
  // untouched; the returned nodes are ordinary nodes and may be composed or
  // differentiated again. A wrt node that cannot reach `loss` is an error; a
  // reachable node whose every path is grad-opaque yields zeros.
  std::vector<NodeId> backward(NodeId loss, const std::vector<NodeId>& wrt);

  // Convenience wrapper: evaluates gradients, copies them out, and truncates
  // the scratch nodes so the graph is restored to its prior size.
  std::vector<Tensor> grad(NodeId loss, const std::vector<NodeId>& wrt);

 private:
  enum class Op : std::uint8_t {
    Leaf, Add, Sub, Mul, Div, Scale, LeakyRelu, LeakyReluSlope, Exp, Log, Abs,
    Sign, MatMul, Transpose, SumAll, RowSum, ColSum, RowMax, BroadcastCol,
    BroadcastRow, BroadcastScalar, Reshape, Gather, Scatter,
  };

  struct Node {
    Op op = Op::Leaf;
    NodeId a = -1, b = -1;
    double alpha = 0.0;
    Tensor val;
    IndexTable table;
    Shape aux;  // input shape for Reshape/Gather/Scatter reversal
    bool requires_grad = false;
    std::string name;
  };

  NodeId push(Node n);
  const Node& at(NodeId id) const;
  NodeId zeros_like(NodeId ref);
  void check_id(NodeId id, const char* who) const;

  std::vector<Node> nodes_;
};

}  // namespace fpb::ad
