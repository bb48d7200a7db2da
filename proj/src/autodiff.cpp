#include "fpb/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace fpb::ad {

namespace {
void require_2d(const Tensor& t, const char* who) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(std::string(who) + ": expects 2-D value, got " +
                                shape_str(t.shape()));
  }
}
}  // namespace

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Graph::Node& Graph::at(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }

void Graph::check_id(NodeId id, const char* who) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw std::invalid_argument(std::string(who) + ": node id " + std::to_string(id) +
                                " out of range");
  }
}

const Tensor& Graph::value(NodeId id) const {
  check_id(id, "value");
  return at(id).val;
}

const std::string& Graph::name(NodeId id) const {
  check_id(id, "name");
  return at(id).name;
}

bool Graph::requires_grad(NodeId id) const {
  check_id(id, "requires_grad");
  return at(id).requires_grad;
}

void Graph::truncate(std::size_t n) {
  if (n > nodes_.size()) throw std::invalid_argument("truncate: size grows the graph");
  nodes_.resize(n);
}

NodeId Graph::leaf(Tensor value, bool requires_grad, std::string name) {
  Node n;
  n.op = Op::Leaf;
  n.val = std::move(value);
  n.requires_grad = requires_grad;
  n.name = std::move(name);
  return push(std::move(n));
}

#define FPB_BINARY_SAME_SHAPE(NAME, OPK, EXPR)                                        \
  NodeId Graph::NAME(NodeId a, NodeId b) {                                           \
    check_id(a, #NAME);                                                              \
    check_id(b, #NAME);                                                              \
    const Tensor& x = at(a).val;                                                     \
    const Tensor& y = at(b).val;                                                     \
    if (!x.same_shape(y))                                                            \
      throw std::invalid_argument(#NAME ": shape mismatch " + shape_str(x.shape()) + \
                                  " vs " + shape_str(y.shape()));                    \
    Node n;                                                                          \
    n.op = OPK;                                                                      \
    n.a = a;                                                                         \
    n.b = b;                                                                         \
    Tensor out(x.shape());                                                           \
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (EXPR);                      \
    n.val = std::move(out);                                                          \
    return push(std::move(n));                                                       \
  }

FPB_BINARY_SAME_SHAPE(add, Op::Add, x[i] + y[i])
FPB_BINARY_SAME_SHAPE(sub, Op::Sub, x[i] - y[i])
FPB_BINARY_SAME_SHAPE(mul, Op::Mul, x[i] * y[i])
FPB_BINARY_SAME_SHAPE(div, Op::Div, x[i] / y[i])
#undef FPB_BINARY_SAME_SHAPE

NodeId Graph::scale(NodeId a, double c) {
  check_id(a, "scale");
  Node n;
  n.op = Op::Scale;
  n.a = a;
  n.alpha = c;
  n.val = fpb::scale(at(a).val, c);
  return push(std::move(n));
}

NodeId Graph::leaky_relu(NodeId a, double alpha) {
  check_id(a, "leaky_relu");
  Node n;
  n.op = Op::LeakyRelu;
  n.a = a;
  n.alpha = alpha;
  const Tensor& x = at(a).val;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= 0 ? x[i] : alpha * x[i];
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::leaky_relu_slope(NodeId a, double alpha) {
  check_id(a, "leaky_relu_slope");
  Node n;
  n.op = Op::LeakyReluSlope;
  n.a = a;
  n.alpha = alpha;
  const Tensor& x = at(a).val;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= 0 ? 1.0 : alpha;
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::exp(NodeId a) {
  check_id(a, "exp");
  Node n;
  n.op = Op::Exp;
  n.a = a;
  const Tensor& x = at(a).val;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::log(NodeId a) {
  check_id(a, "log");
  Node n;
  n.op = Op::Log;
  n.a = a;
  const Tensor& x = at(a).val;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::abs(NodeId a) {
  check_id(a, "abs");
  Node n;
  n.op = Op::Abs;
  n.a = a;
  const Tensor& x = at(a).val;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::fabs(x[i]);
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::sign(NodeId a) {
  check_id(a, "sign");
  Node n;
  n.op = Op::Sign;
  n.a = a;
  const Tensor& x = at(a).val;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0);
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  check_id(a, "matmul");
  check_id(b, "matmul");
  Node n;
  n.op = Op::MatMul;
  n.a = a;
  n.b = b;
  n.val = fpb::matmul(at(a).val, at(b).val);
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  check_id(a, "transpose");
  Node n;
  n.op = Op::Transpose;
  n.a = a;
  n.val = transpose2d(at(a).val);
  return push(std::move(n));
}

NodeId Graph::sum_all(NodeId a) {
  check_id(a, "sum_all");
  Node n;
  n.op = Op::SumAll;
  n.a = a;
  n.aux = at(a).val.shape();
  const Tensor& x = at(a).val;
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  n.val = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId Graph::row_sum(NodeId a) {
  check_id(a, "row_sum");
  const Tensor& x = at(a).val;
  require_2d(x, "row_sum");
  Node n;
  n.op = Op::RowSum;
  n.a = a;
  Tensor out({x.rows(), 1});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += x.at(i, j);
    out[i] = s;
  }
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::col_sum(NodeId a) {
  check_id(a, "col_sum");
  const Tensor& x = at(a).val;
  require_2d(x, "col_sum");
  Node n;
  n.op = Op::ColSum;
  n.a = a;
  Tensor out({1, x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x.at(i, j);
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::row_max(NodeId a) {
  check_id(a, "row_max");
  const Tensor& x = at(a).val;
  require_2d(x, "row_max");
  if (x.cols() == 0) throw std::invalid_argument("row_max: empty rows");
  Node n;
  n.op = Op::RowMax;
  n.a = a;
  Tensor out({x.rows(), 1});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double m = x.at(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) m = std::max(m, x.at(i, j));
    out[i] = m;
  }
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::broadcast_col(NodeId a, std::size_t ncols) {
  check_id(a, "broadcast_col");
  const Tensor& x = at(a).val;
  require_2d(x, "broadcast_col");
  if (x.cols() != 1) throw std::invalid_argument("broadcast_col: expects [m,1] input");
  Node n;
  n.op = Op::BroadcastCol;
  n.a = a;
  Tensor out({x.rows(), ncols});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < ncols; ++j) out.at(i, j) = x[i];
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::broadcast_row(NodeId a, std::size_t nrows) {
  check_id(a, "broadcast_row");
  const Tensor& x = at(a).val;
  require_2d(x, "broadcast_row");
  if (x.rows() != 1) throw std::invalid_argument("broadcast_row: expects [1,n] input");
  Node n;
  n.op = Op::BroadcastRow;
  n.a = a;
  Tensor out({nrows, x.cols()});
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x[j];
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::broadcast_scalar(NodeId a, Shape shape) {
  check_id(a, "broadcast_scalar");
  const Tensor& x = at(a).val;
  if (x.size() != 1) throw std::invalid_argument("broadcast_scalar: expects scalar input");
  Node n;
  n.op = Op::BroadcastScalar;
  n.a = a;
  n.val = Tensor::full(std::move(shape), x[0]);
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, Shape shape) {
  check_id(a, "reshape");
  Node n;
  n.op = Op::Reshape;
  n.a = a;
  n.aux = at(a).val.shape();
  n.val = at(a).val.reshaped(std::move(shape));
  return push(std::move(n));
}

NodeId Graph::gather(NodeId a, IndexTable table, Shape out_shape) {
  check_id(a, "gather");
  if (!table) throw std::invalid_argument("gather: null index table");
  const Tensor& x = at(a).val;
  if (table->size() != shape_numel(out_shape)) {
    throw std::invalid_argument("gather: table size does not match output shape");
  }
  Node n;
  n.op = Op::Gather;
  n.a = a;
  n.table = table;
  n.aux = x.shape();
  Tensor out(std::move(out_shape));
  const auto& t = *table;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::int64_t src = t[i];
    out[i] = src >= 0 ? x[static_cast<std::size_t>(src)] : 0.0;
  }
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::scatter(NodeId a, IndexTable table, Shape out_shape) {
  check_id(a, "scatter");
  if (!table) throw std::invalid_argument("scatter: null index table");
  const Tensor& x = at(a).val;
  if (table->size() != x.size()) {
    throw std::invalid_argument("scatter: table size does not match input size");
  }
  Node n;
  n.op = Op::Scatter;
  n.a = a;
  n.table = table;
  n.aux = x.shape();
  Tensor out(std::move(out_shape));
  const auto& t = *table;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::int64_t dst = t[i];
    if (dst >= 0) out[static_cast<std::size_t>(dst)] += x[i];
  }
  n.val = std::move(out);
  return push(std::move(n));
}

NodeId Graph::zeros_like(NodeId ref) { return constant(Tensor(at(ref).val.shape())); }

std::vector<NodeId> Graph::backward(NodeId loss, const std::vector<NodeId>& wrt) {
  check_id(loss, "backward");
  for (NodeId w : wrt) check_id(w, "backward");
  if (at(loss).val.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(at(loss).val.shape()));
  }

  // Upward reachability from the loss, so we can report disconnected wrt
  // nodes instead of silently returning zeros for them.
  std::vector<char> reach(static_cast<std::size_t>(loss) + 1, 0);
  {
    std::vector<NodeId> stack{loss};
    reach[static_cast<std::size_t>(loss)] = 1;
    while (!stack.empty()) {
      const Node& n = at(stack.back());
      stack.pop_back();
      for (NodeId in : {n.a, n.b}) {
        if (in >= 0 && !reach[static_cast<std::size_t>(in)]) {
          reach[static_cast<std::size_t>(in)] = 1;
          stack.push_back(in);
        }
      }
    }
  }
  for (NodeId w : wrt) {
    if (w > loss || !reach[static_cast<std::size_t>(w)]) {
      throw std::invalid_argument("backward: node '" + (at(w).name.empty()
                                      ? std::string("#") + std::to_string(w)
                                      : at(w).name) +
                                  "' does not contribute to the loss");
    }
  }

  // grads[i] is the NodeId of dLoss/dNode_i, or -1 if no path delivered one.
  std::vector<NodeId> grads(static_cast<std::size_t>(loss) + 1, -1);
  grads[static_cast<std::size_t>(loss)] = constant(Tensor::scalar(1.0));

  auto accum = [&](NodeId target, NodeId g) {
    if (target < 0 || g < 0) return;
    NodeId& slot = grads[static_cast<std::size_t>(target)];
    slot = slot < 0 ? g : add(slot, g);
  };

  for (NodeId id = loss; id >= 0; --id) {
    if (!reach[static_cast<std::size_t>(id)]) continue;
    const NodeId g = grads[static_cast<std::size_t>(id)];
    if (g < 0) continue;
    // Copy the fields used below: pushing gradient nodes may reallocate.
    const Op op = at(id).op;
    const NodeId a = at(id).a, b = at(id).b;
    const double alpha = at(id).alpha;
    const IndexTable table = at(id).table;
    const Shape aux = at(id).aux;
    switch (op) {
      case Op::Leaf:
        break;
      case Op::Add:
        accum(a, g);
        accum(b, g);
        break;
      case Op::Sub:
        accum(a, g);
        accum(b, scale(g, -1.0));
        break;
      case Op::Mul:
        accum(a, mul(g, b));
        accum(b, mul(g, a));
        break;
      case Op::Div: {
        accum(a, div(g, b));
        // d/db (a/b) = -a / b^2
        accum(b, scale(div(mul(g, a), mul(b, b)), -1.0));
        break;
      }
      case Op::Scale:
        accum(a, scale(g, alpha));
        break;
      case Op::LeakyRelu:
        accum(a, mul(g, leaky_relu_slope(a, alpha)));
        break;
      case Op::Exp:
        accum(a, mul(g, id));  // reuse the computed exp value
        break;
      case Op::Log:
        accum(a, div(g, a));
        break;
      case Op::Abs:
        accum(a, mul(g, sign(a)));
        break;
      case Op::LeakyReluSlope:
      case Op::Sign:
      case Op::RowMax:
        break;  // piecewise constant: zero derivative almost everywhere
      case Op::MatMul:
        accum(a, matmul(g, transpose(b)));
        accum(b, matmul(transpose(a), g));
        break;
      case Op::Transpose:
        accum(a, transpose(g));
        break;
      case Op::SumAll:
        accum(a, broadcast_scalar(g, aux));
        break;
      case Op::RowSum:
        accum(a, broadcast_col(g, at(a).val.cols()));
        break;
      case Op::ColSum:
        accum(a, broadcast_row(g, at(a).val.rows()));
        break;
      case Op::BroadcastCol:
        accum(a, row_sum(g));
        break;
      case Op::BroadcastRow:
        accum(a, col_sum(g));
        break;
      case Op::BroadcastScalar:
        accum(a, sum_all(g));
        break;
      case Op::Reshape:
        accum(a, reshape(g, aux));
        break;
      case Op::Gather:
        accum(a, scatter(g, table, aux));
        break;
      case Op::Scatter:
        accum(a, gather(g, table, aux));
        break;
    }
  }

  std::vector<NodeId> out;
  out.reserve(wrt.size());
  for (NodeId w : wrt) {
    NodeId g = grads[static_cast<std::size_t>(w)];
    out.push_back(g >= 0 ? g : zeros_like(w));
  }
  return out;
}

std::vector<Tensor> Graph::grad(NodeId loss, const std::vector<NodeId>& wrt) {
  const std::size_t mark = size();
  std::vector<NodeId> gnodes = backward(loss, wrt);
  std::vector<Tensor> out;
  out.reserve(gnodes.size());
  for (NodeId g : gnodes) out.push_back(value(g));
  truncate(mark);
  return out;
}

}  // namespace fpb::ad
