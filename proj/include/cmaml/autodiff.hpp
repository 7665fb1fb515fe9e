#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "cmaml/tensor.hpp"

namespace cmaml {

// Tape-based reverse-mode autodiff. Backward rules are themselves written in
// graph ops, so a gradient computed with create_graph=true is an ordinary
// differentiable node and can be differentiated again.

enum class Op : std::uint8_t {
  leaf,
  add,
  mul,
  matmul,
  relu,
  exp,
  log,
  sqrt,
  sum,
  mean,
  softmax_cross_entropy,
  clamp_floor,
  variance,
  scale,
  // Structural helpers needed to express backward rules and Jacobian assembly
  // without general broadcasting.
  reciprocal,
  softmax,
  reshape,
  transpose,
  concat,
  slice,
  custom,
};

std::string_view op_name(Op op);

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(NodeId, NodeId) = default;
};

class Graph;

// Extension point for ops whose forward value is computed outside the graph
// (e.g. an eigensolver). backward() must build its result from graph ops.
class CustomOp {
 public:
  virtual ~CustomOp() = default;
  virtual std::string_view name() const = 0;
  virtual std::vector<NodeId> backward(Graph& graph, NodeId self, NodeId upstream) const = 0;
};

struct OpAttrs {
  double scalar = 0.0;               // scale factor or clamp floor
  std::vector<std::size_t> ints;     // labels, target shape, or {offset, length}
  std::shared_ptr<const CustomOp> custom;
};

struct Node {
  Tensor value;
  Op op = Op::leaf;
  std::vector<NodeId> parents;
  OpAttrs attrs;
  bool requires_grad = false;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  NodeId leaf(Tensor value, bool differentiable = false);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  NodeId apply(Op op, std::span<const NodeId> inputs, OpAttrs attrs = {});
  NodeId apply(Op op, std::initializer_list<NodeId> inputs, OpAttrs attrs = {}) {
    return apply(op, std::span<const NodeId>(inputs.begin(), inputs.size()), std::move(attrs));
  }

  // Records a custom-op node whose forward value has already been computed.
  NodeId record_custom(std::shared_ptr<const CustomOp> rule, std::span<const NodeId> inputs,
                       Tensor value);

  // d(output)/d(wrt[i]) for a scalar output. Targets the output does not depend
  // on get a zero tensor. Without create_graph the results are constants.
  std::vector<NodeId> gradient(NodeId output, std::span<const NodeId> wrt, bool create_graph);

  NodeId add(NodeId a, NodeId b) { return apply(Op::add, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }
  NodeId mul(NodeId a, NodeId b) { return apply(Op::mul, {a, b}); }
  NodeId matmul(NodeId a, NodeId b) { return apply(Op::matmul, {a, b}); }
  NodeId relu(NodeId x) { return apply(Op::relu, {x}); }
  NodeId exp(NodeId x) { return apply(Op::exp, {x}); }
  NodeId log(NodeId x) { return apply(Op::log, {x}); }
  NodeId sqrt(NodeId x) { return apply(Op::sqrt, {x}); }
  NodeId sum(NodeId x) { return apply(Op::sum, {x}); }
  NodeId mean(NodeId x) { return apply(Op::mean, {x}); }
  NodeId variance(NodeId x) { return apply(Op::variance, {x}); }
  NodeId reciprocal(NodeId x) { return apply(Op::reciprocal, {x}); }
  NodeId softmax(NodeId x) { return apply(Op::softmax, {x}); }
  NodeId transpose(NodeId x) { return apply(Op::transpose, {x}); }
  NodeId scale(NodeId x, double factor);
  NodeId clamp_floor(NodeId x, double floor);
  NodeId softmax_cross_entropy(NodeId logits, std::span<const std::size_t> labels);
  NodeId reshape(NodeId x, Shape shape);
  NodeId concat(std::span<const NodeId> parts);
  NodeId slice(NodeId x, std::size_t offset, std::size_t length);
  // Flattens to rank 1.
  NodeId flatten(NodeId x) { return reshape(x, Shape{node(x).value.size()}); }

  // References returned here are invalidated by any call that appends a node.
  const Node& node(NodeId id) const { return nodes_[id.index]; }
  const Tensor& value(NodeId id) const { return nodes_[id.index].value; }
  bool requires_grad(NodeId id) const { return nodes_[id.index].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  NodeId push(Node node);
  std::vector<NodeId> backward_rule(NodeId id, NodeId upstream, std::span<const bool> needed);
  NodeId reduce_to(NodeId grad, Shape shape);

  std::vector<Node> nodes_;
  // Backward passes without create_graph emit constants only.
  bool recording_ = true;
};

}  // namespace cmaml
