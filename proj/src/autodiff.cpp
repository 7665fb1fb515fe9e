#include "cmaml/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cmaml/error.hpp"

namespace cmaml {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::relu: return "relu";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sqrt: return "sqrt";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::softmax_cross_entropy: return "softmax-cross-entropy";
    case Op::clamp_floor: return "clamp-floor";
    case Op::variance: return "variance";
    case Op::scale: return "scale";
    case Op::reciprocal: return "reciprocal";
    case Op::softmax: return "softmax";
    case Op::reshape: return "reshape";
    case Op::transpose: return "transpose";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::custom: return "custom";
  }
  return "unknown";
}

namespace {

std::string describe(Op op) { return std::string(op_name(op)); }

[[noreturn]] void shape_mismatch(Op op, const Shape& a, const Shape& b) {
  throw ShapeError(describe(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void expect_arity(Op op, std::size_t got, std::size_t want) {
  if (got != want) {
    throw ShapeError(describe(op) + ": expected " + std::to_string(want) + " inputs, got " +
                     std::to_string(got));
  }
}

const Shape& broadcast_shape(Op op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.is_scalar()) return a.shape();
  if (a.is_scalar()) return b.shape();
  shape_mismatch(op, a.shape(), b.shape());
}

template <typename F>
Tensor binary(Op op, const Tensor& a, const Tensor& b, F f) {
  const Shape& shape = broadcast_shape(op, a, b);
  Tensor out(shape);
  const std::size_t n = out.size();
  const bool sa = a.size() == 1 && n != 1;
  const bool sb = b.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = f(a[sa ? 0 : i], b[sb ? 0 : i]);
  return out;
}

template <typename F>
Tensor unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

Tensor softmax_rows(const Tensor& z) {
  const std::size_t rows = z.rows(), cols = z.cols();
  Tensor out(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) m = std::max(m, z.at(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out.at(r, c) = std::exp(z.at(r, c) - m);
      s += out.at(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) /= s;
  }
  return out;
}

Tensor forward(Op op, std::span<const Tensor* const> in, const OpAttrs& attrs) {
  switch (op) {
    case Op::add:
      expect_arity(op, in.size(), 2);
      return binary(op, *in[0], *in[1], [](double a, double b) { return a + b; });
    case Op::mul:
      expect_arity(op, in.size(), 2);
      return binary(op, *in[0], *in[1], [](double a, double b) { return a * b; });
    case Op::matmul: {
      expect_arity(op, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) shape_mismatch(op, a.shape(), b.shape());
      return cmaml::matmul(a, b);
    }
    case Op::relu:
      expect_arity(op, in.size(), 1);
      return unary(*in[0], [](double v) { return v > 0.0 ? v : 0.0; });
    case Op::exp:
      expect_arity(op, in.size(), 1);
      return unary(*in[0], [](double v) { return std::exp(v); });
    case Op::log:
      expect_arity(op, in.size(), 1);
      for (double v : in[0]->data()) {
        if (!(v > 0.0)) throw NumericError("log: domain error, input " + std::to_string(v) + " <= 0");
      }
      return unary(*in[0], [](double v) { return std::log(v); });
    case Op::sqrt:
      expect_arity(op, in.size(), 1);
      for (double v : in[0]->data()) {
        if (v < 0.0) throw NumericError("sqrt: domain error, input " + std::to_string(v) + " < 0");
      }
      return unary(*in[0], [](double v) { return std::sqrt(v); });
    case Op::reciprocal:
      expect_arity(op, in.size(), 1);
      return unary(*in[0], [](double v) { return 1.0 / v; });
    case Op::scale: {
      expect_arity(op, in.size(), 1);
      const double c = attrs.scalar;
      return unary(*in[0], [c](double v) { return c * v; });
    }
    case Op::clamp_floor: {
      expect_arity(op, in.size(), 1);
      const double f = attrs.scalar;
      return unary(*in[0], [f](double v) { return v > f ? v : f; });
    }
    case Op::sum: {
      expect_arity(op, in.size(), 1);
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      return Tensor::scalar(s);
    }
    case Op::mean: {
      expect_arity(op, in.size(), 1);
      if (in[0]->size() == 0) throw ShapeError("mean: empty input");
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      return Tensor::scalar(s / static_cast<double>(in[0]->size()));
    }
    case Op::variance: {
      expect_arity(op, in.size(), 1);
      const auto d = in[0]->data();
      if (d.empty()) throw ShapeError("variance: empty input");
      double m = 0.0;
      for (double v : d) m += v;
      m /= static_cast<double>(d.size());
      double s = 0.0;
      for (double v : d) s += (v - m) * (v - m);
      return Tensor::scalar(s / static_cast<double>(d.size()));
    }
    case Op::softmax:
      expect_arity(op, in.size(), 1);
      if (in[0]->rank() != 2) throw ShapeError("softmax: expected [B,C], got " + to_string(in[0]->shape()));
      return softmax_rows(*in[0]);
    case Op::softmax_cross_entropy: {
      expect_arity(op, in.size(), 1);
      const Tensor& z = *in[0];
      if (z.rank() != 2) throw ShapeError("softmax-cross-entropy: expected [B,C] logits, got " + to_string(z.shape()));
      const std::size_t rows = z.rows(), cols = z.cols();
      if (attrs.ints.size() != rows) {
        throw ShapeError("softmax-cross-entropy: " + std::to_string(attrs.ints.size()) + " labels for " +
                         std::to_string(rows) + " rows");
      }
      Tensor out(Shape{rows});
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t y = attrs.ints[r];
        if (y >= cols) {
          throw ShapeError("softmax-cross-entropy: label " + std::to_string(y) + " out of range for " +
                           std::to_string(cols) + " classes");
        }
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) m = std::max(m, z.at(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += std::exp(z.at(r, c) - m);
        out[r] = m + std::log(s) - z.at(r, y);
      }
      return out;
    }
    case Op::reshape: {
      expect_arity(op, in.size(), 1);
      return in[0]->reshaped(attrs.ints);
    }
    case Op::transpose:
      expect_arity(op, in.size(), 1);
      if (in[0]->rank() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(in[0]->shape()));
      return cmaml::transpose(*in[0]);
    case Op::concat: {
      if (in.empty()) throw ShapeError("concat: no inputs");
      const Shape& first = in[0]->shape();
      if (first.empty()) throw ShapeError("concat: scalar inputs are not concatenable");
      Shape out_shape = first;
      out_shape[0] = 0;
      std::vector<double> data;
      for (const Tensor* t : in) {
        if (t->rank() != first.size() || !std::equal(first.begin() + 1, first.end(), t->shape().begin() + 1)) {
          shape_mismatch(op, first, t->shape());
        }
        out_shape[0] += t->shape()[0];
        data.insert(data.end(), t->data().begin(), t->data().end());
      }
      return Tensor(std::move(out_shape), std::move(data));
    }
    case Op::slice: {
      expect_arity(op, in.size(), 1);
      const Tensor& x = *in[0];
      if (x.rank() == 0 || attrs.ints.size() != 2) throw ShapeError("slice: needs rank >= 1 and {offset,length}");
      const std::size_t offset = attrs.ints[0], length = attrs.ints[1];
      if (offset + length > x.shape()[0]) {
        throw ShapeError("slice: rows [" + std::to_string(offset) + "," + std::to_string(offset + length) +
                         ") exceed " + to_string(x.shape()));
      }
      const std::size_t stride = x.shape()[0] ? x.size() / x.shape()[0] : 0;
      Shape shape = x.shape();
      shape[0] = length;
      return Tensor(std::move(shape), std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(offset * stride),
                                                          x.data().begin() + static_cast<std::ptrdiff_t>((offset + length) * stride)));
    }
    case Op::leaf:
    case Op::custom:
      break;
  }
  throw ShapeError("apply: op " + describe(op) + " cannot be applied directly");
}

}  // namespace

NodeId Graph::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) throw NumericError("graph: node limit reached");
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::leaf(Tensor value, bool differentiable) {
  if (!value.all_finite()) throw NumericError("leaf: non-finite value");
  Node n;
  n.value = std::move(value);
  n.op = Op::leaf;
  n.requires_grad = differentiable;
  return push(std::move(n));
}

NodeId Graph::apply(Op op, std::span<const NodeId> inputs, OpAttrs attrs) {
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  bool rg = false;
  for (NodeId id : inputs) {
    if (id.index >= nodes_.size()) throw ShapeError(describe(op) + ": unknown input node");
    values.push_back(&nodes_[id.index].value);
    rg = rg || nodes_[id.index].requires_grad;
  }
  Tensor out = forward(op, values, attrs);
  if (!out.all_finite()) throw NumericError(describe(op) + ": produced non-finite values");
  Node n;
  n.value = std::move(out);
  n.op = op;
  n.parents.assign(inputs.begin(), inputs.end());
  n.attrs = std::move(attrs);
  n.requires_grad = rg && recording_;
  return push(std::move(n));
}

NodeId Graph::record_custom(std::shared_ptr<const CustomOp> rule, std::span<const NodeId> inputs, Tensor value) {
  if (!value.all_finite()) throw NumericError(std::string(rule->name()) + ": produced non-finite values");
  bool rg = false;
  for (NodeId id : inputs) rg = rg || nodes_.at(id.index).requires_grad;
  Node n;
  n.value = std::move(value);
  n.op = Op::custom;
  n.parents.assign(inputs.begin(), inputs.end());
  n.attrs.custom = std::move(rule);
  n.requires_grad = rg && recording_;
  return push(std::move(n));
}

NodeId Graph::scale(NodeId x, double factor) {
  OpAttrs a;
  a.scalar = factor;
  return apply(Op::scale, {x}, std::move(a));
}

NodeId Graph::clamp_floor(NodeId x, double floor) {
  OpAttrs a;
  a.scalar = floor;
  return apply(Op::clamp_floor, {x}, std::move(a));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::span<const std::size_t> labels) {
  OpAttrs a;
  a.ints.assign(labels.begin(), labels.end());
  return apply(Op::softmax_cross_entropy, {logits}, std::move(a));
}

NodeId Graph::reshape(NodeId x, Shape shape) {
  OpAttrs a;
  a.ints = std::move(shape);
  return apply(Op::reshape, {x}, std::move(a));
}

NodeId Graph::concat(std::span<const NodeId> parts) { return apply(Op::concat, parts); }

NodeId Graph::slice(NodeId x, std::size_t offset, std::size_t length) {
  OpAttrs a;
  a.ints = {offset, length};
  return apply(Op::slice, {x}, std::move(a));
}

NodeId Graph::reduce_to(NodeId grad, Shape shape) {
  if (value(grad).shape() == shape) return grad;
  return reshape(sum(grad), std::move(shape));
}

namespace {

Tensor step_mask(const Tensor& x, double threshold) {
  return unary(x, [threshold](double v) { return v > threshold ? 1.0 : 0.0; });
}

}  // namespace

// Builds the parent gradients of node `id` given its upstream gradient. Only the
// parents flagged in `needed` get a valid result.
std::vector<NodeId> Graph::backward_rule(NodeId id, NodeId g, std::span<const bool> needed) {
  // Copy what we need: push() may reallocate nodes_.
  const Op op = nodes_[id.index].op;
  const std::vector<NodeId> p = nodes_[id.index].parents;
  const OpAttrs attrs = nodes_[id.index].attrs;
  std::vector<NodeId> out(p.size());

  switch (op) {
    case Op::add:
      for (std::size_t k = 0; k < 2; ++k)
        if (needed[k]) out[k] = reduce_to(g, value(p[k]).shape());
      break;
    case Op::mul:
      if (needed[0]) out[0] = reduce_to(mul(g, p[1]), value(p[0]).shape());
      if (needed[1]) out[1] = reduce_to(mul(g, p[0]), value(p[1]).shape());
      break;
    case Op::matmul:
      if (needed[0]) out[0] = matmul(g, transpose(p[1]));
      if (needed[1]) out[1] = matmul(transpose(p[0]), g);
      break;
    case Op::relu:
      out[0] = mul(g, constant(step_mask(value(p[0]), 0.0)));
      break;
    case Op::clamp_floor:
      out[0] = mul(g, constant(step_mask(value(p[0]), attrs.scalar)));
      break;
    case Op::exp:
      out[0] = mul(g, id);
      break;
    case Op::log:
      out[0] = mul(g, reciprocal(p[0]));
      break;
    case Op::sqrt:
      out[0] = mul(g, scale(reciprocal(id), 0.5));
      break;
    case Op::reciprocal:
      out[0] = scale(mul(g, mul(id, id)), -1.0);
      break;
    case Op::scale:
      out[0] = scale(g, attrs.scalar);
      break;
    case Op::sum:
      out[0] = mul(constant(Tensor(value(p[0]).shape(), 1.0)), g);
      break;
    case Op::mean: {
      const double n = static_cast<double>(value(p[0]).size());
      out[0] = scale(mul(constant(Tensor(value(p[0]).shape(), 1.0)), g), 1.0 / n);
      break;
    }
    case Op::variance: {
      const double n = static_cast<double>(value(p[0]).size());
      const NodeId centered = sub(p[0], mean(p[0]));
      out[0] = mul(scale(centered, 2.0 / n), g);
      break;
    }
    case Op::softmax: {
      const std::size_t cols = value(p[0]).cols();
      const NodeId ones_col = constant(Tensor(Shape{cols, 1}, 1.0));
      const NodeId ones_row = constant(Tensor(Shape{1, cols}, 1.0));
      const NodeId dot = matmul(mul(g, id), ones_col);
      out[0] = mul(id, sub(g, matmul(dot, ones_row)));
      break;
    }
    case Op::softmax_cross_entropy: {
      const Tensor& z = value(p[0]);
      const std::size_t rows = z.rows(), cols = z.cols();
      Tensor neg_onehot(z.shape());
      for (std::size_t r = 0; r < rows; ++r) neg_onehot.at(r, attrs.ints[r]) = -1.0;
      const NodeId probs = softmax(p[0]);
      const NodeId g_rows = matmul(reshape(g, Shape{rows, 1}), constant(Tensor(Shape{1, cols}, 1.0)));
      out[0] = mul(add(probs, constant(std::move(neg_onehot))), g_rows);
      break;
    }
    case Op::reshape:
      out[0] = reshape(g, value(p[0]).shape());
      break;
    case Op::transpose:
      out[0] = transpose(g);
      break;
    case Op::concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const std::size_t len = value(p[k]).shape()[0];
        if (needed[k]) out[k] = slice(g, offset, len);
        offset += len;
      }
      break;
    }
    case Op::slice: {
      Shape pad = value(p[0]).shape();
      const std::size_t offset = attrs.ints[0], length = attrs.ints[1];
      const std::size_t tail = pad[0] - offset - length;
      std::vector<NodeId> parts;
      if (offset) {
        pad[0] = offset;
        parts.push_back(constant(Tensor(pad)));
      }
      parts.push_back(g);
      if (tail) {
        pad[0] = tail;
        parts.push_back(constant(Tensor(pad)));
      }
      out[0] = parts.size() == 1 ? g : concat(parts);
      break;
    }
    case Op::custom:
      out = attrs.custom->backward(*this, id, g);
      if (out.size() != p.size()) throw ShapeError("custom op backward returned wrong arity");
      break;
    case Op::leaf:
      break;
  }
  return out;
}

std::vector<NodeId> Graph::gradient(NodeId output, std::span<const NodeId> wrt, bool create_graph) {
  if (output.index >= nodes_.size()) throw ShapeError("gradient: unknown output node");
  if (!value(output).is_scalar()) {
    throw ShapeError("gradient: output must be scalar, got shape " + to_string(value(output).shape()));
  }
  std::uint32_t lowest = output.index;
  for (NodeId w : wrt) {
    if (w.index >= nodes_.size()) throw ShapeError("gradient: unknown target node");
    if (!requires_grad(w)) throw ShapeError("gradient: target node is not differentiable");
    lowest = std::min(lowest, w.index);
  }

  const std::size_t n = output.index + 1;
  // Nodes that are both ancestors of the output and descendants of a target.
  std::vector<char> upstream(n, 0), downstream(n, 0);
  upstream[output.index] = requires_grad(output);
  for (std::size_t i = n; i-- > lowest;) {
    if (!upstream[i]) continue;
    for (NodeId q : nodes_[i].parents)
      if (nodes_[q.index].requires_grad) upstream[q.index] = 1;
  }
  for (NodeId w : wrt)
    if (w.index < n) downstream[w.index] = 1;
  for (std::size_t i = lowest; i < n; ++i) {
    if (downstream[i]) continue;
    for (NodeId q : nodes_[i].parents)
      if (q.index >= lowest && downstream[q.index]) {
        downstream[i] = 1;
        break;
      }
  }

  const bool saved_recording = recording_;
  recording_ = create_graph;
  std::vector<NodeId> grads(n);
  std::vector<char> has(n, 0);
  try {
    if (upstream[output.index] && downstream[output.index]) {
      grads[output.index] = constant(Tensor(value(output).shape(), 1.0));
      has[output.index] = 1;
    }
    for (std::size_t i = n; i-- > lowest;) {
      if (!has[i] || nodes_[i].op == Op::leaf) continue;
      const std::vector<NodeId> parents = nodes_[i].parents;
      // std::vector<bool> has no contiguous storage for span.
      std::unique_ptr<bool[]> needed(new bool[parents.size()]);
      bool any = false;
      for (std::size_t k = 0; k < parents.size(); ++k) {
        const std::uint32_t q = parents[k].index;
        needed[k] = q >= lowest && upstream[q] && downstream[q];
        any = any || needed[k];
      }
      if (!any) continue;
      const std::vector<NodeId> pg =
          backward_rule(NodeId{static_cast<std::uint32_t>(i)}, grads[i], std::span<const bool>(needed.get(), parents.size()));
      for (std::size_t k = 0; k < parents.size(); ++k) {
        if (!needed[k]) continue;
        const std::uint32_t q = parents[k].index;
        grads[q] = has[q] ? add(grads[q], pg[k]) : pg[k];
        has[q] = 1;
      }
    }
  } catch (...) {
    recording_ = saved_recording;
    throw;
  }
  recording_ = saved_recording;

  std::vector<NodeId> result;
  result.reserve(wrt.size());
  for (NodeId w : wrt) {
    if (w.index < n && has[w.index]) {
      // Built while not recording, so already constant when !create_graph.
      result.push_back(grads[w.index]);
    } else {
      result.push_back(constant(Tensor(value(w).shape())));
    }
  }
  return result;
}

}  // namespace cmaml
