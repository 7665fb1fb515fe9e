#include "cmaml/conditioning.hpp"

#include <cmath>
#include <numbers>

#include "cmaml/error.hpp"

namespace cmaml::conditioning {

ResidualVector residuals(Graph& graph, NodeId per_sample_losses, double loss_floor) {
  const Tensor& losses = graph.value(per_sample_losses);
  if (losses.rank() != 1 || losses.size() == 0) {
    throw ShapeError("residuals: expected a non-empty loss vector, got " + to_string(losses.shape()));
  }
  if (!(loss_floor > 0.0)) throw ConfigError("residuals: loss_floor must be positive");
  const std::size_t n = losses.size();
  const NodeId floored = graph.clamp_floor(per_sample_losses, loss_floor);
  const NodeId r = graph.sqrt(graph.scale(floored, 1.0 / static_cast<double>(n)));
  return ResidualVector{r, loss_floor, n};
}

ResidualVector residuals(Graph& graph, const models::ParamNodes& params, const Tensor& x,
                         std::span<const std::size_t> labels, double loss_floor) {
  if (labels.empty()) throw ShapeError("residuals: empty support set");
  const NodeId logits = models::forward(graph, params, x);
  return residuals(graph, models::per_sample_loss(graph, logits, labels), loss_floor);
}

NodeId jacobian(Graph& graph, NodeId residual_values, std::span<const NodeId> subset, bool create_graph) {
  if (subset.empty()) throw ConfigError("jacobian: empty parameter subset");
  const std::size_t n = graph.value(residual_values).size();
  std::size_t width = 0;
  for (NodeId p : subset) width += graph.value(p).size();

  std::vector<NodeId> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor pick(graph.value(residual_values).shape());
    pick[i] = 1.0;
    const NodeId r_i = graph.sum(graph.mul(residual_values, graph.constant(std::move(pick))));
    const std::vector<NodeId> grads = graph.gradient(r_i, subset, create_graph);
    std::vector<NodeId> flat;
    flat.reserve(grads.size());
    for (NodeId g : grads) flat.push_back(graph.flatten(g));
    const NodeId row = flat.size() == 1 ? flat.front() : graph.concat(flat);
    rows.push_back(graph.reshape(row, Shape{1, width}));
  }
  return rows.size() == 1 ? rows.front() : graph.concat(rows);
}

NodeId jacobian_gram(Graph& graph, NodeId residual_values, std::span<const NodeId> subset, bool create_graph) {
  const NodeId j = jacobian(graph, residual_values, subset, create_graph);
  return graph.matmul(j, graph.transpose(j));
}

NodeId jacobian_gram(Graph& graph, const models::ParamNodes& params, const std::set<std::string>& subset_groups,
                     const Tensor& x, std::span<const std::size_t> labels, bool create_graph, double loss_floor) {
  const std::vector<std::size_t> picked = models::select_groups(params.entries, subset_groups);
  std::vector<NodeId> subset;
  subset.reserve(picked.size());
  for (std::size_t i : picked) subset.push_back(params.entries[i].node);
  const ResidualVector r = residuals(graph, params, x, labels, loss_floor);
  return jacobian_gram(graph, r.values, subset, create_graph);
}

NodeId condition_loss(Graph& graph, std::span<const NodeId> per_step_eigenvalues, double eig_floor) {
  if (per_step_eigenvalues.empty()) throw ShapeError("condition_loss: no inner steps recorded");
  if (!(eig_floor > 0.0)) throw ConfigError("condition_loss: eig_floor must be positive");
  const double inv_ln10 = 1.0 / std::numbers::ln10;
  NodeId total{};
  for (std::size_t k = 0; k < per_step_eigenvalues.size(); ++k) {
    const NodeId eig = per_step_eigenvalues[k];
    if (graph.value(eig).size() < 2) {
      throw ShapeError("condition_loss: step " + std::to_string(k) + " has fewer than 2 eigenvalues");
    }
    const NodeId log10 = graph.scale(graph.log(graph.clamp_floor(eig, eig_floor)), inv_ln10);
    const NodeId var = graph.variance(log10);
    total = k == 0 ? var : graph.add(total, var);
  }
  return graph.scale(total, 1.0 / static_cast<double>(per_step_eigenvalues.size()));
}

}  // namespace cmaml::conditioning
