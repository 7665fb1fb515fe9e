#pragma once

#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cmaml/autodiff.hpp"
#include "cmaml/models.hpp"

namespace cmaml::conditioning {

inline constexpr double kDefaultLossFloor = 1e-8;
inline constexpr double kDefaultEigFloor = 1e-12;

// r_i = sqrt(max(l_i, loss_floor) / |D|), so that sum_i r_i^2 is the mean
// (floored) per-sample loss.
struct ResidualVector {
  NodeId values;
  double loss_floor = kDefaultLossFloor;
  std::size_t count = 0;
};

ResidualVector residuals(Graph& graph, NodeId per_sample_losses, double loss_floor = kDefaultLossFloor);
ResidualVector residuals(Graph& graph, const models::ParamNodes& params, const Tensor& x,
                         std::span<const std::size_t> labels, double loss_floor = kDefaultLossFloor);

// Rows are d r_i / d psi, psi the concatenation of `subset` in the given order.
// Each row is one reverse pass built with create_graph, so when create_graph is
// set the Jacobian stays differentiable w.r.t. every parameter that shaped the
// residuals, not only the subset.
NodeId jacobian(Graph& graph, NodeId residual_values, std::span<const NodeId> subset, bool create_graph);

// J J^T, the |D| x |D| product whose nonzero spectrum matches the Gauss-Newton
// factor J^T J. The factor 2 of H ~ 2 J^T J is omitted.
NodeId jacobian_gram(Graph& graph, NodeId residual_values, std::span<const NodeId> subset, bool create_graph);
NodeId jacobian_gram(Graph& graph, const models::ParamNodes& params, const std::set<std::string>& subset_groups,
                     const Tensor& x, std::span<const std::size_t> labels, bool create_graph,
                     double loss_floor = kDefaultLossFloor);

// Eigenvalue nodes of J^(k) J^(k)^T for each inner step k, captured before the
// k-th update.
struct EigRecord {
  std::vector<NodeId> per_step;
  std::size_t subset_size = 0;
  std::size_t support_size = 0;
};

// Mean over steps of the population variance of log10(max(lambda, eig_floor)).
NodeId condition_loss(Graph& graph, std::span<const NodeId> per_step_eigenvalues, double eig_floor = kDefaultEigFloor);
inline NodeId condition_loss(Graph& graph, const EigRecord& record, double eig_floor = kDefaultEigFloor) {
  return condition_loss(graph, record.per_step, eig_floor);
}

}  // namespace cmaml::conditioning
