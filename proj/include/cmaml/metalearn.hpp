#pragma once

#include <cstddef>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cmaml/autodiff.hpp"
#include "cmaml/conditioning.hpp"
#include "cmaml/models.hpp"
#include "cmaml/tasks.hpp"

namespace cmaml::meta {

using ForwardFn = std::function<NodeId(Graph&, const models::ParamNodes&, const Tensor&)>;

// The MLP forward; any other callable with the same contract may be used as a model.
inline NodeId mlp_forward(Graph& g, const models::ParamNodes& p, const Tensor& x) { return models::forward(g, p, x); }

enum class OuterOptimizer { sgd, adam };

struct MetaConfig {
  std::size_t inner_steps = 5;
  double alpha = 0.01;
  double beta = 0.001;
  double gamma = 1.0;
  std::size_t meta_batch = 4;
  std::set<std::string> subset_groups{models::kClassifierGroup};
  bool conditioning_enabled = true;
  bool first_order = false;
  OuterOptimizer optimizer = OuterOptimizer::sgd;
  // Global-norm cap on the summed meta-gradient; 0 disables.
  double grad_clip = 0.0;
  double loss_floor = conditioning::kDefaultLossFloor;
  double eig_floor = conditioning::kDefaultEigFloor;

  void validate() const;
};

struct InnerTrajectory {
  std::vector<models::ParamNodes> per_step_params;  // theta^(0) .. theta^(K)
  conditioning::EigRecord eig_records;              // empty when conditioning is off
  std::vector<double> per_step_support_loss;        // loss at theta^(k-1), k = 1..K
};

// K steps of theta^(k) = theta^(k-1) - alpha * grad support-loss. With
// conditioning on, the eigenvalues of J J^T at theta^(k-1) are captured before
// the k-th update. Updates are graph ops; first_order detaches the inner
// gradients.
InnerTrajectory inner_adapt(Graph& graph, const models::ParamNodes& theta_star, const tasks::Task& task,
                            const MetaConfig& cfg, const ForwardFn& forward = mlp_forward);

struct TaskLoss {
  NodeId total;
  NodeId query_loss;
  NodeId condition_loss;  // valid only when has_condition_loss
  bool has_condition_loss = false;
};

// Query cross-entropy at theta^(K) plus gamma * L_kappa.
TaskLoss task_loss(Graph& graph, const InnerTrajectory& traj, const tasks::Task& task, const MetaConfig& cfg,
                   const ForwardFn& forward = mlp_forward);

struct SubsetView {
  std::vector<std::size_t> indices;  // entry indices, in entry order
  std::size_t flat_size = 0;
};

SubsetView select_subset(const models::ParamSet& params, const std::set<std::string>& groups);
SubsetView select_subset(const Graph& graph, const models::ParamNodes& params, const std::set<std::string>& groups);

// Per-task outer gradient, evaluated on a private Graph.
struct TaskGradient {
  std::vector<Tensor> grads;  // aligned with theta_star entries
  double query_loss = 0.0;
  double condition_loss = 0.0;
  double kappa0 = 0.0;  // condition number of J J^T at theta*, subset groups
};

TaskGradient task_gradient(const models::ParamSet& theta_star, const tasks::Task& task, const MetaConfig& cfg,
                           const ForwardFn& forward = mlp_forward);

struct MetaMetrics {
  double mean_query_loss = 0.0;
  double mean_condition_loss = 0.0;
  double mean_kappa0 = 0.0;
};

class AdamState {
 public:
  explicit AdamState(double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) : b1_(b1), b2_(b2), eps_(eps) {}
  void apply(models::ParamSet& params, std::span<const Tensor> grads, double lr);

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct MetaStepResult {
  models::ParamSet params;
  MetaMetrics metrics;
};

// theta* <- theta* - beta * sum_i grad task_loss_i. Per-task work fans out over
// the worker pool; the reduction runs in task order.
MetaStepResult meta_step(const models::ParamSet& theta_star, std::span<const tasks::Task> tasks,
                         const MetaConfig& cfg, const ForwardFn& forward = mlp_forward, AdamState* adam = nullptr);

// ---- graph-free adaptation used by evaluation and tracing ----

struct StepResult {
  models::ParamSet params;
  double support_loss = 0.0;
};

// One plain SGD step on the support set, computed on a throwaway graph.
StepResult sgd_step(const models::ParamSet& params, const Tensor& x, std::span<const std::size_t> labels, double alpha,
                    const ForwardFn& forward = mlp_forward);

double accuracy(const models::ParamSet& params, const Tensor& x, std::span<const std::size_t> labels,
                const ForwardFn& forward = mlp_forward);

// Eigenvalues of J J^T w.r.t. the entries in `groups` (all entries when empty),
// without building any outer graph.
Tensor gram_eigenvalues(const models::ParamSet& params, const Tensor& x, std::span<const std::size_t> labels,
                        const std::set<std::string>& groups, double loss_floor = conditioning::kDefaultLossFloor,
                        const ForwardFn& forward = mlp_forward);

}  // namespace cmaml::meta
