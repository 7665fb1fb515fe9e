#include "cmaml/metalearn.hpp"

#include <cmath>
#include <string>

#include "cmaml/error.hpp"
#include "cmaml/linalg.hpp"
#include "cmaml/parallel.hpp"

namespace cmaml::meta {

void MetaConfig::validate() const {
  if (inner_steps < 1) throw ConfigError("meta: inner_steps must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("meta: alpha must be > 0");
  if (!(beta > 0.0)) throw ConfigError("meta: beta must be > 0");
  if (!(gamma >= 0.0)) throw ConfigError("meta: gamma must be >= 0");
  if (meta_batch < 1) throw ConfigError("meta: meta_batch must be >= 1");
  if (subset_groups.empty()) throw ConfigError("meta: subset_groups must be non-empty");
  if (!(grad_clip >= 0.0)) throw ConfigError("meta: grad_clip must be >= 0");
  if (!(loss_floor > 0.0) || !(eig_floor > 0.0)) throw ConfigError("meta: floors must be positive");
}

namespace {

std::vector<NodeId> subset_nodes(const models::ParamNodes& params, const std::set<std::string>& groups) {
  std::vector<NodeId> out;
  for (std::size_t i : models::select_groups(params.entries, groups)) out.push_back(params.entries[i].node);
  return out;
}

}  // namespace

InnerTrajectory inner_adapt(Graph& graph, const models::ParamNodes& theta_star, const tasks::Task& task,
                            const MetaConfig& cfg, const ForwardFn& forward) {
  if (task.support_y.empty()) throw ShapeError("inner_adapt: empty support set");
  InnerTrajectory traj;
  traj.per_step_params.reserve(cfg.inner_steps + 1);
  traj.per_step_params.push_back(theta_star);
  if (cfg.conditioning_enabled) traj.eig_records.support_size = task.support_y.size();

  for (std::size_t k = 1; k <= cfg.inner_steps; ++k) {
    const models::ParamNodes& cur = traj.per_step_params.back();
    try {
      const NodeId logits = forward(graph, cur, task.support_x);
      const NodeId losses = models::per_sample_loss(graph, logits, task.support_y);
      if (cfg.conditioning_enabled) {
        const std::vector<NodeId> subset = subset_nodes(cur, cfg.subset_groups);
        const auto r = conditioning::residuals(graph, losses, cfg.loss_floor);
        const NodeId gram = conditioning::jacobian_gram(graph, r.values, subset, true);
        traj.eig_records.per_step.push_back(linalg::sym_eigen(graph, gram).eigenvalues);
        if (k == 1) {
          for (NodeId p : subset) traj.eig_records.subset_size += graph.value(p).size();
        }
      }
      const NodeId loss = graph.mean(losses);
      traj.per_step_support_loss.push_back(graph.value(loss).item());

      const std::vector<NodeId> params = cur.nodes();
      const std::vector<NodeId> grads = graph.gradient(loss, params, !cfg.first_order);
      models::ParamNodes next{cur.layout, cur.entries};
      for (std::size_t i = 0; i < params.size(); ++i) {
        next.entries[i].node = graph.sub(params[i], graph.scale(grads[i], cfg.alpha));
      }
      traj.per_step_params.push_back(std::move(next));
    } catch (const NumericError& e) {
      throw NumericError("inner step " + std::to_string(k) + ": " + e.what());
    }
  }
  return traj;
}

TaskLoss task_loss(Graph& graph, const InnerTrajectory& traj, const tasks::Task& task, const MetaConfig& cfg,
                   const ForwardFn& forward) {
  TaskLoss out;
  const NodeId logits = forward(graph, traj.per_step_params.back(), task.query_x);
  out.query_loss = graph.mean(models::per_sample_loss(graph, logits, task.query_y));
  out.total = out.query_loss;
  if (cfg.conditioning_enabled && !traj.eig_records.per_step.empty()) {
    out.condition_loss = conditioning::condition_loss(graph, traj.eig_records, cfg.eig_floor);
    out.has_condition_loss = true;
    if (cfg.gamma != 0.0) out.total = graph.add(out.query_loss, graph.scale(out.condition_loss, cfg.gamma));
  }
  return out;
}

SubsetView select_subset(const models::ParamSet& params, const std::set<std::string>& groups) {
  SubsetView view;
  view.indices = models::select_groups(params.entries(), groups);
  for (std::size_t i : view.indices) view.flat_size += params.entries()[i].value.size();
  return view;
}

SubsetView select_subset(const Graph& graph, const models::ParamNodes& params, const std::set<std::string>& groups) {
  SubsetView view;
  view.indices = models::select_groups(params.entries, groups);
  for (std::size_t i : view.indices) view.flat_size += graph.value(params.entries[i].node).size();
  return view;
}

Tensor gram_eigenvalues(const models::ParamSet& params, const Tensor& x, std::span<const std::size_t> labels,
                        const std::set<std::string>& groups, double loss_floor, const ForwardFn& forward) {
  Graph graph;
  const models::ParamNodes nodes = models::bind(graph, params, true);
  const std::vector<NodeId> subset = groups.empty() ? nodes.nodes() : subset_nodes(nodes, groups);
  const NodeId losses = models::per_sample_loss(graph, forward(graph, nodes, x), labels);
  const auto r = conditioning::residuals(graph, losses, loss_floor);
  const NodeId gram = conditioning::jacobian_gram(graph, r.values, subset, false);
  return linalg::jacobi_eigen(linalg::SymMatrix(graph.value(gram))).values;
}

TaskGradient task_gradient(const models::ParamSet& theta_star, const tasks::Task& task, const MetaConfig& cfg,
                           const ForwardFn& forward) {
  Graph graph;
  const models::ParamNodes nodes = models::bind(graph, theta_star, true);
  const InnerTrajectory traj = inner_adapt(graph, nodes, task, cfg, forward);
  const TaskLoss loss = task_loss(graph, traj, task, cfg, forward);

  TaskGradient out;
  out.query_loss = graph.value(loss.query_loss).item();
  if (loss.has_condition_loss) out.condition_loss = graph.value(loss.condition_loss).item();
  const std::vector<NodeId> grads = graph.gradient(loss.total, nodes.nodes(), false);
  out.grads.reserve(grads.size());
  for (NodeId g : grads) out.grads.push_back(graph.value(g));

  if (!traj.eig_records.per_step.empty()) {
    out.kappa0 = linalg::condition_number(graph.value(traj.eig_records.per_step.front()).data(), cfg.eig_floor);
  } else {
    const Tensor eig = gram_eigenvalues(theta_star, task.support_x, task.support_y, cfg.subset_groups, cfg.loss_floor, forward);
    out.kappa0 = linalg::condition_number(eig.data(), cfg.eig_floor);
  }
  return out;
}

void AdamState::apply(models::ParamSet& params, std::span<const Tensor> grads, double lr) {
  auto entries = params.entries();
  if (m_.empty()) {
    for (const auto& e : entries) {
      m_.emplace_back(e.value.shape());
      v_.emplace_back(e.value.shape());
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto w = entries[i].value.data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grads[i][j];
      m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g;
      v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g * g;
      w[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
    }
  }
}

MetaStepResult meta_step(const models::ParamSet& theta_star, std::span<const tasks::Task> tasks, const MetaConfig& cfg,
                         const ForwardFn& forward, AdamState* adam) {
  if (tasks.empty()) throw ConfigError("meta_step: no tasks");
  if (cfg.optimizer == OuterOptimizer::adam && adam == nullptr) throw ConfigError("meta_step: adam needs optimizer state");

  std::vector<TaskGradient> per_task(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) { per_task[i] = task_gradient(theta_star, tasks[i], cfg, forward); });

  const auto entries = theta_star.entries();
  std::vector<Tensor> total;
  total.reserve(entries.size());
  for (const auto& e : entries) total.emplace_back(e.value.shape());
  MetaMetrics metrics;
  for (const TaskGradient& tg : per_task) {
    for (std::size_t i = 0; i < total.size(); ++i)
      for (std::size_t j = 0; j < total[i].size(); ++j) total[i][j] += tg.grads[i][j];
    metrics.mean_query_loss += tg.query_loss;
    metrics.mean_condition_loss += tg.condition_loss;
    metrics.mean_kappa0 += tg.kappa0;
  }
  const double n = static_cast<double>(tasks.size());
  metrics.mean_query_loss /= n;
  metrics.mean_condition_loss /= n;
  metrics.mean_kappa0 /= n;

  double norm2 = 0.0;
  for (std::size_t i = 0; i < total.size(); ++i) {
    if (!total[i].all_finite()) throw NumericError("meta_step: non-finite meta-gradient for " + entries[i].name);
    for (double v : total[i].data()) norm2 += v * v;
  }
  if (cfg.grad_clip > 0.0 && std::sqrt(norm2) > cfg.grad_clip) {
    const double factor = cfg.grad_clip / std::sqrt(norm2);
    for (auto& t : total)
      for (double& v : t.data()) v *= factor;
  }

  MetaStepResult out{theta_star, metrics};
  if (cfg.optimizer == OuterOptimizer::adam) {
    adam->apply(out.params, total, cfg.beta);
  } else {
    auto dst = out.params.entries();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      auto w = dst[i].value.data();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= cfg.beta * total[i][j];
    }
  }
  return out;
}

StepResult sgd_step(const models::ParamSet& params, const Tensor& x, std::span<const std::size_t> labels, double alpha,
                    const ForwardFn& forward) {
  Graph graph;
  const models::ParamNodes nodes = models::bind(graph, params, true);
  const NodeId loss = graph.mean(models::per_sample_loss(graph, forward(graph, nodes, x), labels));
  const std::vector<NodeId> ids = nodes.nodes();
  const std::vector<NodeId> grads = graph.gradient(loss, ids, false);
  StepResult out{params, graph.value(loss).item()};
  auto dst = out.params.entries();
  for (std::size_t i = 0; i < ids.size(); ++i) dst[i].value = graph.value(graph.sub(ids[i], graph.scale(grads[i], alpha)));
  return out;
}

double accuracy(const models::ParamSet& params, const Tensor& x, std::span<const std::size_t> labels,
                const ForwardFn& forward) {
  Graph graph;
  const models::ParamNodes nodes = models::bind(graph, params, false);
  const Tensor& logits = graph.value(forward(graph, nodes, x));
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    if (best == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace cmaml::meta
