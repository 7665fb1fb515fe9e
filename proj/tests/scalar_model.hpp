#pragma once

// One-parameter binary classifier, logits = [theta * x, 0], with its loss
// derivatives written out by hand. Used as an independent oracle for the
// second-order meta-gradient.

#include <cmath>
#include <vector>

#include "cmaml/autodiff.hpp"
#include "cmaml/models.hpp"
#include "cmaml/tasks.hpp"

namespace cmaml::testing {

inline NodeId scalar_forward(Graph& g, const models::ParamNodes& p, const Tensor& x) {
  const NodeId theta = g.reshape(p.entries.front().node, Shape{1, 1});
  const NodeId w = g.matmul(theta, g.constant(Tensor::matrix({{1.0, 0.0}})));
  return g.matmul(g.constant(x), w);
}

inline models::ParamSet scalar_params(double theta) {
  return models::ParamSet(models::MLPConfig{1, {}, 2, 0}, {{"theta", models::kClassifierGroup, Tensor::vector({theta})}});
}

inline tasks::Task scalar_task(std::vector<double> sx, std::vector<std::size_t> sy, std::vector<double> qx,
                               std::vector<std::size_t> qy) {
  tasks::Task t;
  const std::size_t ns = sx.size(), nq = qx.size();
  t.support_x = Tensor(Shape{ns, 1}, std::move(sx));
  t.support_y = std::move(sy);
  t.query_x = Tensor(Shape{nq, 1}, std::move(qx));
  t.query_y = std::move(qy);
  t.n_way = 2;
  t.k_shot = t.support_y.size() / 2;
  t.q_queries = t.query_y.size() / 2;
  return t;
}

struct ScalarDerivs {
  double loss = 0.0, d1 = 0.0, d2 = 0.0;
};

// Mean cross-entropy of the scalar model and its first two theta-derivatives.
// For z = theta x: label 0 gives log(1 + e^-z), label 1 gives log(1 + e^z).
inline ScalarDerivs scalar_loss(double theta, const Tensor& x, const std::vector<std::size_t>& y) {
  ScalarDerivs out;
  const double n = static_cast<double>(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double xi = x[i];
    const double z = theta * xi;
    const double s = 1.0 / (1.0 + std::exp(-z));
    if (y[i] == 0) {
      out.loss += std::log1p(std::exp(-z)) / n;
      out.d1 += -(1.0 - s) * xi / n;
    } else {
      out.loss += std::log1p(std::exp(z)) / n;
      out.d1 += s * xi / n;
    }
    out.d2 += s * (1.0 - s) * xi * xi / n;
  }
  return out;
}

// d/dtheta* of the query loss after K inner steps: L_q'(theta_K) times the
// product of (1 - alpha * l_s''(theta_{k-1})).
inline double scalar_maml_gradient(double theta, const tasks::Task& t, double alpha, std::size_t steps) {
  double chain = 1.0;
  for (std::size_t k = 0; k < steps; ++k) {
    const ScalarDerivs s = scalar_loss(theta, t.support_x, t.support_y);
    chain *= 1.0 - alpha * s.d2;
    theta -= alpha * s.d1;
  }
  return scalar_loss(theta, t.query_x, t.query_y).d1 * chain;
}

}  // namespace cmaml::testing
