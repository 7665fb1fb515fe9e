#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <random>

#include "cmaml/error.hpp"
#include "cmaml/linalg.hpp"
#include "cmaml/metalearn.hpp"
#include "oracles.hpp"
#include "scalar_model.hpp"

using namespace cmaml;
using namespace cmaml::meta;
using cmaml::testing::random_tensor;

namespace {

const models::MLPConfig kTiny{3, {4}, 2, 31};  // 26 parameters

tasks::Task tiny_task(std::uint64_t seed) {
  tasks::GaussianTaskGen gen;
  gen.dim = 3;
  gen.n_way = 2;
  gen.k_shot = 2;
  gen.q_queries = 3;
  gen.mean_scale = 1.5;
  gen.noise_sigma = 0.7;
  std::mt19937_64 rng(seed);
  return tasks::sample_gaussian_episode(gen, rng);
}

MetaConfig tiny_cfg() {
  MetaConfig cfg;
  cfg.inner_steps = 2;
  cfg.alpha = 0.3;
  cfg.beta = 0.1;
  return cfg;
}

std::vector<double> flat(const std::vector<Tensor>& grads) {
  std::vector<double> out;
  for (const Tensor& g : grads) out.insert(out.end(), g.data().begin(), g.data().end());
  return out;
}

double task_loss_value(const models::ParamSet& p, const tasks::Task& t, const MetaConfig& cfg,
                       const ForwardFn& forward = mlp_forward) {
  Graph g;
  const models::ParamNodes nodes = models::bind(g, p);
  const InnerTrajectory traj = inner_adapt(g, nodes, t, cfg, forward);
  return g.value(task_loss(g, traj, t, cfg, forward).total).item();
}


}  // namespace

TEST(InnerAdapt, ZeroStepSizeIsIdentity) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(1);
  MetaConfig cfg = tiny_cfg();
  cfg.alpha = 0.0;
  cfg.inner_steps = 4;
  Graph g;
  const InnerTrajectory traj = inner_adapt(g, models::bind(g, p), t, cfg);
  ASSERT_EQ(traj.per_step_params.size(), 5u);
  EXPECT_EQ(models::values_of(g, traj.per_step_params.back()), p);
  ASSERT_EQ(traj.per_step_support_loss.size(), 4u);
  for (double l : traj.per_step_support_loss) EXPECT_EQ(l, traj.per_step_support_loss.front());
  EXPECT_EQ(traj.eig_records.per_step.size(), 4u);
  EXPECT_EQ(traj.eig_records.subset_size, 4u * 2u + 2u);
  EXPECT_EQ(traj.eig_records.support_size, 4u);
}

TEST(InnerAdapt, FirstStepAliasesMetaInitialization) {
  const models::ParamSet p = models::init(kTiny);
  Graph g;
  const models::ParamNodes nodes = models::bind(g, p);
  const InnerTrajectory traj = inner_adapt(g, nodes, tiny_task(2), tiny_cfg());
  EXPECT_EQ(traj.per_step_params.front().nodes(), nodes.nodes());
}

TEST(InnerAdapt, OneStepMatchesHandGradient) {
  // Linear softmax model, logits = X W: one step gives W - alpha X^T (P - Y) / B.
  std::mt19937_64 rng(3);
  const Tensor w0 = random_tensor({3, 2}, rng);
  const models::ParamSet p(models::MLPConfig{3, {}, 2, 0}, {{"w", "cls", w0}});
  const ForwardFn linear = [](Graph& g, const models::ParamNodes& n, const Tensor& x) {
    return g.matmul(g.constant(x), n.entries.front().node);
  };
  const tasks::Task t = tiny_task(4);
  MetaConfig cfg = tiny_cfg();
  cfg.inner_steps = 1;
  cfg.conditioning_enabled = false;
  Graph g;
  const InnerTrajectory traj = inner_adapt(g, models::bind(g, p), t, cfg, linear);
  const Tensor w1 = g.value(traj.per_step_params.back().entries.front().node);

  const Tensor z = matmul(t.support_x, w0);
  Tensor resid(z.shape());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const double m = std::max(z.at(r, 0), z.at(r, 1));
    const double e0 = std::exp(z.at(r, 0) - m), e1 = std::exp(z.at(r, 1) - m);
    resid.at(r, 0) = e0 / (e0 + e1) - (t.support_y[r] == 0);
    resid.at(r, 1) = e1 / (e0 + e1) - (t.support_y[r] == 1);
  }
  const Tensor grad = matmul(transpose(t.support_x), resid);
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_NEAR(w1[i], w0[i] - cfg.alpha * grad[i] / 4.0, 1e-14);
}

TEST(InnerAdapt, ScalarSecondOrderChainRule) {
  const tasks::Task t = cmaml::testing::scalar_task({0.8, -1.3, 2.0, -0.4}, {0, 1, 0, 1}, {1.1, -0.7}, {0, 1});
  MetaConfig cfg;
  cfg.inner_steps = 1;
  cfg.alpha = 0.4;
  cfg.conditioning_enabled = false;
  for (double theta : {-0.5, 0.3, 1.7}) {
    const TaskGradient tg = task_gradient(cmaml::testing::scalar_params(theta), t, cfg, cmaml::testing::scalar_forward);
    const auto s = cmaml::testing::scalar_loss(theta, t.support_x, t.support_y);
    const auto q = cmaml::testing::scalar_loss(theta - cfg.alpha * s.d1, t.query_x, t.query_y);
    EXPECT_NEAR(tg.grads.front()[0], (1.0 - cfg.alpha * s.d2) * q.d1, 1e-14);
  }
}

TEST(InnerAdapt, ConditioningDoesNotChangeTrajectory) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(5);
  MetaConfig on = tiny_cfg(), off = tiny_cfg();
  on.gamma = off.gamma = 0.0;
  off.conditioning_enabled = false;
  MetaConfig first = on;
  first.first_order = true;
  Graph ga, gb, gc;
  const auto ta = inner_adapt(ga, models::bind(ga, p), t, on);
  const auto tb = inner_adapt(gb, models::bind(gb, p), t, off);
  const auto tc = inner_adapt(gc, models::bind(gc, p), t, first);
  for (std::size_t k = 0; k <= on.inner_steps; ++k) {
    EXPECT_EQ(models::values_of(ga, ta.per_step_params[k]), models::values_of(gb, tb.per_step_params[k]));
    EXPECT_EQ(models::values_of(ga, ta.per_step_params[k]), models::values_of(gc, tc.per_step_params[k]));
  }
  EXPECT_TRUE(tb.eig_records.per_step.empty());
}

TEST(InnerAdapt, RecordsUsePreUpdateParameters) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(6);
  MetaConfig cfg = tiny_cfg();
  cfg.inner_steps = 3;
  Graph g;
  const auto traj = inner_adapt(g, models::bind(g, p), t, cfg);
  for (std::size_t k = 0; k < cfg.inner_steps; ++k) {
    const Tensor expected = gram_eigenvalues(models::values_of(g, traj.per_step_params[k]), t.support_x, t.support_y,
                                             cfg.subset_groups);
    EXPECT_LE(max_abs_diff(g.value(traj.eig_records.per_step[k]), expected), 1e-13) << "record " << k;
  }

  // Record 0 sits at theta* and cannot see the step size; later records can.
  MetaConfig other = cfg;
  other.alpha = 0.05;
  Graph h;
  const auto alt = inner_adapt(h, models::bind(h, p), t, other);
  EXPECT_EQ(g.value(traj.eig_records.per_step[0]), h.value(alt.eig_records.per_step[0]));
  EXPECT_NE(g.value(traj.eig_records.per_step[1]), h.value(alt.eig_records.per_step[1]));
}

TEST(InnerAdapt, RejectsEmptySupport) {
  tasks::Task t = tiny_task(7);
  t.support_x = Tensor(Shape{0, 3});
  t.support_y.clear();
  Graph g;
  EXPECT_THROW(inner_adapt(g, models::bind(g, models::init(kTiny)), t, tiny_cfg()), ShapeError);
}

TEST(InnerAdapt, NonFiniteStepIsNamed) {
  const tasks::Task t = cmaml::testing::scalar_task({2.0, 2.0, 2.0}, {0, 0, 1}, {1.0, -1.0}, {1, 0});
  // Non-separable support: huge steps overshoot with growing amplitude until
  // the logits overflow.
  MetaConfig cfg;
  cfg.inner_steps = 4;
  cfg.alpha = 1e308;
  cfg.conditioning_enabled = false;
  Graph g;
  try {
    inner_adapt(g, models::bind(g, cmaml::testing::scalar_params(0.0)), t, cfg, cmaml::testing::scalar_forward);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("inner step 4"), std::string::npos) << e.what();
  }
}

TEST(TaskLoss, GammaZeroIsQueryLoss) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(8);
  MetaConfig cfg = tiny_cfg();
  cfg.gamma = 0.0;
  Graph g;
  const auto traj = inner_adapt(g, models::bind(g, p), t, cfg);
  const TaskLoss loss = task_loss(g, traj, t, cfg);
  EXPECT_EQ(loss.total, loss.query_loss);
  EXPECT_TRUE(loss.has_condition_loss);
  EXPECT_GT(g.value(loss.condition_loss).item(), 0.0);
}

TEST(TaskLoss, CombinesQueryAndConditionTerms) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(9);
  MetaConfig cfg = tiny_cfg();
  cfg.gamma = 2.5;
  Graph g;
  const auto traj = inner_adapt(g, models::bind(g, p), t, cfg);
  const TaskLoss loss = task_loss(g, traj, t, cfg);
  EXPECT_NEAR(g.value(loss.total).item(), g.value(loss.query_loss).item() + 2.5 * g.value(loss.condition_loss).item(),
              1e-15);
}

TEST(TaskLoss, SecondOrderGradientMatchesFiniteDifferences) {
  const models::ParamSet p = models::init(kTiny);
  ASSERT_LE(p.total_size(), 50u);
  for (std::uint64_t seed : {10u, 11u}) {
    const tasks::Task t = tiny_task(seed);
    ASSERT_EQ(t.support_y.size(), 4u);
    const MetaConfig cfg = tiny_cfg();
    const TaskGradient tg = task_gradient(p, t, cfg);
    const Tensor fd = cmaml::testing::central_difference(
        [&](const Tensor& probe) { return task_loss_value(p.unflatten(probe.data()), t, cfg); },
        Tensor::vector(p.flatten()), 1e-6);
    EXPECT_LT(cmaml::testing::max_relative_error(Tensor::vector(flat(tg.grads)), fd, 1e-3), 1e-4);
  }
}

TEST(TaskLoss, FirstOrderDropsInnerCurvature) {
  const tasks::Task t = cmaml::testing::scalar_task({0.8, -1.3}, {0, 1}, {1.1, -0.7}, {0, 1});
  MetaConfig cfg;
  cfg.inner_steps = 1;
  cfg.alpha = 0.4;
  cfg.conditioning_enabled = false;
  cfg.first_order = true;
  const double theta = 0.3;
  const TaskGradient tg = task_gradient(cmaml::testing::scalar_params(theta), t, cfg, cmaml::testing::scalar_forward);
  const auto s = cmaml::testing::scalar_loss(theta, t.support_x, t.support_y);
  EXPECT_NEAR(tg.grads.front()[0], cmaml::testing::scalar_loss(theta - 0.4 * s.d1, t.query_x, t.query_y).d1, 1e-14);
}

TEST(SelectSubset, Bookkeeping) {
  const models::ParamSet p = models::init(models::MLPConfig{4, {8}, 3, 0});
  const SubsetView cls = select_subset(p, {"cls"});
  EXPECT_EQ(cls.indices, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(cls.flat_size, 27u);
  EXPECT_EQ(select_subset(p, {"emb", "cls"}).flat_size, p.total_size());
  EXPECT_EQ(select_subset(p, {"emb"}).flat_size + cls.flat_size, p.total_size());
  EXPECT_THROW(select_subset(p, {"head"}), ConfigError);

  Graph g;
  const models::ParamNodes nodes = models::bind(g, p);
  EXPECT_EQ(select_subset(g, nodes, {"cls"}).flat_size, 27u);
}

TEST(MetaStep, ZeroOuterStepLeavesParameters) {
  const models::ParamSet p = models::init(kTiny);
  const std::vector<tasks::Task> batch{tiny_task(12), tiny_task(13)};
  MetaConfig cfg = tiny_cfg();
  cfg.beta = 0.0;
  EXPECT_EQ(meta_step(p, batch, cfg).params, p);
}

TEST(MetaStep, SumOverIdenticalTasks) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(14);
  const MetaConfig cfg = tiny_cfg();
  const std::vector<tasks::Task> one{t}, two{t, t};
  const auto a = meta_step(p, one, cfg).params.flatten();
  const auto b = meta_step(p, two, cfg).params.flatten();
  const auto base = p.flatten();
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(b[i] - base[i], 2.0 * (a[i] - base[i]), 1e-15);
}

TEST(MetaStep, ScalarModelMatchesHandAssembledMaml) {
  const std::vector<tasks::Task> batch{
      cmaml::testing::scalar_task({0.8, -1.3, 2.0, -0.4}, {0, 1, 0, 1}, {1.1, -0.7}, {0, 1}),
      cmaml::testing::scalar_task({-0.6, 1.4}, {0, 1}, {0.2, 0.9, -1.5, 0.3}, {0, 1, 1, 0})};
  MetaConfig cfg;
  cfg.inner_steps = 3;
  cfg.alpha = 0.5;
  cfg.beta = 0.2;
  cfg.gamma = 0.0;
  for (bool conditioning : {false, true}) {
    cfg.conditioning_enabled = conditioning;
    const double theta = 0.7;
    const auto result = meta_step(cmaml::testing::scalar_params(theta), batch, cfg, cmaml::testing::scalar_forward);
    double grad = 0.0;
    for (const auto& t : batch) grad += cmaml::testing::scalar_maml_gradient(theta, t, cfg.alpha, cfg.inner_steps);
    EXPECT_NEAR(result.params.entries().front().value[0], theta - cfg.beta * grad, 1e-10);
  }
}

TEST(MetaStep, MetricsAreTaskMeans) {
  const models::ParamSet p = models::init(kTiny);
  const std::vector<tasks::Task> batch{tiny_task(15), tiny_task(16), tiny_task(17)};
  const MetaConfig cfg = tiny_cfg();
  const MetaStepResult r = meta_step(p, batch, cfg);
  double q = 0.0, c = 0.0, k = 0.0;
  for (const auto& t : batch) {
    const TaskGradient tg = task_gradient(p, t, cfg);
    q += tg.query_loss / 3.0;
    c += tg.condition_loss / 3.0;
    k += tg.kappa0 / 3.0;
    EXPECT_GE(tg.kappa0, 1.0);
  }
  EXPECT_NEAR(r.metrics.mean_query_loss, q, 1e-14);
  EXPECT_NEAR(r.metrics.mean_condition_loss, c, 1e-14);
  EXPECT_NEAR(r.metrics.mean_kappa0, k, 1e-10);
}

TEST(MetaStep, KappaZeroIndependentOfConditioningFlag) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(18);
  MetaConfig on = tiny_cfg(), off = tiny_cfg();
  off.conditioning_enabled = false;
  EXPECT_NEAR(task_gradient(p, t, on).kappa0, task_gradient(p, t, off).kappa0, 1e-9);
}

TEST(MetaStep, GradientClipCapsTheUpdateNorm) {
  const models::ParamSet p = models::init(kTiny);
  const std::vector<tasks::Task> batch{tiny_task(19)};
  MetaConfig cfg = tiny_cfg();
  cfg.beta = 1.0;
  cfg.grad_clip = 1e-3;
  const auto after = meta_step(p, batch, cfg).params.flatten();
  const auto before = p.flatten();
  double norm = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) norm += std::pow(after[i] - before[i], 2);
  EXPECT_NEAR(std::sqrt(norm), 1e-3, 1e-12);
}

TEST(MetaStep, AdamFirstStepHasStepSizeMagnitude) {
  const models::ParamSet p = models::init(kTiny);
  const std::vector<tasks::Task> batch{tiny_task(20)};
  MetaConfig cfg = tiny_cfg();
  cfg.optimizer = OuterOptimizer::adam;
  cfg.beta = 0.01;
  EXPECT_THROW(meta_step(p, batch, cfg), ConfigError);
  AdamState adam;
  const auto after = meta_step(p, batch, cfg, mlp_forward, &adam).params.flatten();
  const auto before = p.flatten();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_LE(std::abs(after[i] - before[i]), 0.01 + 1e-12);
}

TEST(MetaStep, ThreadCountDoesNotChangeResult) {
  const models::ParamSet p = models::init(kTiny);
  std::vector<tasks::Task> batch;
  for (std::uint64_t s = 0; s < 6; ++s) batch.push_back(tiny_task(100 + s));
  const MetaConfig cfg = tiny_cfg();
  ::setenv("COND_MAML_THREADS", "1", 1);
  const auto serial = meta_step(p, batch, cfg);
  ::setenv("COND_MAML_THREADS", "4", 1);
  const auto threaded = meta_step(p, batch, cfg);
  ::unsetenv("COND_MAML_THREADS");
  EXPECT_EQ(serial.params, threaded.params);
  EXPECT_EQ(serial.metrics.mean_query_loss, threaded.metrics.mean_query_loss);
}

TEST(MetaStep, RejectsEmptyBatch) {
  EXPECT_THROW(meta_step(models::init(kTiny), std::span<const tasks::Task>{}, tiny_cfg()), ConfigError);
}

TEST(MetaConfig, Validation) {
  EXPECT_NO_THROW(MetaConfig{}.validate());
  MetaConfig c;
  c.inner_steps = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = MetaConfig{};
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = MetaConfig{};
  c.gamma = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = MetaConfig{};
  c.subset_groups.clear();
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(GraphFree, SgdStepMatchesInnerLoopBitwise) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(21);
  MetaConfig cfg = tiny_cfg();
  cfg.conditioning_enabled = false;
  cfg.inner_steps = 3;
  Graph g;
  const auto traj = inner_adapt(g, models::bind(g, p), t, cfg);
  models::ParamSet cur = p;
  for (std::size_t k = 0; k < 3; ++k) {
    const StepResult s = sgd_step(cur, t.support_x, t.support_y, cfg.alpha);
    EXPECT_EQ(s.support_loss, traj.per_step_support_loss[k]);
    cur = s.params;
    EXPECT_EQ(cur, models::values_of(g, traj.per_step_params[k + 1]));
  }
}

TEST(GraphFree, AccuracyCountsArgmax) {
  const models::ParamSet p(models::MLPConfig{1, {}, 2, 0}, {{"theta", "cls", Tensor::vector({1.0})}});
  const Tensor x = Tensor::matrix({{2.0}, {-1.0}, {0.5}, {-3.0}});
  // logits [theta x, 0]: class 0 wins when x > 0.
  const std::vector<std::size_t> y{0, 1, 1, 1};
  EXPECT_DOUBLE_EQ(accuracy(p, x, y, cmaml::testing::scalar_forward), 0.75);
}

TEST(GraphFree, FullGramEigenvalues) {
  const models::ParamSet p = models::init(kTiny);
  const tasks::Task t = tiny_task(22);
  const Tensor full = gram_eigenvalues(p, t.support_x, t.support_y, {});
  const Tensor all = gram_eigenvalues(p, t.support_x, t.support_y, {"emb", "cls"});
  EXPECT_EQ(full, all);
  // |theta| and |psi| both exceed |D| = 4: the Grams are full rank.
  EXPECT_GT(full[0], 1e-12);
  EXPECT_GT(gram_eigenvalues(p, t.support_x, t.support_y, {"cls"})[0], 1e-12);
}
