#include <cstdio>
#include <fstream>
#include <sstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmaml/error.hpp"
#include "cmaml/harness.hpp"
#include "cmaml/parallel.hpp"

using namespace cmaml;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

struct EpisodeOptions {
  std::string config;
  std::size_t k_shot = 1;
  std::size_t q_queries = 16;
  double noise_sigma = 0.5;
  double mean_scale = 3.0;
  std::string split = "test";
  std::uint64_t seed = 1;
  double alpha = 0.01;
};

void add_episode_options(CLI::App* cmd, EpisodeOptions& o) {
  cmd->add_option("--config", o.config, "Training config; supplies task source, alpha and seed");
  cmd->add_option("--k-shot", o.k_shot, "Support samples per class");
  cmd->add_option("--queries", o.q_queries, "Query samples per class");
  cmd->add_option("--noise", o.noise_sigma, "Gaussian tasks: within-class std");
  cmd->add_option("--mean-scale", o.mean_scale, "Gaussian tasks: cluster-center radius");
  cmd->add_option("--split", o.split, "Episode split (train, val, test)");
  cmd->add_option("--seed", o.seed, "Episode seed");
  cmd->add_option("--alpha", o.alpha, "Adaptation step size");
}

// Task source for a checkpoint: the config's when given, else Gaussian tasks
// shaped after the checkpoint. Explicit flags override either.
harness::TaskSourceConfig episode_source(const EpisodeOptions& o, const models::ParamSet& params,
                                         const CLI::App* cmd, harness::TrainConfig& base) {
  const bool from_config = !o.config.empty();
  if (from_config) base = harness::TrainConfig::load(o.config);
  auto use = [&](const char* flag) { return !from_config || cmd->count(flag) > 0; };

  harness::TaskSourceConfig src = base.source;
  if (!from_config) src.gaussian.dim = params.layout().input_dim;
  src.gaussian.n_way = params.layout().n_classes;
  if (use("--k-shot")) src.gaussian.k_shot = o.k_shot;
  if (use("--queries")) src.gaussian.q_queries = o.q_queries;
  if (use("--noise")) src.gaussian.noise_sigma = o.noise_sigma;
  if (use("--mean-scale")) src.gaussian.mean_scale = o.mean_scale;
  if (use("--alpha")) base.meta.alpha = o.alpha;
  if (use("--seed")) base.seed = o.seed;
  return src;
}

std::vector<std::size_t> parse_steps(const std::string& text) {
  std::vector<std::size_t> steps;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!item.empty()) {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size()) throw ConfigError("--steps: bad entry '" + item + "'");
      steps.push_back(v);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (steps.empty()) throw ConfigError("--steps: empty list");
  return steps;
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    out.push_back(std::stod(item, &used));
    if (used != item.size()) throw ConfigError("bad number '" + item + "'");
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

int run_train(const std::string& config_path, const std::string& output_override) {
  harness::TrainConfig cfg = harness::TrainConfig::load(config_path);
  if (!output_override.empty()) cfg.output_dir = output_override;
  std::cerr << "training " << cfg.episodes << " iterations on " << worker_count() << " worker(s), output "
            << cfg.output_dir.string() << "\n";
  const auto result = harness::train(cfg, [](const std::string& line) { std::cerr << line << "\n"; });
  std::cout << "best_iteration=" << result.best_iteration << "\nbest_val_accuracy=" << result.best_val_accuracy
            << "\ncheckpoint_best=" << (cfg.output_dir / "checkpoint_best.json").string()
            << "\ncheckpoint_final=" << (cfg.output_dir / "checkpoint_final.json").string() << "\n";
  return kOk;
}

int run_eval(const std::string& checkpoint, std::size_t episodes, const std::string& steps_text,
             const EpisodeOptions& o, const CLI::App* cmd) {
  const harness::Checkpoint ckpt = harness::load_checkpoint(checkpoint);
  harness::TrainConfig base;
  const harness::TaskSampler sampler(episode_source(o, ckpt.params, cmd, base));
  if (sampler.dim() != ckpt.params.layout().input_dim) {
    throw ShapeError("eval: tasks have dimension " + std::to_string(sampler.dim()) + ", checkpoint expects " +
                     std::to_string(ckpt.params.layout().input_dim));
  }
  const std::vector<std::size_t> steps = parse_steps(steps_text);
  const auto report = harness::evaluate(ckpt.params, sampler, o.split, episodes, steps, base.meta.alpha, base.seed);
  std::cout << "step,accuracy,ci95,episodes\n";
  for (const auto& r : report.rows) std::cout << r.step << ',' << r.accuracy << ',' << r.ci95 << ',' << r.episodes << '\n';
  return kOk;
}

int run_trace(const std::string& checkpoint, std::size_t episodes, bool full, std::size_t inner_steps,
              const EpisodeOptions& o, const CLI::App* cmd) {
  const harness::Checkpoint ckpt = harness::load_checkpoint(checkpoint);
  harness::TrainConfig base;
  const harness::TaskSampler sampler(episode_source(o, ckpt.params, cmd, base));
  if (cmd->count("--inner-steps") || o.config.empty()) base.meta.inner_steps = inner_steps;
  std::vector<harness::ConditionTrace> traces(episodes);
  parallel_for(episodes, [&](std::size_t e) {
    traces[e] = harness::trace_condition(ckpt.params, sampler.sample(o.split, base.seed, e), base.meta.inner_steps,
                                         base.meta.alpha, base.meta.subset_groups, full, base.meta.loss_floor,
                                         base.meta.eig_floor);
  });
  std::cout << harness::kTraceColumns << '\n';
  harness::write_trace_rows(std::cout, ckpt.iteration, harness::average(traces));
  return kOk;
}

int run_demo(const std::string& kappas, double lr, std::size_t steps, const std::string& output) {
  const auto rows = harness::demo_quadratic(parse_doubles(kappas), lr, steps);
  if (output.empty()) {
    harness::write_quadratic_csv(std::cout, rows);
  } else {
    std::ofstream out(output);
    if (!out) throw IoError("demo-quadratic: cannot write " + output);
    harness::write_quadratic_csv(out, rows);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learning with a condition-number constraint on the inner-loop Jacobian"};
  app.require_subcommand(1);

  std::string config_path, output_override;
  auto* train = app.add_subcommand("train", "Meta-train a model from a key=value config");
  train->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  train->add_option("--output-dir", output_override, "Override output_dir from the config");

  std::string checkpoint, steps_text = "1,2,3,4,5";
  std::size_t episodes = 600;
  EpisodeOptions eval_opts;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint with per-step accuracy and 95% CIs");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--episodes", episodes, "Number of episodes");
  eval->add_option("--steps", steps_text, "Comma-separated adaptation steps");
  add_episode_options(eval, eval_opts);

  std::string kappas = "1,50", demo_output;
  double lr = 0.5;
  std::size_t demo_steps = 10;
  auto* demo = app.add_subcommand("demo-quadratic", "Gradient descent on rotated 2-D quadratics");
  demo->add_option("--kappa", kappas, "Comma-separated condition numbers");
  demo->add_option("--lr", lr, "Step size");
  demo->add_option("--steps", demo_steps, "Number of steps");
  demo->add_option("--output", demo_output, "Write CSV here instead of stdout");

  std::string trace_checkpoint;
  std::size_t trace_episodes = 32, trace_inner = 5;
  bool trace_full = false;
  EpisodeOptions trace_opts;
  auto* trace = app.add_subcommand("trace", "Condition numbers of J J^T along the inner loop");
  trace->add_option("--checkpoint", trace_checkpoint, "Checkpoint file")->required();
  trace->add_option("--episodes", trace_episodes, "Episodes to average over");
  trace->add_option("--inner-steps", trace_inner, "Inner steps to replay");
  trace->add_flag("--full", trace_full, "Also trace kappa w.r.t. all parameters");
  add_episode_options(trace, trace_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return run_train(config_path, output_override);
    if (*eval) return run_eval(checkpoint, episodes, steps_text, eval_opts, eval);
    if (*demo) return run_demo(kappas, lr, demo_steps, demo_output);
    if (*trace) return run_trace(trace_checkpoint, trace_episodes, trace_full, trace_inner, trace_opts, trace);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
