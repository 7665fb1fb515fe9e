#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cmaml/metalearn.hpp"
#include "cmaml/models.hpp"
#include "cmaml/tasks.hpp"

namespace cmaml::harness {

enum class SourceKind { gaussian, csv };

// Where episodes come from. Gaussian splits are separate seed streams; CSV
// splits are the class-disjoint sets of the split file.
struct TaskSourceConfig {
  SourceKind kind = SourceKind::gaussian;
  tasks::GaussianTaskGen gaussian;  // n_way, k_shot, q_queries are used for both kinds
  std::filesystem::path csv_path;
  std::filesystem::path split_path;
};

class TaskSampler {
 public:
  explicit TaskSampler(TaskSourceConfig source);

  std::size_t dim() const;
  std::size_t n_way() const { return source_.gaussian.n_way; }
  // Episode `index` of `split` ("train", "val" or "test") under `seed`.
  tasks::Task sample(const std::string& split, std::uint64_t seed, std::uint64_t index) const;
  tasks::Task sample_with(const std::string& split, std::mt19937_64& rng) const;

 private:
  TaskSourceConfig source_;
  std::optional<tasks::CsvDataset> dataset_;
};

struct TrainConfig {
  meta::MetaConfig meta;
  std::vector<std::size_t> hidden_dims{32, 32};
  TaskSourceConfig source;
  std::size_t episodes = 2000;
  std::size_t eval_every = 100;
  std::size_t eval_episodes = 600;
  std::vector<std::size_t> eval_steps{0, 1, 2, 3, 4, 5};
  std::size_t trace_episodes = 32;
  bool trace_full_kappa = false;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "run";

  void validate() const;
  models::MLPConfig model_config(std::size_t input_dim) const;

  // Flat key=value text; '#' starts a comment. Relative csv_path and
  // split_path resolve against `base_dir`; output_dir stays as written.
  static TrainConfig parse(std::istream& in, const std::filesystem::path& base_dir = {});
  static TrainConfig load(const std::filesystem::path& path);
  // Canonical key=value echo (every key, fixed order).
  std::string to_text() const;
};

struct EvalRow {
  std::size_t step = 0;
  double accuracy = 0.0;
  double ci95 = 0.0;  // 1.96 * sample std / sqrt(episodes)
  std::size_t episodes = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  const EvalRow& at_step(std::size_t step) const;
};

// Mean and 95% halfwidth of a sample.
EvalRow summarize(std::size_t step, std::span<const double> values);

// Adapts a copy of `params` on each episode's support set for max(steps) SGD
// steps, scoring the query set at each requested step (0 = no adaptation).
EvalReport evaluate(const models::ParamSet& params, const TaskSampler& sampler, const std::string& split,
                    std::size_t episodes, std::span<const std::size_t> steps, double alpha, std::uint64_t seed);

struct ConditionTrace {
  std::vector<double> subset_kappa;  // inner steps 0..K-1
  std::vector<double> full_kappa;    // empty unless requested
  double condition_loss = 0.0;       // L_kappa from the subset spectra
};

// Replays the inner loop without any outer graph and records kappa of J J^T
// before each update.
ConditionTrace trace_condition(const models::ParamSet& params, const tasks::Task& task, std::size_t inner_steps,
                               double alpha, const std::set<std::string>& subset_groups, bool include_full,
                               double loss_floor = conditioning::kDefaultLossFloor,
                               double eig_floor = conditioning::kDefaultEigFloor);

// Element-wise mean of several traces.
ConditionTrace average(std::span<const ConditionTrace> traces);

struct QuadraticRow {
  double kappa = 0.0;
  std::size_t step = 0;
  double theta1 = 0.0, theta2 = 0.0, loss = 0.0, distance = 0.0, ratio = 0.0;
};

std::vector<QuadraticRow> demo_quadratic(std::span<const double> kappas, double lr, std::size_t steps);
void write_quadratic_csv(std::ostream& out, std::span<const QuadraticRow> rows);

struct Checkpoint {
  models::ParamSet params;
  std::size_t iteration = 0;
  std::string rng_state;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
std::string checkpoint_text(const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Also checks the stored layout against `expected`, naming the first entry
// that differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, const models::MLPConfig& expected);

struct TrainResult {
  Checkpoint best;
  Checkpoint final;
  double best_val_accuracy = 0.0;
  std::size_t best_iteration = 0;
};

// Log sink for progress lines; may be null.
using ProgressFn = std::function<void(const std::string&)>;

TrainResult train(const TrainConfig& cfg, const ProgressFn& progress = {});

// Metric file layouts. Each file starts with timestamp_header(), then a
// column header line, then rows.
inline constexpr const char* kEvalColumns = "iteration,split,step,accuracy,ci95,episodes";
inline constexpr const char* kTraceColumns = "iteration,inner_step,kappa_subset,kappa_full,condition_loss";
inline constexpr const char* kTrainColumns = "iteration,query_loss,condition_loss,kappa0";

void write_eval_rows(std::ostream& out, std::size_t iteration, const std::string& split, const EvalReport& report);
void write_trace_rows(std::ostream& out, std::size_t iteration, const ConditionTrace& trace);
// "# created <UTC timestamp>"; the only non-deterministic line of every metric file.
std::string timestamp_header();

}  // namespace cmaml::harness
