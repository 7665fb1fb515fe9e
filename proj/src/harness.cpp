#include "cmaml/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "cmaml/error.hpp"
#include "cmaml/linalg.hpp"
#include "cmaml/parallel.hpp"

namespace cmaml::harness {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t split_stream(std::uint64_t seed, const std::string& split) {
  return tasks::derive_seed(seed, fnv1a(split));
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc{} || res.ptr != end) throw ConfigError("config: " + key + ": bad number '" + text + "'");
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config: " + key + ": expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<std::size_t>(key, item));
  return out;
}

std::string join(const auto& items) {
  std::string out;
  for (const auto& item : items) {
    if (!out.empty()) out += ',';
    if constexpr (std::is_arithmetic_v<std::decay_t<decltype(item)>>) {
      out += std::to_string(item);
    } else {
      out += item;
    }
  }
  return out;
}

double log10_variance(const Tensor& eig, double floor) {
  std::vector<double> logs;
  logs.reserve(eig.size());
  for (double v : eig.data()) logs.push_back(std::log10(std::max(v, floor)));
  const double mean = std::accumulate(logs.begin(), logs.end(), 0.0) / static_cast<double>(logs.size());
  double var = 0.0;
  for (double l : logs) var += (l - mean) * (l - mean);
  return var / static_cast<double>(logs.size());
}

}  // namespace

// ---- task source ----

TaskSampler::TaskSampler(TaskSourceConfig source) : source_(std::move(source)) {
  if (source_.kind == SourceKind::csv) {
    dataset_.emplace(tasks::CsvDataset::load(source_.csv_path, source_.split_path));
  } else {
    source_.gaussian.validate();
  }
}

std::size_t TaskSampler::dim() const { return dataset_ ? dataset_->dim() : source_.gaussian.dim; }

tasks::Task TaskSampler::sample_with(const std::string& split, std::mt19937_64& rng) const {
  const auto& g = source_.gaussian;
  if (dataset_) return tasks::sample_csv_episode(*dataset_, split, g.n_way, g.k_shot, g.q_queries, rng);
  return tasks::sample_gaussian_episode(g, rng);
}

tasks::Task TaskSampler::sample(const std::string& split, std::uint64_t seed, std::uint64_t index) const {
  std::mt19937_64 rng(tasks::derive_seed(split_stream(seed, split), index));
  return sample_with(split, rng);
}

// ---- configuration ----

void TrainConfig::validate() const {
  meta.validate();
  if (hidden_dims.empty()) throw ConfigError("config: hidden_dims must list at least one layer");
  if (eval_episodes < 1) throw ConfigError("config: eval_episodes must be >= 1");
  if (eval_every < 1) throw ConfigError("config: eval_every must be >= 1");
  if (eval_steps.empty()) throw ConfigError("config: eval_steps must be non-empty");
  for (std::size_t i = 1; i < eval_steps.size(); ++i)
    if (eval_steps[i] <= eval_steps[i - 1]) throw ConfigError("config: eval_steps must be strictly ascending");
  if (source.kind == SourceKind::csv && (source.csv_path.empty() || source.split_path.empty())) {
    throw ConfigError("config: csv source needs csv_path and split_path");
  }
  source.gaussian.validate();
}

models::MLPConfig TrainConfig::model_config(std::size_t input_dim) const {
  return models::MLPConfig{input_dim, hidden_dims, source.gaussian.n_way, seed};
}

TrainConfig TrainConfig::parse(std::istream& in, const std::filesystem::path& base_dir) {
  TrainConfig c;
  auto path_of = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config: key " + key + " given twice");

    auto& m = c.meta;
    auto& g = c.source.gaussian;
    if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "episodes") c.episodes = parse_number<std::size_t>(key, v);
    else if (key == "eval_every") c.eval_every = parse_number<std::size_t>(key, v);
    else if (key == "eval_episodes") c.eval_episodes = parse_number<std::size_t>(key, v);
    else if (key == "eval_steps") c.eval_steps = parse_sizes(key, v);
    else if (key == "trace_episodes") c.trace_episodes = parse_number<std::size_t>(key, v);
    else if (key == "trace_full_kappa") c.trace_full_kappa = parse_bool(key, v);
    else if (key == "output_dir") c.output_dir = v;
    else if (key == "hidden_dims") c.hidden_dims = parse_sizes(key, v);
    else if (key == "inner_steps") m.inner_steps = parse_number<std::size_t>(key, v);
    else if (key == "alpha") m.alpha = parse_number<double>(key, v);
    else if (key == "beta") m.beta = parse_number<double>(key, v);
    else if (key == "gamma") m.gamma = parse_number<double>(key, v);
    else if (key == "meta_batch") m.meta_batch = parse_number<std::size_t>(key, v);
    else if (key == "subset_groups") {
      const auto groups = split_list(v);
      m.subset_groups = std::set<std::string>(groups.begin(), groups.end());
    }
    else if (key == "conditioning") m.conditioning_enabled = parse_bool(key, v);
    else if (key == "first_order") m.first_order = parse_bool(key, v);
    else if (key == "optimizer") {
      if (v == "sgd") m.optimizer = meta::OuterOptimizer::sgd;
      else if (v == "adam") m.optimizer = meta::OuterOptimizer::adam;
      else throw ConfigError("config: optimizer must be sgd or adam, got '" + v + "'");
    }
    else if (key == "grad_clip") m.grad_clip = parse_number<double>(key, v);
    else if (key == "loss_floor") m.loss_floor = parse_number<double>(key, v);
    else if (key == "eig_floor") m.eig_floor = parse_number<double>(key, v);
    else if (key == "task_source") {
      if (v == "gaussian") c.source.kind = SourceKind::gaussian;
      else if (v == "csv") c.source.kind = SourceKind::csv;
      else throw ConfigError("config: task_source must be gaussian or csv, got '" + v + "'");
    }
    else if (key == "n_way") g.n_way = parse_number<std::size_t>(key, v);
    else if (key == "k_shot") g.k_shot = parse_number<std::size_t>(key, v);
    else if (key == "q_queries") g.q_queries = parse_number<std::size_t>(key, v);
    else if (key == "dim") g.dim = parse_number<std::size_t>(key, v);
    else if (key == "mean_scale") g.mean_scale = parse_number<double>(key, v);
    else if (key == "noise_sigma") g.noise_sigma = parse_number<double>(key, v);
    else if (key == "csv_path") c.source.csv_path = path_of(v);
    else if (key == "split_path") c.source.split_path = path_of(v);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path.string());
  return parse(in, path.parent_path());
}

std::string TrainConfig::to_text() const {
  const auto& m = meta;
  const auto& g = source.gaussian;
  std::ostringstream out;
  out << "seed=" << seed << "\n"
      << "episodes=" << episodes << "\n"
      << "eval_every=" << eval_every << "\n"
      << "eval_episodes=" << eval_episodes << "\n"
      << "eval_steps=" << join(eval_steps) << "\n"
      << "trace_episodes=" << trace_episodes << "\n"
      << "trace_full_kappa=" << (trace_full_kappa ? "true" : "false") << "\n"
      << "output_dir=" << output_dir.string() << "\n"
      << "hidden_dims=" << join(hidden_dims) << "\n"
      << "inner_steps=" << m.inner_steps << "\n"
      << "alpha=" << fmt(m.alpha) << "\n"
      << "beta=" << fmt(m.beta) << "\n"
      << "gamma=" << fmt(m.gamma) << "\n"
      << "meta_batch=" << m.meta_batch << "\n"
      << "subset_groups=" << join(m.subset_groups) << "\n"
      << "conditioning=" << (m.conditioning_enabled ? "true" : "false") << "\n"
      << "first_order=" << (m.first_order ? "true" : "false") << "\n"
      << "optimizer=" << (m.optimizer == meta::OuterOptimizer::adam ? "adam" : "sgd") << "\n"
      << "grad_clip=" << fmt(m.grad_clip) << "\n"
      << "loss_floor=" << fmt(m.loss_floor) << "\n"
      << "eig_floor=" << fmt(m.eig_floor) << "\n"
      << "task_source=" << (source.kind == SourceKind::csv ? "csv" : "gaussian") << "\n"
      << "n_way=" << g.n_way << "\n"
      << "k_shot=" << g.k_shot << "\n"
      << "q_queries=" << g.q_queries << "\n"
      << "dim=" << g.dim << "\n"
      << "mean_scale=" << fmt(g.mean_scale) << "\n"
      << "noise_sigma=" << fmt(g.noise_sigma) << "\n"
      << "csv_path=" << source.csv_path.string() << "\n"
      << "split_path=" << source.split_path.string() << "\n";
  return out.str();
}

// ---- evaluation ----

const EvalRow& EvalReport::at_step(std::size_t step) const {
  for (const auto& r : rows)
    if (r.step == step) return r;
  throw ConfigError("eval report: no row for step " + std::to_string(step));
}

EvalRow summarize(std::size_t step, std::span<const double> values) {
  EvalRow row;
  row.step = step;
  row.episodes = values.size();
  if (values.empty()) return row;
  const double n = static_cast<double>(values.size());
  row.accuracy = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - row.accuracy) * (v - row.accuracy);
    row.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return row;
}

EvalReport evaluate(const models::ParamSet& params, const TaskSampler& sampler, const std::string& split,
                    std::size_t episodes, std::span<const std::size_t> steps, double alpha, std::uint64_t seed) {
  if (episodes == 0) throw ConfigError("evaluate: episodes must be >= 1");
  if (steps.empty()) throw ConfigError("evaluate: no steps requested");
  const std::size_t max_step = *std::max_element(steps.begin(), steps.end());

  // acc[s][e]: accuracy of episode e after steps[s] updates.
  std::vector<std::vector<double>> acc(steps.size(), std::vector<double>(episodes));
  parallel_for(episodes, [&](std::size_t e) {
    const tasks::Task task = sampler.sample(split, seed, e);
    models::ParamSet cur = params;
    for (std::size_t s = 0; s <= max_step; ++s) {
      for (std::size_t i = 0; i < steps.size(); ++i)
        if (steps[i] == s) acc[i][e] = meta::accuracy(cur, task.query_x, task.query_y);
      if (s < max_step) cur = meta::sgd_step(cur, task.support_x, task.support_y, alpha).params;
    }
  });

  EvalReport report;
  for (std::size_t i = 0; i < steps.size(); ++i) report.rows.push_back(summarize(steps[i], acc[i]));
  return report;
}

// ---- condition tracing ----

ConditionTrace trace_condition(const models::ParamSet& params, const tasks::Task& task, std::size_t inner_steps,
                               double alpha, const std::set<std::string>& subset_groups, bool include_full,
                               double loss_floor, double eig_floor) {
  ConditionTrace trace;
  models::ParamSet cur = params;
  for (std::size_t k = 0; k < inner_steps; ++k) {
    const Tensor eig = meta::gram_eigenvalues(cur, task.support_x, task.support_y, subset_groups, loss_floor);
    trace.subset_kappa.push_back(linalg::condition_number(eig.data(), eig_floor));
    trace.condition_loss += log10_variance(eig, eig_floor) / static_cast<double>(inner_steps);
    if (include_full) {
      const Tensor full = meta::gram_eigenvalues(cur, task.support_x, task.support_y, {}, loss_floor);
      trace.full_kappa.push_back(linalg::condition_number(full.data(), eig_floor));
    }
    if (k + 1 < inner_steps) cur = meta::sgd_step(cur, task.support_x, task.support_y, alpha).params;
  }
  return trace;
}

ConditionTrace average(std::span<const ConditionTrace> traces) {
  ConditionTrace out;
  if (traces.empty()) return out;
  const double n = static_cast<double>(traces.size());
  out.subset_kappa.assign(traces.front().subset_kappa.size(), 0.0);
  out.full_kappa.assign(traces.front().full_kappa.size(), 0.0);
  for (const auto& t : traces) {
    for (std::size_t k = 0; k < out.subset_kappa.size(); ++k) out.subset_kappa[k] += t.subset_kappa[k] / n;
    for (std::size_t k = 0; k < out.full_kappa.size(); ++k) out.full_kappa[k] += t.full_kappa[k] / n;
    out.condition_loss += t.condition_loss / n;
  }
  return out;
}

// ---- quadratic demo ----

std::vector<QuadraticRow> demo_quadratic(std::span<const double> kappas, double lr, std::size_t steps) {
  if (steps < 1) throw ConfigError("demo-quadratic: steps must be >= 1");
  std::vector<QuadraticRow> rows;
  for (double kappa : kappas) {
    const tasks::QuadraticProblem problem = tasks::quadratic_problem(kappa);
    const std::vector<Tensor> iterates = tasks::quadratic_descent(problem, lr, steps);
    auto distance = [&](const Tensor& t) {
      return std::hypot(t[0] - problem.optimum[0], t[1] - problem.optimum[1]);
    };
    const double d0 = distance(iterates.front());
    for (std::size_t t = 0; t < iterates.size(); ++t) {
      const Tensor& th = iterates[t];
      const double d = distance(th);
      rows.push_back({kappa, t, th[0], th[1], tasks::quadratic_loss(problem, th), d, d0 > 0.0 ? d / d0 : 0.0});
    }
  }
  return rows;
}

void write_quadratic_csv(std::ostream& out, std::span<const QuadraticRow> rows) {
  out << "kappa,step,theta1,theta2,loss,distance,ratio\n";
  for (const auto& r : rows) {
    out << fmt(r.kappa) << ',' << r.step << ',' << fmt(r.theta1) << ',' << fmt(r.theta2) << ',' << fmt(r.loss) << ','
        << fmt(r.distance) << ',' << fmt(r.ratio) << '\n';
  }
}

// ---- metric files ----

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char buf[64];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &utc);
  return buf;
}

std::string timestamp_header() { return "# created " + utc_now(); }

void write_eval_rows(std::ostream& out, std::size_t iteration, const std::string& split, const EvalReport& report) {
  for (const auto& r : report.rows) {
    out << iteration << ',' << split << ',' << r.step << ',' << fmt(r.accuracy) << ',' << fmt(r.ci95) << ','
        << r.episodes << '\n';
  }
}

void write_trace_rows(std::ostream& out, std::size_t iteration, const ConditionTrace& trace) {
  for (std::size_t k = 0; k < trace.subset_kappa.size(); ++k) {
    out << iteration << ',' << k << ',' << fmt(trace.subset_kappa[k]) << ','
        << (k < trace.full_kappa.size() ? fmt(trace.full_kappa[k]) : std::string()) << ','
        << fmt(trace.condition_loss) << '\n';
  }
}

// ---- training ----

namespace {

std::ofstream open_metric(const std::filesystem::path& path, const char* columns) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("train: cannot write " + path.string());
  out << timestamp_header() << '\n' << columns << '\n';
  return out;
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const TaskSampler sampler(cfg.source);
  const models::MLPConfig model = cfg.model_config(sampler.dim());
  models::ParamSet params = models::init(model);

  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec) throw IoError("train: cannot create " + cfg.output_dir.string() + ": " + ec.message());

  {
    std::ofstream manifest(cfg.output_dir / "run.json", std::ios::trunc);
    if (!manifest) throw IoError("train: cannot write run.json");
    const std::string text = cfg.to_text();
    char id[17];
    std::snprintf(id, sizeof id, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
    manifest << "{\n  \"run_id\": \"" << id << "\",\n  \"created\": \"" << utc_now() << "\",\n"
             << "  \"parameters\": " << params.total_size() << ",\n  \"config\": {\n";
    std::istringstream lines(text);
    std::string line;
    bool first = true;
    while (std::getline(lines, line)) {
      const auto eq = line.find('=');
      std::string value = line.substr(eq + 1);
      std::string escaped;
      for (char ch : value) {
        if (ch == '"' || ch == '\\') escaped += '\\';
        escaped += ch;
      }
      manifest << (first ? "" : ",\n") << "    \"" << line.substr(0, eq) << "\": \"" << escaped << "\"";
      first = false;
    }
    manifest << "\n  }\n}\n";
  }
  std::ofstream eval_csv = open_metric(cfg.output_dir / "eval.csv", kEvalColumns);
  std::ofstream trace_csv = open_metric(cfg.output_dir / "trace.csv", kTraceColumns);
  std::ofstream train_csv = open_metric(cfg.output_dir / "train.csv", kTrainColumns);

  std::mt19937_64 rng(split_stream(cfg.seed, "train"));
  meta::AdamState adam;
  TrainResult result;
  bool have_best = false;

  auto snapshot = [&](std::size_t iteration) { return Checkpoint{params, iteration, rng_text(rng)}; };

  auto probe = [&](std::size_t iteration) {
    const EvalReport report =
        evaluate(params, sampler, "val", cfg.eval_episodes, cfg.eval_steps, cfg.meta.alpha, cfg.seed);
    write_eval_rows(eval_csv, iteration, "val", report);

    std::vector<ConditionTrace> traces(std::min(cfg.trace_episodes, cfg.eval_episodes));
    parallel_for(traces.size(), [&](std::size_t e) {
      traces[e] = trace_condition(params, sampler.sample("val", cfg.seed, e), cfg.meta.inner_steps, cfg.meta.alpha,
                                  cfg.meta.subset_groups, cfg.trace_full_kappa, cfg.meta.loss_floor,
                                  cfg.meta.eig_floor);
    });
    const ConditionTrace mean = average(traces);
    if (!traces.empty()) write_trace_rows(trace_csv, iteration, mean);
    eval_csv.flush();
    trace_csv.flush();

    const EvalRow& top = report.rows.back();
    if (!have_best || top.accuracy > result.best_val_accuracy) {
      have_best = true;
      result.best_val_accuracy = top.accuracy;
      result.best_iteration = iteration;
      result.best = snapshot(iteration);
      save_checkpoint(cfg.output_dir / "checkpoint_best.json", result.best);
    }
    if (progress) {
      std::ostringstream msg;
      msg << "iter " << iteration << "  val acc@" << top.step << " " << fmt(std::round(top.accuracy * 1e4) / 1e4)
          << " +- " << fmt(std::round(top.ci95 * 1e4) / 1e4);
      if (!mean.subset_kappa.empty()) msg << "  kappa0 " << fmt(std::round(mean.subset_kappa.front() * 100) / 100);
      msg << "  L_kappa " << fmt(std::round(mean.condition_loss * 1e4) / 1e4);
      progress(msg.str());
    }
  };

  probe(0);
  for (std::size_t it = 1; it <= cfg.episodes; ++it) {
    std::vector<tasks::Task> batch;
    batch.reserve(cfg.meta.meta_batch);
    for (std::size_t i = 0; i < cfg.meta.meta_batch; ++i) batch.push_back(sampler.sample_with("train", rng));
    meta::MetaStepResult step;
    try {
      step = meta::meta_step(params, batch, cfg.meta, meta::mlp_forward, &adam);
    } catch (const NumericError& e) {
      result.final = snapshot(it - 1);
      save_checkpoint(cfg.output_dir / "checkpoint_final.json", result.final);
      throw NumericError("train: iteration " + std::to_string(it) + ": " + e.what() +
                         " (last good parameters saved)");
    }
    params = std::move(step.params);
    train_csv << it << ',' << fmt(step.metrics.mean_query_loss) << ',' << fmt(step.metrics.mean_condition_loss) << ','
              << fmt(step.metrics.mean_kappa0) << '\n';
    if (it % cfg.eval_every == 0 || it == cfg.episodes) probe(it);
  }

  result.final = snapshot(cfg.episodes);
  save_checkpoint(cfg.output_dir / "checkpoint_final.json", result.final);
  if (!eval_csv || !trace_csv || !train_csv.flush()) throw IoError("train: failed writing metric files");
  return result;
}

}  // namespace cmaml::harness
