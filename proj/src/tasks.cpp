#include "cmaml/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "cmaml/autodiff.hpp"
#include "cmaml/error.hpp"

namespace cmaml::tasks {

void Task::validate() const {
  if (n_way == 0 || k_shot == 0 || q_queries == 0) throw ConfigError("task: empty episode shape");
  if (support_y.size() != n_way * k_shot || query_y.size() != n_way * q_queries) {
    throw ConfigError("task: label counts do not match the episode shape");
  }
  if (support_x.rows() != support_y.size() || query_x.rows() != query_y.size() ||
      support_x.cols() != query_x.cols()) {
    throw ShapeError("task: feature and label sizes disagree");
  }
  std::vector<std::size_t> s(n_way, 0), q(n_way, 0);
  for (std::size_t y : support_y) {
    if (y >= n_way) throw ConfigError("task: support label out of range");
    ++s[y];
  }
  for (std::size_t y : query_y) {
    if (y >= n_way) throw ConfigError("task: query label out of range");
    ++q[y];
  }
  for (std::size_t c = 0; c < n_way; ++c)
    if (s[c] != k_shot || q[c] != q_queries) throw ConfigError("task: unbalanced class counts");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = (seed ^ index) + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void GaussianTaskGen::validate() const {
  if (dim == 0 || n_way < 2 || k_shot == 0 || q_queries == 0) throw ConfigError("gaussian tasks: invalid episode shape");
  if (!(noise_sigma > 0.0)) throw ConfigError("gaussian tasks: noise_sigma must be positive");
  if (!(mean_scale > 0.0)) throw ConfigError("gaussian tasks: mean_scale must be positive");
}

namespace {

Task empty_task(std::size_t n, std::size_t k, std::size_t q, std::size_t d) {
  Task t;
  t.n_way = n;
  t.k_shot = k;
  t.q_queries = q;
  t.support_x = Tensor(Shape{n * k, d});
  t.query_x = Tensor(Shape{n * q, d});
  t.support_y.reserve(n * k);
  t.query_y.reserve(n * q);
  for (std::size_t c = 0; c < n; ++c) {
    t.support_y.insert(t.support_y.end(), k, c);
    t.query_y.insert(t.query_y.end(), q, c);
  }
  return t;
}

}  // namespace

Task sample_gaussian_episode(const GaussianTaskGen& gen, std::mt19937_64& rng) {
  gen.validate();
  const std::size_t n = gen.n_way, k = gen.k_shot, q = gen.q_queries, d = gen.dim;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Task t = empty_task(n, k, q, d);
  std::vector<double> center(d);
  for (std::size_t c = 0; c < n; ++c) {
    double norm = 0.0;
    for (double& v : center) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    const double radius = gen.mean_scale * std::pow(unit(rng), 1.0 / static_cast<double>(d));
    for (double& v : center) v *= radius / norm;

    for (std::size_t i = 0; i < k + q; ++i) {
      const bool support = i < k;
      const std::size_t row = support ? c * k + i : c * q + (i - k);
      Tensor& x = support ? t.support_x : t.query_x;
      for (std::size_t j = 0; j < d; ++j) x.at(row, j) = center[j] + gen.noise_sigma * normal(rng);
    }
  }
  return t;
}

CsvDataset::CsvDataset(Tensor features, std::vector<std::string> labels,
                       std::map<std::string, std::string> class_split)
    : features_(std::move(features)) {
  if (features_.rank() != 2 || features_.rows() != labels.size()) {
    throw ShapeError("csv dataset: feature rows and labels disagree");
  }
  std::vector<std::string> order;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    auto [it, inserted] = rows_by_class_.try_emplace(labels[r]);
    if (inserted) order.push_back(labels[r]);
    it->second.push_back(r);
  }
  for (const auto& [cls, split] : class_split) {
    if (split != "train" && split != "val" && split != "test") {
      throw ConfigError("csv dataset: class " + cls + " has unknown split '" + split + "'");
    }
    if (!rows_by_class_.contains(cls)) throw ConfigError("csv dataset: split file names unknown class " + cls);
  }
  for (const auto& cls : order) {
    auto it = class_split.find(cls);
    if (it == class_split.end()) throw ConfigError("csv dataset: class " + cls + " is not assigned to a split");
    classes_by_split_[it->second].push_back(cls);
  }
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
    while (!field.empty() && field.front() == ' ') field.erase(field.begin());
    out.push_back(field);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t line_no) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw IoError("csv: line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
  if (!std::isfinite(v)) throw IoError("csv: line " + std::to_string(line_no) + ": non-finite value");
  return v;
}

}  // namespace

CsvDataset CsvDataset::load(const std::filesystem::path& csv, const std::filesystem::path& splits) {
  std::ifstream in(csv);
  if (!in) throw IoError("csv: cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("csv: " + csv.string() + " is empty");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const std::vector<std::string> header = split_fields(line);
  if (header.size() < 2 || header.back() != "label") throw IoError("csv: header must end with 'label'");
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "f" + std::to_string(j)) {
      throw IoError("csv: header column " + std::to_string(j) + " is '" + header[j] + "', expected f" + std::to_string(j));
    }
  }

  std::vector<double> values;
  std::vector<std::string> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> fields = split_fields(line);
    if (fields.size() != d + 1) {
      throw IoError("csv: line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                    " fields, expected " + std::to_string(d + 1));
    }
    for (std::size_t j = 0; j < d; ++j) values.push_back(parse_double(fields[j], line_no));
    if (fields[d].empty()) throw IoError("csv: line " + std::to_string(line_no) + ": empty label");
    labels.push_back(fields[d]);
  }
  if (labels.empty()) throw IoError("csv: " + csv.string() + " has no data rows");

  std::ifstream sin(splits);
  if (!sin) throw IoError("csv: cannot open split file " + splits.string());
  std::map<std::string, std::string> class_split;
  line_no = 0;
  while (std::getline(sin, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> fields = split_fields(line);
    if (fields.size() != 2) throw IoError("split file: line " + std::to_string(line_no) + " is not class_id,split");
    if (line_no == 1 && fields[0] == "class_id") continue;
    if (!class_split.emplace(fields[0], fields[1]).second) {
      throw ConfigError("split file: class " + fields[0] + " listed twice");
    }
  }
  Tensor features(Shape{labels.size(), d}, std::move(values));
  return CsvDataset(std::move(features), std::move(labels), std::move(class_split));
}

const std::vector<std::string>& CsvDataset::classes(const std::string& split) const {
  static const std::vector<std::string> none;
  auto it = classes_by_split_.find(split);
  return it == classes_by_split_.end() ? none : it->second;
}

const std::vector<std::size_t>& CsvDataset::rows_of(const std::string& class_id) const {
  auto it = rows_by_class_.find(class_id);
  if (it == rows_by_class_.end()) throw ConfigError("csv dataset: unknown class " + class_id);
  return it->second;
}

Task sample_csv_episode(const CsvDataset& ds, const std::string& split, std::size_t n_way, std::size_t k_shot,
                        std::size_t q_queries, std::mt19937_64& rng) {
  if (n_way < 2 || k_shot == 0 || q_queries == 0) throw ConfigError("csv episode: invalid episode shape");
  std::vector<std::string> pool = ds.classes(split);
  if (pool.size() < n_way) {
    throw ConfigError("csv episode: split '" + split + "' has " + std::to_string(pool.size()) + " classes, need " +
                      std::to_string(n_way));
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(n_way);

  const std::size_t d = ds.dim();
  Task t = empty_task(n_way, k_shot, q_queries, d);
  for (std::size_t c = 0; c < n_way; ++c) {
    std::vector<std::size_t> rows = ds.rows_of(pool[c]);
    if (rows.size() < k_shot + q_queries) {
      throw ConfigError("csv episode: class " + pool[c] + " has " + std::to_string(rows.size()) + " rows, need " +
                        std::to_string(k_shot + q_queries));
    }
    std::shuffle(rows.begin(), rows.end(), rng);
    for (std::size_t i = 0; i < k_shot + q_queries; ++i) {
      const bool support = i < k_shot;
      const std::size_t row = support ? c * k_shot + i : c * q_queries + (i - k_shot);
      Tensor& x = support ? t.support_x : t.query_x;
      for (std::size_t j = 0; j < d; ++j) x.at(row, j) = ds.features().at(rows[i], j);
    }
  }
  return t;
}

QuadraticProblem quadratic_problem(double kappa, Tensor theta0) {
  if (!(kappa >= 1.0) || !std::isfinite(kappa)) throw ConfigError("quadratic: kappa must be >= 1");
  if (theta0.size() != 2) throw ShapeError("quadratic: theta0 must have 2 entries");
  const double angle = std::numbers::pi / 6.0;
  const double c = std::cos(angle), s = std::sin(angle);
  const Tensor rot = Tensor::matrix({{c, -s}, {s, c}});
  const Tensor diag = Tensor::matrix({{1.0 / kappa, 0.0}, {0.0, 1.0}});
  Tensor a = matmul(matmul(rot, diag), transpose(rot));
  // Exact symmetry despite rounding.
  const double off = 0.5 * (a.at(0, 1) + a.at(1, 0));
  a.at(0, 1) = a.at(1, 0) = off;
  return QuadraticProblem{std::move(a), theta0.reshaped(Shape{2}), Tensor(Shape{2})};
}

double quadratic_loss(const QuadraticProblem& problem, const Tensor& theta) {
  const Tensor col = theta.reshaped(Shape{2, 1});
  return 0.5 * matmul(transpose(col), matmul(problem.a, col)).item();
}

std::vector<Tensor> quadratic_descent(const QuadraticProblem& problem, double lr, std::size_t steps) {
  std::vector<Tensor> iterates{problem.theta0};
  for (std::size_t t = 0; t < steps; ++t) {
    Graph g;
    const NodeId theta = g.leaf(iterates.back(), true);
    const NodeId col = g.reshape(theta, Shape{2, 1});
    const NodeId quad = g.matmul(g.transpose(col), g.matmul(g.constant(problem.a), col));
    const NodeId loss = g.scale(g.sum(quad), 0.5);
    const NodeId grad = g.gradient(loss, std::span<const NodeId>(&theta, 1), false).front();
    iterates.push_back(g.value(g.sub(theta, g.scale(grad, lr))));
  }
  return iterates;
}

}  // namespace cmaml::tasks
