#include "cmaml/models.hpp"

#include <cmath>
#include <string>

#include "cmaml/error.hpp"

namespace cmaml::models {

void MLPConfig::validate() const {
  if (input_dim == 0) throw ConfigError("mlp: input_dim must be positive");
  if (hidden_dims.empty()) throw ConfigError("mlp: at least one hidden layer is required");
  for (std::size_t h : hidden_dims)
    if (h == 0) throw ConfigError("mlp: hidden layer widths must be positive");
  if (n_classes < 2) throw ConfigError("mlp: n_classes must be >= 2");
}

std::size_t MLPConfig::parameter_count() const {
  std::size_t total = 0;
  std::size_t fan_in = input_dim;
  for (std::size_t h : hidden_dims) {
    total += fan_in * h + h;
    fan_in = h;
  }
  return total + fan_in * n_classes + n_classes;
}

ParamSet::ParamSet(MLPConfig layout, std::vector<ParamEntry> entries)
    : layout_(std::move(layout)), entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (entries_[i].name == entries_[j].name) throw ConfigError("params: duplicate entry name " + entries_[i].name);
}

const ParamEntry& ParamSet::entry(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw ConfigError("params: no entry named " + name);
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_size());
  for (const auto& e : entries_) flat.insert(flat.end(), e.value.data().begin(), e.value.data().end());
  return flat;
}

ParamSet ParamSet::unflatten(std::span<const double> flat) const {
  if (flat.size() != total_size()) {
    throw ShapeError("params: unflatten got " + std::to_string(flat.size()) + " values, expected " +
                     std::to_string(total_size()));
  }
  ParamSet out = *this;
  std::size_t offset = 0;
  for (auto& e : out.entries_) {
    auto dst = e.value.data();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(offset),
              flat.begin() + static_cast<std::ptrdiff_t>(offset + dst.size()), dst.begin());
    offset += dst.size();
  }
  return out;
}

std::vector<NodeId> ParamNodes::nodes() const {
  std::vector<NodeId> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.node);
  return out;
}

ParamNodes bind(Graph& graph, const ParamSet& params, bool differentiable) {
  ParamNodes out{params.layout(), {}};
  out.entries.reserve(params.entries().size());
  for (const auto& e : params.entries()) out.entries.push_back({e.name, e.group, graph.leaf(e.value, differentiable)});
  return out;
}

ParamSet values_of(const Graph& graph, const ParamNodes& params) {
  std::vector<ParamEntry> entries;
  entries.reserve(params.entries.size());
  for (const auto& e : params.entries) entries.push_back({e.name, e.group, graph.value(e.node)});
  return ParamSet(params.layout, std::move(entries));
}

ParamSet init(const MLPConfig& config, std::mt19937_64& rng) {
  config.validate();
  std::vector<std::size_t> widths{config.input_dim};
  widths.insert(widths.end(), config.hidden_dims.begin(), config.hidden_dims.end());
  widths.push_back(config.n_classes);

  std::vector<ParamEntry> entries;
  const std::size_t layers = widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t fan_in = widths[l], fan_out = widths[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor w(Shape{fan_in, fan_out});
    for (double& v : w.data()) v = dist(rng);
    const std::string group = l + 1 == layers ? kClassifierGroup : kEmbeddingGroup;
    const std::string prefix = "layer" + std::to_string(l);
    entries.push_back({prefix + ".weight", group, std::move(w)});
    entries.push_back({prefix + ".bias", group, Tensor(Shape{fan_out})});
  }
  return ParamSet(config, std::move(entries));
}

ParamSet init(const MLPConfig& config) {
  std::mt19937_64 rng(config.seed);
  return init(config, rng);
}

NodeId forward(Graph& graph, const ParamNodes& params, const Tensor& x) {
  const MLPConfig& cfg = params.layout;
  if (x.rank() != 2 || x.cols() != cfg.input_dim) {
    throw ShapeError("forward: expected input [B," + std::to_string(cfg.input_dim) + "], got " + to_string(x.shape()));
  }
  if (params.entries.size() != 2 * (cfg.hidden_dims.size() + 1)) {
    throw ShapeError("forward: parameter list does not match the layout");
  }
  const std::size_t batch = x.rows();
  const NodeId ones = graph.constant(Tensor(Shape{batch, 1}, 1.0));
  NodeId h = graph.constant(x);
  const std::size_t layers = params.entries.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    const NodeId w = params.entries[2 * l].node;
    const NodeId b = params.entries[2 * l + 1].node;
    const std::size_t width = graph.value(b).size();
    const NodeId bias_rows = graph.matmul(ones, graph.reshape(b, Shape{1, width}));
    h = graph.add(graph.matmul(h, w), bias_rows);
    if (l + 1 < layers) h = graph.relu(h);
  }
  return h;
}

NodeId per_sample_loss(Graph& graph, NodeId logits, std::span<const std::size_t> labels) {
  return graph.softmax_cross_entropy(logits, labels);
}

namespace {

template <typename Entry>
std::vector<std::size_t> select_impl(std::span<const Entry> entries, const std::set<std::string>& groups) {
  if (groups.empty()) throw ConfigError("subset: no groups requested");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (groups.contains(entries[i].group)) out.push_back(i);
  if (out.empty()) {
    std::string names;
    for (const auto& g : groups) names += (names.empty() ? "" : ",") + g;
    throw ConfigError("subset: no parameter entry belongs to groups {" + names + "}");
  }
  return out;
}

}  // namespace

std::vector<std::size_t> select_groups(std::span<const BoundEntry> entries, const std::set<std::string>& groups) {
  return select_impl(entries, groups);
}

std::vector<std::size_t> select_groups(std::span<const ParamEntry> entries, const std::set<std::string>& groups) {
  return select_impl(entries, groups);
}

}  // namespace cmaml::models
