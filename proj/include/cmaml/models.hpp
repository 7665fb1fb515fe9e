#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cmaml/autodiff.hpp"
#include "cmaml/tensor.hpp"

namespace cmaml::models {

inline constexpr const char* kEmbeddingGroup = "emb";
inline constexpr const char* kClassifierGroup = "cls";

// Fully connected ReLU network. All layers but the last form the "emb" group,
// the last linear layer is "cls".
struct MLPConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t n_classes = 0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t parameter_count() const;
  friend bool operator==(const MLPConfig&, const MLPConfig&) = default;
};

struct ParamEntry {
  std::string name;
  std::string group;
  Tensor value;
  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

// Parameter values outside any graph (meta-initialization, checkpoints).
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(MLPConfig layout, std::vector<ParamEntry> entries);

  const MLPConfig& layout() const { return layout_; }
  std::span<const ParamEntry> entries() const { return entries_; }
  std::span<ParamEntry> entries() { return entries_; }
  const ParamEntry& entry(const std::string& name) const;
  std::size_t total_size() const;

  // Concatenation of all entries in entry order.
  std::vector<double> flatten() const;
  ParamSet unflatten(std::span<const double> flat) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  MLPConfig layout_;
  std::vector<ParamEntry> entries_;
};

struct BoundEntry {
  std::string name;
  std::string group;
  NodeId node;
};

// Parameters living as nodes of one Graph.
struct ParamNodes {
  MLPConfig layout;
  std::vector<BoundEntry> entries;

  std::vector<NodeId> nodes() const;
};

ParamNodes bind(Graph& graph, const ParamSet& params, bool differentiable = true);
ParamSet values_of(const Graph& graph, const ParamNodes& params);

// Glorot-uniform weights, zero biases.
ParamSet init(const MLPConfig& config, std::mt19937_64& rng);
ParamSet init(const MLPConfig& config);

// x: [B, input_dim] -> logits [B, n_classes].
NodeId forward(Graph& graph, const ParamNodes& params, const Tensor& x);

// Softmax cross-entropy per row, shape [B].
NodeId per_sample_loss(Graph& graph, NodeId logits, std::span<const std::size_t> labels);

// Indices of entries whose group is in `groups`, in entry order. Throws if
// nothing matches.
std::vector<std::size_t> select_groups(std::span<const BoundEntry> entries, const std::set<std::string>& groups);
std::vector<std::size_t> select_groups(std::span<const ParamEntry> entries, const std::set<std::string>& groups);

}  // namespace cmaml::models
