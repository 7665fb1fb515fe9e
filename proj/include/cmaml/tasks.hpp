#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cmaml/tensor.hpp"

namespace cmaml::tasks {

// One N-way K-shot episode. Labels are episode-local: the i-th drawn class is
// label i. Rows are grouped by class in label order.
struct Task {
  Tensor support_x;
  std::vector<std::size_t> support_y;
  Tensor query_x;
  std::vector<std::size_t> query_y;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t q_queries = 0;

  void validate() const;
};

// Independent stream per (seed, index): splitmix64(seed ^ index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

struct GaussianTaskGen {
  std::size_t dim = 16;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_queries = 16;
  double mean_scale = 3.0;
  double noise_sigma = 0.5;

  void validate() const;
};

// Class centers uniform in the ball of radius mean_scale; samples are
// center + N(0, noise_sigma^2 I).
Task sample_gaussian_episode(const GaussianTaskGen& gen, std::mt19937_64& rng);

// Labeled feature rows with a class-disjoint train/val/test split.
class CsvDataset {
 public:
  CsvDataset(Tensor features, std::vector<std::string> labels, std::map<std::string, std::string> class_split);

  // CSV header must be f0..f{d-1},label; the split file lists class_id,split.
  static CsvDataset load(const std::filesystem::path& csv, const std::filesystem::path& splits);

  const Tensor& features() const { return features_; }
  std::size_t dim() const { return features_.cols(); }
  // Classes of one split in first-appearance order.
  const std::vector<std::string>& classes(const std::string& split) const;
  const std::vector<std::size_t>& rows_of(const std::string& class_id) const;

 private:
  Tensor features_;
  std::map<std::string, std::vector<std::size_t>> rows_by_class_;
  std::map<std::string, std::vector<std::string>> classes_by_split_;
};

Task sample_csv_episode(const CsvDataset& ds, const std::string& split, std::size_t n_way, std::size_t k_shot,
                        std::size_t q_queries, std::mt19937_64& rng);

// 2-D quadratic 0.5 theta^T A theta with A = R(30deg) diag(1/kappa, 1) R^T.
struct QuadraticProblem {
  Tensor a;
  Tensor theta0;
  Tensor optimum;
};

QuadraticProblem quadratic_problem(double kappa, Tensor theta0 = Tensor::vector({1.0, 1.0}));
double quadratic_loss(const QuadraticProblem& problem, const Tensor& theta);
// Gradient descent iterates theta_0..theta_steps, gradients taken by autodiff.
std::vector<Tensor> quadratic_descent(const QuadraticProblem& problem, double lr, std::size_t steps);

}  // namespace cmaml::tasks
