#pragma once

#include <span>

#include "cmaml/autodiff.hpp"
#include "cmaml/tensor.hpp"

namespace cmaml::linalg {

inline constexpr int kMaxJacobiSweeps = 100;
inline constexpr double kJacobiRelativeTolerance = 1e-12;

// Symmetric n x n matrix. Construction symmetrizes the input as (A + A^T) / 2.
class SymMatrix {
 public:
  explicit SymMatrix(const Tensor& a);
  std::size_t dim() const { return entries_.rows(); }
  const Tensor& entries() const { return entries_; }

 private:
  Tensor entries_;
};

struct Eigen {
  Tensor values;   // ascending
  Tensor vectors;  // column i pairs with values[i]
};

// Cyclic Jacobi rotations. Converges when the off-diagonal Frobenius norm drops
// below 1e-12 * ||A||_F; throws NumericError after kMaxJacobiSweeps sweeps.
Eigen jacobi_eigen(const SymMatrix& a);

struct EigDecomposition {
  NodeId eigenvalues;  // differentiable, ascending
  Tensor vectors;      // constant
};

// Eigendecomposition of a graph node holding a square matrix. The eigenvalue
// node back-propagates d(lambda_i)/dA = v_i v_i^T, assuming distinct
// eigenvalues; degenerate pairs get that rule applied per returned vector.
EigDecomposition sym_eigen(Graph& graph, NodeId a);

// |lambda|_max / max(|lambda|_min, floor). Reporting only.
double condition_number(std::span<const double> eigenvalues, double floor);

}  // namespace cmaml::linalg
