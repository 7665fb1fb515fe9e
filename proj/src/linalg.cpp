#include "cmaml/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

#include "cmaml/error.hpp"

namespace cmaml::linalg {

SymMatrix::SymMatrix(const Tensor& a) {
  if (a.rank() != 2 || a.rows() != a.cols() || a.rows() == 0) {
    throw ShapeError("sym_eigen: expected a non-empty square matrix, got " + to_string(a.shape()));
  }
  if (!a.all_finite()) throw NumericError("sym_eigen: non-finite matrix entries");
  const std::size_t n = a.rows();
  entries_ = Tensor(a.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) entries_.at(i, j) = 0.5 * (a.at(i, j) + a.at(j, i));
}

namespace {

double off_diagonal_norm(const Tensor& a) {
  const std::size_t n = a.rows();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += a.at(i, j) * a.at(i, j);
  return std::sqrt(s);
}

void rotate(Tensor& a, Tensor& v, std::size_t p, std::size_t q) {
  const std::size_t n = a.rows();
  const double apq = a.at(p, q);
  if (apq == 0.0) return;
  const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
  double t;
  if (std::abs(theta) > 1e150) {
    t = 0.5 / theta;
  } else {
    t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
  }
  const double c = 1.0 / std::sqrt(t * t + 1.0);
  const double s = t * c;

  a.at(p, p) -= t * apq;
  a.at(q, q) += t * apq;
  a.at(p, q) = 0.0;
  a.at(q, p) = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k == p || k == q) continue;
    const double akp = a.at(k, p), akq = a.at(k, q);
    a.at(k, p) = a.at(p, k) = c * akp - s * akq;
    a.at(k, q) = a.at(q, k) = s * akp + c * akq;
  }
  for (std::size_t k = 0; k < n; ++k) {
    const double vkp = v.at(k, p), vkq = v.at(k, q);
    v.at(k, p) = c * vkp - s * vkq;
    v.at(k, q) = s * vkp + c * vkq;
  }
}

class EigenvalueBackward final : public CustomOp {
 public:
  explicit EigenvalueBackward(Tensor vectors) : vectors_(std::move(vectors)) {}

  std::string_view name() const override { return "sym-eigvals"; }

  // dL/dA = V diag(g) V^T, with diag(g) applied as a column scaling of V.
  std::vector<NodeId> backward(Graph& graph, NodeId, NodeId upstream) const override {
    const std::size_t n = vectors_.rows();
    const NodeId rows_of_g =
        graph.matmul(graph.constant(Tensor(Shape{n, 1}, 1.0)), graph.reshape(upstream, Shape{1, n}));
    const NodeId scaled = graph.mul(graph.constant(vectors_), rows_of_g);
    return {graph.matmul(scaled, graph.constant(transpose(vectors_)))};
  }

 private:
  Tensor vectors_;
};

}  // namespace

Eigen jacobi_eigen(const SymMatrix& sym) {
  Tensor a = sym.entries();
  const std::size_t n = sym.dim();
  Tensor v = Tensor::identity(n);
  const double tol = kJacobiRelativeTolerance * frobenius_norm(a);

  double off = off_diagonal_norm(a);
  int sweep = 0;
  while (off > tol) {
    if (sweep == kMaxJacobiSweeps) {
      throw NumericError("sym_eigen: Jacobi did not converge in " + std::to_string(kMaxJacobiSweeps) +
                         " sweeps, off-diagonal norm " + std::to_string(off));
    }
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) rotate(a, v, p, q);
    off = off_diagonal_norm(a);
    ++sweep;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a.at(i, i) < a.at(j, j); });

  Eigen out{Tensor(Shape{n}), Tensor(Shape{n, n})};
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t src = order[c];
    out.values[c] = a.at(src, src);
    // Sign convention: the largest-magnitude component is positive.
    std::size_t big = 0;
    for (std::size_t r = 1; r < n; ++r)
      if (std::abs(v.at(r, src)) > std::abs(v.at(big, src))) big = r;
    const double sign = v.at(big, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) out.vectors.at(r, c) = sign * v.at(r, src);
  }
  return out;
}

EigDecomposition sym_eigen(Graph& graph, NodeId a) {
  Eigen e = jacobi_eigen(SymMatrix(graph.value(a)));
  auto rule = std::make_shared<EigenvalueBackward>(e.vectors);
  const NodeId values = graph.record_custom(std::move(rule), std::span<const NodeId>(&a, 1), std::move(e.values));
  return EigDecomposition{values, std::move(e.vectors)};
}

double condition_number(std::span<const double> eigenvalues, double floor) {
  if (eigenvalues.empty()) throw ShapeError("condition_number: empty eigenvalue list");
  if (!(floor > 0.0)) throw ConfigError("condition_number: floor must be positive");
  double hi = 0.0;
  double lo = std::abs(eigenvalues[0]);
  for (double v : eigenvalues) {
    hi = std::max(hi, std::abs(v));
    lo = std::min(lo, std::abs(v));
  }
  const double denom = std::max(lo, floor);
  // All-below-floor spectra report 1, not a ratio under 1.
  return std::max(hi, denom) / denom;
}

}  // namespace cmaml::linalg
