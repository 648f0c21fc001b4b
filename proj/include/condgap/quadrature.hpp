#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace condgap {

/// Gauss-Hermite rule for expectations under N(0, 1):
///   E[f(ε)] ≈ Σ weights[i] · f(nodes[i]),  Σ weights = 1.
/// Exact for polynomials of degree ≤ 2·order − 1.
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t order() const noexcept { return nodes.size(); }
};

/// Golub-Welsch: eigen-decomposition of the Jacobi matrix of the
/// probabilists' Hermite polynomials (off-diagonal √k).
inline GaussHermiteRule gauss_hermite(std::size_t order) {
  if (order == 0) throw std::invalid_argument("gauss_hermite: order must be >= 1");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(order), static_cast<Eigen::Index>(order));
  for (std::size_t k = 1; k < order; ++k) {
    const double off = std::sqrt(static_cast<double>(k));
    jacobi(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(k)) = off;
    jacobi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k - 1)) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  GaussHermiteRule rule;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  for (std::size_t i = 0; i < order; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    rule.nodes[i] = solver.eigenvalues()(ii);
    const double v0 = solver.eigenvectors()(0, ii);
    rule.weights[i] = v0 * v0;
  }
  // symmetrize to remove eigen-solver round-off
  for (std::size_t i = 0; i < order / 2; ++i) {
    const std::size_t j = order - 1 - i;
    const double x = 0.5 * (rule.nodes[j] - rule.nodes[i]);
    const double w = 0.5 * (rule.weights[i] + rule.weights[j]);
    rule.nodes[i] = -x;
    rule.nodes[j] = x;
    rule.weights[i] = rule.weights[j] = w;
  }
  if (order % 2 == 1) rule.nodes[order / 2] = 0.0;
  return rule;
}

/// E[f(x)] for x ~ N(mean, var).
template <class F>
double expect_normal(F&& f, double mean, double var, const GaussHermiteRule& rule) {
  const double sd = std::sqrt(var);
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.order(); ++i) acc += rule.weights[i] * f(mean + sd * rule.nodes[i]);
  return acc;
}

/// E[f(x, y)] for independent x ~ N(mx, vx), y ~ N(my, vy).
template <class F>
double expect_normal_2d(F&& f, double mx, double vx, double my, double vy, const GaussHermiteRule& rule) {
  const double sx = std::sqrt(vx);
  const double sy = std::sqrt(vy);
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.order(); ++i) {
    const double x = mx + sx * rule.nodes[i];
    double inner = 0.0;
    for (std::size_t j = 0; j < rule.order(); ++j) inner += rule.weights[j] * f(x, my + sy * rule.nodes[j]);
    acc += rule.weights[i] * inner;
  }
  return acc;
}

}  // namespace condgap
