#pragma once

// LGSSM test oracles: random models, brute-force joint conditioning, and a
// Monte Carlo estimate of the realised stepwise conditioning gap.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "condgap/lgssm.hpp"
#include "support/joint_gaussian.hpp"

namespace condgap::testing {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline LgssmParams random_model(Rng& rng, Eigen::Index n, Eigen::Index m, std::size_t T) {
  LgssmParams p;
  p.A = MatrixXd(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) p.A(i, j) = rng.uniform(-0.6, 0.6);
  p.H = MatrixXd(m, n);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) p.H(i, j) = rng.uniform(-1, 1);
  p.q_diag = VectorXd(n);
  for (Eigen::Index i = 0; i < n; ++i) p.q_diag(i) = rng.uniform(0.1, 1.0);
  p.r_diag = VectorXd(m);
  for (Eigen::Index i = 0; i < m; ++i) p.r_diag(i) = rng.uniform(0.1, 1.0);
  p.m0 = VectorXd(n);
  for (Eigen::Index i = 0; i < n; ++i) p.m0(i) = rng.uniform(-1, 1);
  p.P0 = MatrixXd::Identity(n, n) * rng.uniform(0.2, 1.5);
  p.T = T;
  return p;
}

inline JointGaussian joint_from_start(const LgssmParams& p, std::size_t L) {
  const VectorXd mu1 = p.A * p.m0;
  const MatrixXd s1 = p.A * p.P0 * p.A.transpose() + p.Q();
  return build_joint(p.A, p.Q(), p.H, p.R(), mu1, s1, static_cast<Eigen::Index>(L));
}

inline VectorXd stack(const Sequence& xs, std::size_t begin, std::size_t end) {
  const Eigen::Index m = xs.front().size();
  VectorXd out(static_cast<Eigen::Index>(end - begin) * m);
  for (std::size_t t = begin; t < end; ++t) out.segment(static_cast<Eigen::Index>(t - begin) * m, m) = xs[t];
  return out;
}

inline std::vector<Eigen::Index> x_indices(const JointGaussian& j, std::size_t begin, std::size_t end) {
  std::vector<Eigen::Index> out;
  for (std::size_t t = begin; t < end; ++t)
    for (Eigen::Index k = 0; k < j.m; ++k) out.push_back(j.x_index(static_cast<Eigen::Index>(t)) + k);
  return out;
}

inline double log_normal_pdf(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
  const auto ldlt = cov.ldlt();
  const VectorXd d = x - mean;
  return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + ldlt.vectorD().array().log().sum() + d.dot(ldlt.solve(d)));
}

// ½ dᵀ S⁻¹ d restricted to indices where `support` > 0.
inline double mean_shift_kl(const VectorXd& d, const MatrixXd& S, const VectorXd& support) {
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < support.size(); ++i)
    if (support(i) > 0) idx.push_back(i);
  const auto k = static_cast<Eigen::Index>(idx.size());
  MatrixXd Ss(k, k);
  VectorXd ds(k);
  for (Eigen::Index a = 0; a < k; ++a) {
    ds(a) = d(idx[a]);
    for (Eigen::Index b = 0; b < k; ++b) Ss(a, b) = S(idx[a], idx[b]);
  }
  return 0.5 * ds.dot(Ss.ldlt().solve(ds));
}

// Realised Σ_t KL(w_t ‖ p_t) for one sampled sequence, every conditional
// obtained by brute-force joint conditioning.
inline double oracle_realised_gap(const LgssmParams& p, const LgssmSample& s, std::size_t peek) {
  double total = 0;
  {
    const auto j = joint_from_start(p, p.T);
    const auto full = condition(j, range_indices(0, j.n), x_indices(j, 0, p.T), stack(s.observations, 0, p.T));
    const auto part = condition(j, range_indices(0, j.n), x_indices(j, 0, peek), stack(s.observations, 0, peek));
    total += mean_shift_kl(part.mean - full.mean, full.cov, VectorXd::Ones(j.n));
  }
  for (std::size_t t = 2; t <= p.T; ++t) {
    const VectorXd mu = p.A * s.latents[t - 2];
    const auto j = build_joint(p.A, p.Q(), p.H, p.R(), mu, p.Q(), static_cast<Eigen::Index>(p.T - t + 1));
    const Sequence future(s.observations.begin() + static_cast<long>(t - 1), s.observations.end());
    const auto full = condition(j, range_indices(0, j.n), x_indices(j, 0, future.size()), stack(future, 0, future.size()));
    const auto part = condition(j, range_indices(0, j.n), x_indices(j, 0, 1), stack(future, 0, 1));
    total += mean_shift_kl(part.mean - full.mean, full.cov, p.q_diag);
  }
  return total;
}

struct McEstimate {
  double mean, se;
};

inline McEstimate mc_gap(const LgssmParams& p, std::size_t peek, int n, std::uint64_t seed) {
  Rng rng(seed);
  double acc = 0, acc2 = 0;
  for (int i = 0; i < n; ++i) {
    const double g = oracle_realised_gap(p, lgssm_sample(p, rng), peek);
    acc += g;
    acc2 += g * g;
  }
  const double mean = acc / n;
  return {mean, std::sqrt(std::max(acc2 / n - mean * mean, 0.0) / n)};
}

}  // namespace condgap::testing
