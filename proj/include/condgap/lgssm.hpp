#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "condgap/distributions.hpp"
#include "condgap/rng.hpp"

// Linear-Gaussian state-space model
//
//   z_0 ~ N(m0, P0),  z_t = A z_{t-1} + w_t,  w_t ~ N(0, Q)
//   x_t = H z_t + v_t,  v_t ~ N(0, R),  t = 1..T
//
// with diagonal Q and R. Beliefs carry full covariances.

namespace condgap {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct LgssmParams {
  MatrixXd A;
  VectorXd q_diag;
  MatrixXd H;
  VectorXd r_diag;
  VectorXd m0;
  MatrixXd P0;
  std::size_t T = 1;

  Eigen::Index n_latent() const { return A.rows(); }
  Eigen::Index n_obs() const { return H.rows(); }
  MatrixXd Q() const { return q_diag.asDiagonal(); }
  MatrixXd R() const { return r_diag.asDiagonal(); }

  /// Scalar model with every matrix 1x1.
  static LgssmParams scalar(double a, double q, double h, double r, double m0, double p0, std::size_t T) {
    LgssmParams p;
    p.A = MatrixXd::Constant(1, 1, a);
    p.q_diag = VectorXd::Constant(1, q);
    p.H = MatrixXd::Constant(1, 1, h);
    p.r_diag = VectorXd::Constant(1, r);
    p.m0 = VectorXd::Constant(1, m0);
    p.P0 = MatrixXd::Constant(1, 1, p0);
    p.T = T;
    return p;
  }

  void validate() const {
    const auto n = A.rows();
    auto fail = [](const std::string& what) { throw std::invalid_argument("LgssmParams: " + what); };
    if (A.cols() != n || n == 0) fail("A must be square and non-empty");
    if (q_diag.size() != n) fail("Q has " + std::to_string(q_diag.size()) + " entries, expected " + std::to_string(n));
    if (H.cols() != n || H.rows() == 0) fail("H must have " + std::to_string(n) + " columns");
    if (r_diag.size() != H.rows()) fail("R size does not match H rows");
    if (m0.size() != n || P0.rows() != n || P0.cols() != n) fail("initial state dims do not match A");
    if ((q_diag.array() < 0).any() || (r_diag.array() < 0).any()) fail("noise variances must be >= 0");
    if (!P0.isApprox(P0.transpose(), 1e-12)) fail("P0 must be symmetric");
    if (T == 0) fail("T must be >= 1");
  }
};

struct GaussianBelief {
  VectorXd mean;
  MatrixXd cov;
};

using Sequence = std::vector<VectorXd>;

namespace detail {

inline MatrixXd symmetrize(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

/// Symmetric square root that tolerates PSD (singular) input.
inline MatrixXd psd_sqrt(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m));
  const VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline VectorXd standard_normal(Eigen::Index n, Rng& rng) {
  VectorXd e(n);
  for (Eigen::Index i = 0; i < n; ++i) e(i) = rng.normal();
  return e;
}

}  // namespace detail

struct FilterResult {
  std::vector<GaussianBelief> predicted;  ///< p(z_t | x_{1:t-1})
  std::vector<GaussianBelief> filtered;   ///< p(z_t | x_{1:t})
  double log_likelihood = 0.0;            ///< log p(x_{1:T})
};

/// Predict/update recursion with Joseph-form covariance update.
inline FilterResult kalman_filter(const LgssmParams& p, const Sequence& obs) {
  p.validate();
  if (obs.size() != p.T) {
    throw std::invalid_argument("kalman_filter: got " + std::to_string(obs.size()) + " observations, T = " + std::to_string(p.T));
  }
  const auto n = p.n_latent();
  const MatrixXd I = MatrixXd::Identity(n, n);
  const MatrixXd R = p.R();
  FilterResult out;
  VectorXd m = p.m0;
  MatrixXd P = p.P0;
  for (std::size_t t = 0; t < p.T; ++t) {
    m = p.A * m;
    P = detail::symmetrize(p.A * P * p.A.transpose() + p.Q());
    out.predicted.push_back({m, P});
    if (obs[t].size() != p.n_obs()) throw std::invalid_argument("kalman_filter: observation " + std::to_string(t) + " has wrong size");
    const VectorXd innovation = obs[t] - p.H * m;
    const MatrixXd S = detail::symmetrize(p.H * P * p.H.transpose() + R);
    Eigen::LLT<MatrixXd> llt(S);
    if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 0.0) {
      throw std::runtime_error("kalman_filter: singular innovation covariance at t=" + std::to_string(t + 1));
    }
    const MatrixXd K = llt.solve(p.H * P).transpose();
    m = m + K * innovation;
    const MatrixXd IKH = I - K * p.H;
    P = detail::symmetrize(IKH * P * IKH.transpose() + K * R * K.transpose());
    out.filtered.push_back({m, P});
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    out.log_likelihood += -0.5 * (static_cast<double>(p.n_obs()) * kLog2Pi + logdet + innovation.dot(llt.solve(innovation)));
  }
  return out;
}

/// Rauch-Tung-Striebel backward pass: p(z_t | x_{1:T}). The smoother gain
/// uses a least-squares solve so singular predicted covariances (Q = 0 and
/// a collapsed filter) are handled.
inline std::vector<GaussianBelief> rts_smoother(const LgssmParams& p, const FilterResult& f) {
  const std::size_t T = f.filtered.size();
  std::vector<GaussianBelief> out(T);
  if (T == 0) return out;
  out[T - 1] = f.filtered[T - 1];
  for (std::size_t t = T - 1; t-- > 0;) {
    const GaussianBelief& fb = f.filtered[t];
    const GaussianBelief& pred = f.predicted[t + 1];
    const MatrixXd G = pred.cov.completeOrthogonalDecomposition().solve(p.A * fb.cov).transpose();
    out[t].mean = fb.mean + G * (out[t + 1].mean - pred.mean);
    out[t].cov = detail::symmetrize(fb.cov + G * (out[t + 1].cov - pred.cov) * G.transpose());
  }
  return out;
}

struct LgssmSample {
  Sequence latents;
  Sequence observations;
};

inline LgssmSample lgssm_sample(const LgssmParams& p, Rng& rng) {
  p.validate();
  const MatrixXd P0_sqrt = detail::psd_sqrt(p.P0);
  const VectorXd q_sd = p.q_diag.cwiseSqrt(), r_sd = p.r_diag.cwiseSqrt();
  LgssmSample s;
  VectorXd z = p.m0 + P0_sqrt * detail::standard_normal(p.n_latent(), rng);
  for (std::size_t t = 0; t < p.T; ++t) {
    z = p.A * z + q_sd.cwiseProduct(detail::standard_normal(p.n_latent(), rng));
    s.latents.push_back(z);
    s.observations.push_back(p.H * z + r_sd.cwiseProduct(detail::standard_normal(p.n_obs(), rng)));
  }
  return s;
}

/// Best single Gaussian for z_t given only x_{1:t}, shared over all
/// futures x_{t+1:T}: the smoother covariance does not depend on the data
/// and the smoother mean averages to the filter mean, so the answer is
/// N(filter mean, smoother covariance).
inline GaussianBelief optimal_filter_conditioned_posterior(const LgssmParams& p, const Sequence& obs_prefix) {
  const std::size_t t = obs_prefix.size();
  if (t == 0 || t > p.T) throw std::invalid_argument("optimal_filter_conditioned_posterior: prefix length must be in [1, T]");
  Sequence padded = obs_prefix;
  padded.resize(p.T, VectorXd::Zero(p.n_obs()));
  const auto f = kalman_filter(p, padded);
  const auto s = rts_smoother(p, f);
  return {f.filtered[t - 1].mean, s[t - 1].cov};
}

/// Backward information filter: p(x_{t:T} | z_t) ∝ exp(−½ zᵀ L_t z + zᵀ ℓ_t).
/// Index t-1 holds step t; the `linear` terms are empty if no data given.
struct BackwardInformation {
  std::vector<MatrixXd> precision;
  std::vector<VectorXd> linear;
};

inline BackwardInformation backward_information(const LgssmParams& p, std::size_t horizon, const Sequence* obs = nullptr) {
  const auto n = p.n_latent();
  const MatrixXd I = MatrixXd::Identity(n, n);
  const MatrixXd Q = p.Q();
  const MatrixXd HtRinv = p.H.transpose() * p.r_diag.cwiseInverse().asDiagonal();
  const MatrixXd obs_info = HtRinv * p.H;
  BackwardInformation b;
  b.precision.resize(horizon);
  if (obs) b.linear.resize(horizon);
  for (std::size_t t = horizon; t-- > 0;) {
    MatrixXd L = obs_info;
    VectorXd l;
    if (obs) l = HtRinv * (*obs)[t];
    if (t + 1 < horizon) {
      const MatrixXd& Ln = b.precision[t + 1];
      L += p.A.transpose() * Ln * (I + Q * Ln).inverse() * p.A;
      if (obs) l += p.A.transpose() * (I + Ln * Q).inverse() * b.linear[t + 1];
    }
    b.precision[t] = detail::symmetrize(L);
    if (obs) b.linear[t] = l;
  }
  return b;
}

/// N(A z_prev, Q) combined with information (L, ℓ) about z_t, written
/// without Q⁻¹ so Q may be singular.
inline GaussianBelief condition_transition(const LgssmParams& p, const VectorXd& z_prev, const MatrixXd& L,
                                           const VectorXd& l) {
  const auto n = p.n_latent();
  const MatrixXd Q = p.Q();
  const MatrixXd M = (MatrixXd::Identity(n, n) + Q * L).inverse();
  return {M * (p.A * z_prev + Q * l), detail::symmetrize(M * Q)};
}

/// p(z_t | z_{t-1}, x_{t:T}) for a whole observed sequence, t ≥ 2.
inline GaussianBelief full_step_posterior(const LgssmParams& p, const BackwardInformation& info, std::size_t t,
                                          const VectorXd& z_prev) {
  return condition_transition(p, z_prev, info.precision.at(t - 1), info.linear.at(t - 1));
}

/// p(z_t | z_{t-1}, x_t), t ≥ 2.
inline GaussianBelief partial_step_posterior(const LgssmParams& p, const VectorXd& z_prev, const VectorXd& x_t) {
  const MatrixXd HtRinv = p.H.transpose() * p.r_diag.cwiseInverse().asDiagonal();
  return condition_transition(p, z_prev, HtRinv * p.H, HtRinv * x_t);
}

struct LgssmGapOptions {
  /// Observations x_{1:k} visible to the initial-state posterior; 0 = T.
  std::size_t initial_peek = 0;
};

struct LgssmGapReport {
  /// Index 0: initial state; index t-1: step t.
  std::vector<double> per_step;
  double total = 0.0;
  /// Marginal variant: KL(N(filter mean, smoother cov) ‖ smoother), expected.
  std::vector<double> marginal_per_step;
  double marginal_total = 0.0;
};

namespace detail {

/// ½ (tr(S_full⁻¹ S_partial) − n) on the support of `support`'s diagonal.
inline double gaussian_gap_on_support(const MatrixXd& full, const MatrixXd& partial, const VectorXd& support) {
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < support.size(); ++i)
    if (support(i) > 0.0) idx.push_back(i);
  if (idx.empty()) return 0.0;
  const auto k = static_cast<Eigen::Index>(idx.size());
  MatrixXd F(k, k), Pm(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) {
      F(a, b) = full(idx[a], idx[b]);
      Pm(a, b) = partial(idx[a], idx[b]);
    }
  return std::max(0.0, 0.5 * (F.ldlt().solve(Pm).trace() - static_cast<double>(k)));
}

}  // namespace detail

/// Expected conditioning gap under p(x), term by term in
///   KL(q(z_1 | x_{1:k}) ‖ p(z_1 | x_{1:T})) + Σ_{t≥2} KL(q(z_t | z_{t-1}, x_{1:t}) ‖ p(z_t | z_{t-1}, x_{t:T}))
/// with each q the optimal shared posterior. For Gaussians the shared
/// optimum has the full covariance and the partial mean, so each term is
/// ½ (tr(S_full⁻¹ S_partial) − n), independent of the data.
inline LgssmGapReport lgssm_conditioning_gap(const LgssmParams& p, const LgssmGapOptions& opt = {}) {
  p.validate();
  if ((p.r_diag.array() <= 0).any()) throw std::invalid_argument("lgssm_conditioning_gap: R must be positive definite");
  const auto n = p.n_latent();
  const MatrixXd I = MatrixXd::Identity(n, n);
  const std::size_t k = opt.initial_peek == 0 ? p.T : std::min(opt.initial_peek, p.T);
  const auto full = backward_information(p, p.T);
  const MatrixXd HtRinvH = p.H.transpose() * p.r_diag.cwiseInverse().asDiagonal() * p.H;

  LgssmGapReport r;
  r.per_step.resize(p.T, 0.0);
  {
    const auto peek = backward_information(p, k);
    const MatrixXd P1 = detail::symmetrize(p.A * p.P0 * p.A.transpose() + p.Q());
    const MatrixXd s_full = (I + P1 * full.precision[0]).inverse() * P1;
    const MatrixXd s_part = (I + P1 * peek.precision[0]).inverse() * P1;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(P1);
    // rotate into the prior's eigenbasis so its support is axis-aligned
    const MatrixXd V = es.eigenvectors();
    r.per_step[0] = detail::gaussian_gap_on_support(V.transpose() * detail::symmetrize(s_full) * V,
                                                    V.transpose() * detail::symmetrize(s_part) * V,
                                                    (es.eigenvalues().array() > 1e-14 * std::max(1.0, P1.trace())).cast<double>());
  }
  const MatrixXd Q = p.Q();
  const MatrixXd s_part = (I + Q * HtRinvH).inverse() * Q;
  for (std::size_t t = 2; t <= p.T; ++t) {
    const MatrixXd s_full = (I + Q * full.precision[t - 1]).inverse() * Q;
    r.per_step[t - 1] = detail::gaussian_gap_on_support(detail::symmetrize(s_full), detail::symmetrize(s_part), p.q_diag);
  }
  for (double g : r.per_step) r.total += g;

  // marginal variant; covariances do not depend on the data
  const auto f = kalman_filter(p, Sequence(p.T, VectorXd::Zero(p.n_obs())));
  const auto s = rts_smoother(p, f);
  r.marginal_per_step.resize(p.T);
  for (std::size_t t = 0; t < p.T; ++t) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(s[t].cov);
    const MatrixXd V = es.eigenvectors();
    r.marginal_per_step[t] = detail::gaussian_gap_on_support(
        V.transpose() * s[t].cov * V, V.transpose() * f.filtered[t].cov * V,
        (es.eigenvalues().array() > 1e-14 * std::max(1.0, s[t].cov.trace())).cast<double>());
    r.marginal_total += r.marginal_per_step[t];
  }
  return r;
}

}  // namespace condgap
