#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "condgap/lgssm.hpp"
#include "condgap/rng.hpp"
#include "condgap/tensor.hpp"
#include "condgap/vssm.hpp"

// Bootstrap particle filter and prefix sampling. Particles are [N, n_latent]
// tensors; observation and condition rows are plain vectors.

namespace condgap {

using Row = std::vector<double>;

/// Generative model as seen by the filter: prior over z_1, transition
/// sampling, observation log-density and observation sampling.
class SmcModel {
 public:
  virtual ~SmcModel() = default;
  virtual std::size_t n_latent() const = 0;
  virtual std::size_t n_obs() const = 0;
  virtual Tensor sample_initial(std::size_t n, Rng& rng) const = 0;
  /// z_t given z_{t-1}; `u_prev` is u_{t-1} (empty when unconditioned).
  virtual Tensor propagate(const Tensor& z_prev, const Row& u_prev, Rng& rng) const = 0;
  virtual std::vector<double> log_likelihood(const Tensor& z, const Row& x) const = 0;
  virtual Tensor sample_observation(const Tensor& z, Rng& rng) const = 0;
};

class VssmSmcModel final : public SmcModel {
 public:
  explicit VssmSmcModel(const Vssm& model) : m_(model) {}

  std::size_t n_latent() const override { return m_.config().n_latent; }
  std::size_t n_obs() const override { return m_.config().n_obs; }

  Tensor sample_initial(std::size_t n, Rng& rng) const override {
    NoGradGuard g;
    return m_.initial_prior().sample(n, rng).z.value();
  }

  Tensor propagate(const Tensor& z_prev, const Row& u_prev, Rng& rng) const override {
    NoGradGuard g;
    const std::size_t N = z_prev.rows();
    const Node z = Node::constant(z_prev);
    const Node eps = Node::constant(Tensor::randn(Shape{N, n_latent()}, rng));
    if (m_.config().n_cond == 0) return m_.transition_step(z, nullptr, eps).value();
    if (u_prev.size() != m_.config().n_cond) throw std::invalid_argument("smc: condition width mismatch");
    const Node u = repeat(u_prev, N);
    return m_.transition_step(z, &u, eps).value();
  }

  std::vector<double> log_likelihood(const Tensor& z, const Row& x) const override {
    NoGradGuard g;
    const Tensor lp = m_.emission_log_prob_rows(Node::constant(z), repeat(x, z.rows())).value();
    return lp.storage();
  }

  Tensor sample_observation(const Tensor& z, Rng& rng) const override {
    NoGradGuard g;
    return m_.sample_emission(m_.emission(Node::constant(z)), rng);
  }

 private:
  static Node repeat(const Row& row, std::size_t n) {
    Tensor t(Shape{n, row.size()});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < row.size(); ++j) t.at(i, j) = row[j];
    return Node::constant(std::move(t));
  }

  const Vssm& m_;
};

/// Linear-Gaussian model in the z_0 ~ N(m0, P0) convention: z_1 is one
/// transition away from z_0.
class LgssmSmcModel final : public SmcModel {
 public:
  explicit LgssmSmcModel(LgssmParams p) : p_(std::move(p)) {
    p_.validate();
    P0_sqrt_ = detail::psd_sqrt(p_.P0);
  }

  std::size_t n_latent() const override { return static_cast<std::size_t>(p_.n_latent()); }
  std::size_t n_obs() const override { return static_cast<std::size_t>(p_.n_obs()); }

  Tensor sample_initial(std::size_t n, Rng& rng) const override {
    Tensor z0(Shape{n, n_latent()});
    for (std::size_t i = 0; i < n; ++i) {
      const VectorXd v = p_.m0 + P0_sqrt_ * detail::standard_normal(p_.n_latent(), rng);
      for (std::size_t j = 0; j < n_latent(); ++j) z0.at(i, j) = v(static_cast<Eigen::Index>(j));
    }
    return propagate(z0, {}, rng);
  }

  Tensor propagate(const Tensor& z_prev, const Row&, Rng& rng) const override {
    const std::size_t N = z_prev.rows(), n = n_latent();
    Tensor out(Shape{N, n});
    for (std::size_t i = 0; i < N; ++i) {
      VectorXd z(static_cast<Eigen::Index>(n));
      for (std::size_t j = 0; j < n; ++j) z(static_cast<Eigen::Index>(j)) = z_prev.at(i, j);
      const VectorXd next = p_.A * z + p_.q_diag.cwiseSqrt().cwiseProduct(detail::standard_normal(p_.n_latent(), rng));
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) = next(static_cast<Eigen::Index>(j));
    }
    return out;
  }

  std::vector<double> log_likelihood(const Tensor& z, const Row& x) const override {
    const std::size_t N = z.rows(), n = n_latent(), m = n_obs();
    std::vector<double> out(N);
    for (std::size_t i = 0; i < N; ++i) {
      double lp = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += p_.H(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) * z.at(i, j);
        const double r = p_.r_diag(static_cast<Eigen::Index>(k));
        const double d = x.at(k) - mean;
        lp += -0.5 * (kLog2Pi + std::log(r) + d * d / r);
      }
      out[i] = lp;
    }
    return out;
  }

  Tensor sample_observation(const Tensor& z, Rng& rng) const override {
    const std::size_t N = z.rows(), n = n_latent(), m = n_obs();
    Tensor x(Shape{N, m});
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = 0; k < m; ++k) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += p_.H(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) * z.at(i, j);
        x.at(i, k) = mean + std::sqrt(p_.r_diag(static_cast<Eigen::Index>(k))) * rng.normal();
      }
    return x;
  }

  const LgssmParams& params() const noexcept { return p_; }

 private:
  LgssmParams p_;
  MatrixXd P0_sqrt_;
};

// ---------------------------------------------------------------------------

inline double log_sum_exp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double a : v) mx = std::max(mx, a);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double a : v) s += std::exp(a - mx);
  return mx + std::log(s);
}

inline std::vector<double> normalized_weights(const std::vector<double>& log_weights) {
  const double lse = log_sum_exp(log_weights);
  if (!std::isfinite(lse)) throw std::invalid_argument("normalized_weights: no finite log weight");
  std::vector<double> w(log_weights.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_weights[i] - lse);
  return w;
}

inline double effective_sample_size(const std::vector<double>& log_weights) {
  double s2 = 0.0;
  for (double w : normalized_weights(log_weights)) s2 += w * w;
  return 1.0 / s2;
}

struct ParticleSet {
  Tensor particles;                  // [N, n_latent]
  std::vector<double> log_weights;   // unnormalised
  double ess = 0.0;
  double log_evidence_increment = 0.0;  // log p̂(x_t | x_{1:t-1})

  std::size_t size() const noexcept { return log_weights.size(); }

  std::vector<double> weights() const { return normalized_weights(log_weights); }

  /// Weighted mean and variance per latent dimension.
  std::pair<std::vector<double>, std::vector<double>> moments() const {
    const auto w = weights();
    const std::size_t n = particles.cols();
    std::vector<double> mean(n, 0.0), var(n, 0.0);
    for (std::size_t i = 0; i < w.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) mean[j] += w[i] * particles.at(i, j);
    for (std::size_t i = 0; i < w.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double d = particles.at(i, j) - mean[j];
        var[j] += w[i] * d * d;
      }
    return {mean, var};
  }
};

/// Systematic resampling: one uniform offset, N evenly spaced points on the
/// weight CDF. Index i appears floor(N w_i) or ceil(N w_i) times.
inline std::vector<std::size_t> systematic_resample(const std::vector<double>& log_weights, Rng& rng,
                                                    std::size_t n = 0) {
  if (log_weights.empty()) throw std::invalid_argument("systematic_resample: no weights");
  if (n == 0) n = log_weights.size();
  const auto w = normalized_weights(log_weights);
  std::vector<std::size_t> idx(n);
  const double u0 = rng.uniform() / static_cast<double>(n);
  double cdf = w[0];
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = u0 + static_cast<double>(i) / static_cast<double>(n);
    while (u > cdf && j + 1 < w.size()) cdf += w[++j];
    idx[i] = j;
  }
  return idx;
}

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  const std::size_t c = t.cols();
  Tensor out(Shape{idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = t.at(idx[i], j);
  return out;
}

/// Weighted particle sets for p(z_t | x_{1:t}), t = 1..len(x). Particles are
/// proposed from the transition and weighted by the emission; the set is
/// resampled before propagation whenever ESS < threshold · N.
inline std::vector<ParticleSet> bootstrap_filter(const SmcModel& model, const std::vector<Row>& x,
                                                 const std::vector<Row>& u, std::size_t n_particles, Rng& rng,
                                                 double resample_threshold = 0.5) {
  if (n_particles < 2) throw std::invalid_argument("bootstrap_filter: need at least 2 particles");
  if (x.empty()) throw std::invalid_argument("bootstrap_filter: empty observation prefix");
  if (!u.empty() && u.size() < x.size()) throw std::invalid_argument("bootstrap_filter: u shorter than x");
  std::vector<ParticleSet> out;
  Tensor z;
  std::vector<double> logw(n_particles, 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    if (t == 0) {
      z = model.sample_initial(n_particles, rng);
    } else {
      const ParticleSet& prev = out.back();
      z = prev.particles;
      logw = prev.log_weights;
      if (prev.ess < resample_threshold * static_cast<double>(n_particles)) {
        z = gather_rows(z, systematic_resample(logw, rng));
        std::fill(logw.begin(), logw.end(), 0.0);
      }
      z = model.propagate(z, u.empty() ? Row{} : u[t - 1], rng);
    }
    const double before = log_sum_exp(logw);
    const auto ll = model.log_likelihood(z, x[t]);
    bool any = false;
    for (std::size_t i = 0; i < n_particles; ++i) {
      if (std::isnan(ll[i])) throw std::runtime_error("bootstrap_filter: NaN likelihood at t=" + std::to_string(t + 1));
      logw[i] += ll[i];
      any = any || std::isfinite(logw[i]);
    }
    if (!any) throw std::runtime_error("bootstrap_filter: all particle weights are zero at t=" + std::to_string(t + 1));
    ParticleSet s;
    s.particles = z;
    s.log_weights = logw;
    s.ess = effective_sample_size(logw);
    s.log_evidence_increment = log_sum_exp(logw) - before;
    out.push_back(std::move(s));
  }
  return out;
}

/// Futures x̂_{t+1..t+h}: an ancestor drawn ∝ weight per future, then
/// ancestral sampling. `u` holds u_t..u_{t+h-1} (empty when unconditioned).
/// Result: futures[i][k] is the observation k+1 steps ahead.
inline std::vector<std::vector<Row>> prefix_sample(const SmcModel& model, const ParticleSet& set, std::size_t horizon,
                                                   const std::vector<Row>& u, std::size_t n_futures, Rng& rng) {
  if (set.size() == 0) throw std::invalid_argument("prefix_sample: empty particle set");
  if (!u.empty() && u.size() < horizon) throw std::invalid_argument("prefix_sample: u shorter than horizon");
  const auto w = set.weights();
  std::vector<double> cdf(w.size());
  std::partial_sum(w.begin(), w.end(), cdf.begin());
  std::vector<std::size_t> anc(n_futures);
  for (auto& a : anc) {
    const double r = rng.uniform() * cdf.back();
    a = std::min<std::size_t>(static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin()),
                              w.size() - 1);
  }
  Tensor z = gather_rows(set.particles, anc);
  std::vector<std::vector<Row>> futures(n_futures);
  for (std::size_t k = 0; k < horizon; ++k) {
    z = model.propagate(z, u.empty() ? Row{} : u[k], rng);
    const Tensor x = model.sample_observation(z, rng);
    for (std::size_t i = 0; i < n_futures; ++i) {
      Row row(x.cols());
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = x.at(i, j);
      futures[i].push_back(std::move(row));
    }
  }
  return futures;
}

// ---------------------------------------------------------------------------
// posterior-predictive check on the final observation

/// Silverman's rule of thumb, 0.9 · min(sd, IQR / 1.34) · n^(−1/5), with a
/// tiny floor so a degenerate sample still gives a usable kernel.
inline double silverman_bandwidth(std::vector<double> v) {
  const std::size_t n = v.size();
  if (n < 2) throw std::invalid_argument("silverman_bandwidth: need >= 2 samples");
  double mean = 0.0;
  for (double a : v) mean += a / static_cast<double>(n);
  double ss = 0.0;
  for (double a : v) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  std::sort(v.begin(), v.end());
  auto quantile = [&](double p) {
    const double pos = p * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, n - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  const double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  const double floor = 1e-6 * std::max(1.0, std::abs(mean));
  return std::max(h, floor);
}

inline double kde_log_density(const std::vector<double>& samples, double bandwidth, double at) {
  std::vector<double> terms(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double d = (at - samples[i]) / bandwidth;
    terms[i] = -0.5 * d * d;
  }
  return log_sum_exp(terms) - std::log(static_cast<double>(samples.size()) * bandwidth) -
         0.5 * std::log(2.0 * std::numbers::pi);
}

struct PpcDimension {
  double bandwidth = 0.0;
  double log_density_at_truth = 0.0;
  std::vector<double> grid;
  std::vector<double> density;
};

struct PpcResult {
  double log_density_at_truth = 0.0;  // sum over dimensions
  std::vector<PpcDimension> dims;
};

/// Per-dimension Gaussian KDE of the final futures, evaluated at the truth
/// and on an evenly spaced grid covering samples and truth ± 3 bandwidths.
inline PpcResult ppc_final_density(const std::vector<Row>& final_values, const Row& truth, std::size_t grid_points = 101) {
  if (final_values.size() < 30) throw std::invalid_argument("ppc_final_density: need at least 30 futures");
  if (grid_points < 2) throw std::invalid_argument("ppc_final_density: need at least 2 grid points");
  const std::size_t d = truth.size();
  PpcResult out;
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> v(final_values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = final_values[i].at(j);
    PpcDimension dim;
    dim.bandwidth = silverman_bandwidth(v);
    dim.log_density_at_truth = kde_log_density(v, dim.bandwidth, truth[j]);
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    const double lo = std::min(*mn, truth[j]) - 3.0 * dim.bandwidth;
    const double hi = std::max(*mx, truth[j]) + 3.0 * dim.bandwidth;
    for (std::size_t g = 0; g < grid_points; ++g) {
      const double xg = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid_points - 1);
      dim.grid.push_back(xg);
      dim.density.push_back(std::exp(kde_log_density(v, dim.bandwidth, xg)));
    }
    out.log_density_at_truth += dim.log_density_at_truth;
    out.dims.push_back(std::move(dim));
  }
  return out;
}

}  // namespace condgap
