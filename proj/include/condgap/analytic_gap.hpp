#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "condgap/autodiff.hpp"
#include "condgap/distributions.hpp"
#include "condgap/optim.hpp"
#include "condgap/quadrature.hpp"
#include "condgap/rng.hpp"

// Closed-form conditioning gap for a finite set of missing conditions Ū,
// plus the univariate linear-Gaussian worked example.

namespace condgap {

/// Full posteriors p(z | C, Ū = i) with probabilities p(Ū = i | C).
struct ConditioningScenario {
  std::vector<DiagGaussian> full_posteriors;
  std::vector<double> cond_weights;

  static ConditioningScenario uniform(std::vector<DiagGaussian> posteriors) {
    const double w = 1.0 / static_cast<double>(posteriors.size());
    ConditioningScenario s{std::move(posteriors), {}};
    s.cond_weights.assign(s.full_posteriors.size(), w);
    s.validate();
    return s;
  }

  std::size_t size() const noexcept { return full_posteriors.size(); }
  std::size_t dim() const { return full_posteriors.at(0).dim(); }

  void validate() const {
    if (full_posteriors.empty()) throw std::invalid_argument("ConditioningScenario: no posteriors");
    if (cond_weights.size() != full_posteriors.size()) {
      throw std::invalid_argument("ConditioningScenario: " + std::to_string(full_posteriors.size()) + " posteriors but " +
                                  std::to_string(cond_weights.size()) + " weights");
    }
    double total = 0.0;
    for (double w : cond_weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("ConditioningScenario: weights must be >= 0");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("ConditioningScenario: weights sum to " + std::to_string(total) + ", expected 1");
    }
    for (const auto& p : full_posteriors) {
      p.validate();
      detail::require_dim("ConditioningScenario", p.dim(), full_posteriors.front().dim());
    }
  }

  std::vector<WeightedGaussian> components() const {
    std::vector<WeightedGaussian> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back({full_posteriors[i], cond_weights[i]});
    return out;
  }
};

/// w(z) ∝ exp E_{Ū|C}[log p(z | C, Ū)].
inline GaussianProduct optimal_shared_posterior(const ConditioningScenario& s) {
  s.validate();
  return gaussian_product(s.components());
}

/// Σ_i w_i KL(q ‖ p_i).
inline double expected_kl(const DiagGaussian& q, const ConditioningScenario& s) {
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) acc += s.cond_weights[i] * gaussian_kl(q, s.full_posteriors[i]);
  return acc;
}

struct GapReport {
  DiagGaussian shared_posterior;
  double gap = 0.0;
  std::vector<double> per_condition_kl;
  double log_z = 0.0;
};

inline GapReport conditioning_gap(const ConditioningScenario& s) {
  const GaussianProduct shared = optimal_shared_posterior(s);
  GapReport r;
  r.shared_posterior = shared.gaussian;
  r.log_z = shared.log_normalizer;
  r.per_condition_kl.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    r.per_condition_kl.push_back(gaussian_kl(shared.gaussian, s.full_posteriors[i]));
    r.gap += s.cond_weights[i] * r.per_condition_kl.back();
  }
  return r;
}

/// True iff every full posterior equals the first within `tol`
/// (mean and variance, elementwise).
inline bool independence_gap_check(const ConditioningScenario& s, double tol = 1e-9) {
  s.validate();
  const DiagGaussian& ref = s.full_posteriors.front();
  for (const auto& p : s.full_posteriors)
    for (std::size_t d = 0; d < ref.dim(); ++d)
      if (std::abs(p.mean[d] - ref.mean[d]) > tol || std::abs(p.var[d] - ref.var[d]) > tol) return false;
  return true;
}

/// Finite Gaussian mixture with exact density.
class GaussianMixture {
 public:
  GaussianMixture() = default;
  explicit GaussianMixture(std::vector<WeightedGaussian> components) : components_(std::move(components)) {
    (void)gaussian_mixture_moments(components_);  // validates
    double total = 0.0;
    for (const auto& c : components_) total += c.weight;
    for (auto& c : components_) c.weight /= total;
  }

  std::size_t dim() const { return components_.front().gaussian.dim(); }
  const std::vector<WeightedGaussian>& components() const noexcept { return components_; }

  double log_density(std::span<const double> z) const {
    double hi = -std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    terms.reserve(components_.size());
    for (const auto& c : components_) {
      if (c.weight == 0.0) continue;
      terms.push_back(std::log(c.weight) + gaussian_log_prob(c.gaussian, z));
      hi = std::max(hi, terms.back());
    }
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - hi);
    return hi + std::log(acc);
  }
  double log_density(double z) const { return log_density(std::span<const double>(&z, 1)); }
  double density(double z) const { return std::exp(log_density(z)); }

  DiagGaussian moments() const { return gaussian_mixture_moments(components_); }

  /// Graph version for a batch z of shape [B, D]; returns [B, 1].
  Node log_density_rows(const Node& z) const {
    std::vector<Node> cols;
    for (const auto& c : components_) {
      if (c.weight == 0.0) continue;
      std::vector<double> logvar(c.gaussian.dim());
      for (std::size_t d = 0; d < logvar.size(); ++d) logvar[d] = std::log(c.gaussian.var[d]);
      const Node mean = Node::constant(Tensor::row(c.gaussian.mean));
      const Node lv = Node::constant(Tensor::row(logvar));
      const Node d = ops::add_bias(z, -mean);
      const Node quad = ops::mul_row(ops::square(d), ops::exp(-lv));
      const double log_norm = std::log(c.weight) - 0.5 * (static_cast<double>(logvar.size()) * kLog2Pi) -
                              0.5 * std::accumulate(logvar.begin(), logvar.end(), 0.0);
      cols.push_back(-0.5 * ops::sum_cols(quad) + log_norm);
    }
    return ops::logsumexp_cols(ops::concat(cols));
  }

 private:
  std::vector<WeightedGaussian> components_;
};

/// p(z | C) = E_{Ū|C} p(z | C, Ū).
inline GaussianMixture marginal_posterior(const ConditioningScenario& s) {
  s.validate();
  return GaussianMixture(s.components());
}

struct ReverseKlConfig {
  std::size_t steps = 4000;
  double learning_rate = 0.02;
  std::size_t batch = 64;
  /// Iterates averaged over the trailing fraction of steps.
  double average_fraction = 0.5;
};

/// argmin_q KL(q ‖ target) over diagonal Gaussians, by reparameterised
/// stochastic gradients. `log_target_rows` maps z [B, D] to log density
/// [B, 1] (normalisation constant irrelevant). Entropy of q is analytic.
inline DiagGaussian fit_gaussian_reverse_kl(const std::function<Node(const Node&)>& log_target_rows,
                                            const DiagGaussian& init, const ReverseKlConfig& cfg, Rng& rng) {
  init.validate();
  const std::size_t dim = init.dim();
  std::vector<double> init_logvar(dim);
  for (std::size_t d = 0; d < dim; ++d) init_logvar[d] = std::log(init.var[d]);
  Node mean = Node::parameter(Tensor::row(init.mean), "q.mean");
  Node logvar = Node::parameter(Tensor::row(init_logvar), "q.logvar");
  std::vector<Node> params{mean, logvar};
  AdamState state;
  AdamConfig adam{cfg.learning_rate};

  const std::size_t avg_from = cfg.steps - static_cast<std::size_t>(cfg.average_fraction * static_cast<double>(cfg.steps));
  std::vector<double> mean_avg(dim, 0.0), logvar_avg(dim, 0.0);
  std::size_t n_avg = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Node eps = Node::constant(Tensor::randn(Shape{cfg.batch, dim}, rng));
    const Node z = ops::add_bias(ops::mul_row(eps, ops::exp(0.5 * logvar)), mean);
    const Node entropy = 0.5 * ops::sum(logvar);
    const Node loss = -ops::mean(log_target_rows(z)) - entropy;
    if (!std::isfinite(loss.item())) {
      throw std::runtime_error("fit_gaussian_reverse_kl: non-finite loss at step " + std::to_string(step));
    }
    mean.zero_grad();
    logvar.zero_grad();
    backward(loss);
    adam_step(params, adam, state);
    if (step >= avg_from) {
      for (std::size_t d = 0; d < dim; ++d) {
        mean_avg[d] += mean.value()[d];
        logvar_avg[d] += logvar.value()[d];
      }
      ++n_avg;
    }
  }
  std::vector<double> var(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    mean_avg[d] /= static_cast<double>(n_avg);
    var[d] = std::exp(logvar_avg[d] / static_cast<double>(n_avg));
  }
  return DiagGaussian(std::move(mean_avg), std::move(var));
}

inline DiagGaussian fit_gaussian_reverse_kl(const GaussianMixture& target, const DiagGaussian& init,
                                            const ReverseKlConfig& cfg, Rng& rng) {
  return fit_gaussian_reverse_kl([&](const Node& z) { return target.log_density_rows(z); }, init, cfg, rng);
}

// ---------------------------------------------------------------------------
// p_a(x, z) = N(x | a z, v) N(z | 0, 1), data x ~ N(0, 1).

struct UnivariateModel {
  double a = 0.0;
  double obs_noise_var = 0.1;

  void validate() const {
    if (!(a >= 0.0)) throw std::invalid_argument("UnivariateModel: a must be >= 0");
    if (!(obs_noise_var > 0.0)) throw std::invalid_argument("UnivariateModel: obs_noise_var must be > 0");
  }
};

inline DiagGaussian univariate_true_posterior(const UnivariateModel& m, double x) {
  m.validate();
  const double precision = 1.0 + m.a * m.a / m.obs_noise_var;
  return DiagGaussian::scalar(m.a * x / m.obs_noise_var / precision, 1.0 / precision);
}

inline DiagGaussian univariate_marginal(const UnivariateModel& m) {
  m.validate();
  return DiagGaussian::scalar(0.0, m.obs_noise_var + m.a * m.a);
}

/// Maximiser of the expected ELBO over a single q(z) shared by all x.
/// Every true posterior has variance (1 + a²/v)⁻¹ and the posterior means
/// average to zero, so the geometric average is N(0, (1 + a²/v)⁻¹).
inline DiagGaussian univariate_optimal_shared_q(const UnivariateModel& m) {
  m.validate();
  return DiagGaussian::scalar(0.0, 1.0 / (1.0 + m.a * m.a / m.obs_noise_var));
}

/// E_{x~N(0,1)} E_{z~q} [log p_a(x, z) − log q(z)] by tensor-product
/// Gauss-Hermite quadrature.
inline double expected_elbo_univariate(const UnivariateModel& m, const DiagGaussian& q, const GaussHermiteRule& rule) {
  m.validate();
  const double mq = q.mean.at(0), vq = q.var.at(0), v = m.obs_noise_var;
  return expect_normal_2d(
      [&](double x, double z) {
        const double r = x - m.a * z;
        const double log_lik = -0.5 * (kLog2Pi + std::log(v) + r * r / v);
        const double log_prior = -0.5 * (kLog2Pi + z * z);
        const double log_q = -0.5 * (kLog2Pi + std::log(vq) + (z - mq) * (z - mq) / vq);
        return log_lik + log_prior - log_q;
      },
      0.0, 1.0, mq, vq, rule);
}

inline double expected_elbo_univariate_closed_form(const UnivariateModel& m, const DiagGaussian& q) {
  m.validate();
  const double mq = q.mean.at(0), vq = q.var.at(0), v = m.obs_noise_var;
  const double second = mq * mq + vq;
  const double log_lik = -0.5 * (kLog2Pi + std::log(v)) - 0.5 * (1.0 + m.a * m.a * second) / v;
  const double log_prior = -0.5 * (kLog2Pi + second);
  const double entropy = 0.5 * (kLog2Pi + 1.0 + std::log(vq));
  return log_lik + log_prior + entropy;
}

/// E_{x~N(0,1)} log p_a(x).
inline double expected_log_marginal_univariate(const UnivariateModel& m, const GaussHermiteRule& rule) {
  const DiagGaussian px = univariate_marginal(m);
  return expect_normal([&](double x) { return gaussian_log_prob(px, x); }, 0.0, 1.0, rule);
}

struct ArgmaxReport {
  std::vector<double> grid;
  std::vector<double> expected_log_marginal;
  std::vector<double> best_expected_elbo;
  double ml_argmax = 0.0;
  double elbo_argmax = 0.0;
  /// |ml_argmax − elbo_argmax| > 2 grid steps.
  bool differ = false;
};

inline ArgmaxReport univariate_ml_vs_elbo_argmax(const std::vector<double>& grid, const GaussHermiteRule& rule,
                                                 double obs_noise_var = 0.1) {
  if (grid.empty()) throw std::invalid_argument("univariate_ml_vs_elbo_argmax: empty grid");
  ArgmaxReport r;
  r.grid = grid;
  std::size_t best_ml = 0, best_elbo = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const UnivariateModel m{grid[i], obs_noise_var};
    r.expected_log_marginal.push_back(expected_log_marginal_univariate(m, rule));
    r.best_expected_elbo.push_back(expected_elbo_univariate(m, univariate_optimal_shared_q(m), rule));
    if (r.expected_log_marginal[i] > r.expected_log_marginal[best_ml]) best_ml = i;
    if (r.best_expected_elbo[i] > r.best_expected_elbo[best_elbo]) best_elbo = i;
  }
  r.ml_argmax = grid[best_ml];
  r.elbo_argmax = grid[best_elbo];
  double step = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) step = std::max(step, std::abs(grid[i] - grid[i - 1]));
  r.differ = grid.size() > 1 && std::abs(r.ml_argmax - r.elbo_argmax) > 2.0 * step;
  return r;
}

}  // namespace condgap
