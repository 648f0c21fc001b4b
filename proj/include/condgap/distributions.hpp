#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "condgap/autodiff.hpp"
#include "condgap/rng.hpp"

namespace condgap {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // ln(2π)

/// Log-variance range produced by network heads.
inline constexpr double kMinLogVar = -10.0;
inline constexpr double kMaxLogVar = 10.0;

/// Diagonal Gaussian with elementwise variances.
struct DiagGaussian {
  std::vector<double> mean;
  std::vector<double> var;

  DiagGaussian() = default;
  DiagGaussian(std::vector<double> m, std::vector<double> v) : mean(std::move(m)), var(std::move(v)) { validate(); }

  static DiagGaussian scalar(double m, double v) { return DiagGaussian({m}, {v}); }
  static DiagGaussian standard(std::size_t dim) {
    return DiagGaussian(std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0));
  }

  std::size_t dim() const noexcept { return mean.size(); }

  void validate() const {
    if (mean.size() != var.size()) {
      throw std::invalid_argument("DiagGaussian: mean has " + std::to_string(mean.size()) + " entries, var has " +
                                  std::to_string(var.size()));
    }
    for (double v : var)
      if (!(v > 0.0)) throw std::invalid_argument("DiagGaussian: variances must be > 0");
  }

  friend bool operator==(const DiagGaussian&, const DiagGaussian&) = default;
};

namespace detail {
inline void require_dim(const char* op, std::size_t a, std::size_t b) {
  if (a != b) throw std::invalid_argument(std::string(op) + ": dimension mismatch " + std::to_string(a) + " vs " + std::to_string(b));
}
}  // namespace detail

inline double gaussian_log_prob(const DiagGaussian& g, std::span<const double> x) {
  detail::require_dim("gaussian_log_prob", g.dim(), x.size());
  double lp = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - g.mean[i];
    lp += -0.5 * (kLog2Pi + std::log(g.var[i]) + d * d / g.var[i]);
  }
  return lp;
}

inline double gaussian_log_prob(const DiagGaussian& g, double x) { return gaussian_log_prob(g, std::span<const double>(&x, 1)); }

/// KL(q ‖ p) in closed form.
inline double gaussian_kl(const DiagGaussian& q, const DiagGaussian& p) {
  detail::require_dim("gaussian_kl", q.dim(), p.dim());
  double kl = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double r = q.var[i] / p.var[i];
    const double d = q.mean[i] - p.mean[i];
    kl += 0.5 * (r + d * d / p.var[i] - 1.0 - std::log(r));
  }
  return std::max(kl, 0.0);
}

inline std::vector<double> reparam_sample(const DiagGaussian& g, Rng& rng) {
  std::vector<double> out(g.dim());
  for (std::size_t i = 0; i < g.dim(); ++i) out[i] = g.mean[i] + std::sqrt(g.var[i]) * rng.normal();
  return out;
}

struct WeightedGaussian {
  DiagGaussian gaussian;
  double weight = 1.0;
};

struct GaussianProduct {
  DiagGaussian gaussian;
  /// log ∫ Π_i N_i(z)^{w_i} dz.
  double log_normalizer = 0.0;
};

namespace detail {
inline std::size_t check_components(const char* op, std::span<const WeightedGaussian> components) {
  if (components.empty()) throw std::invalid_argument(std::string(op) + ": need at least one component");
  const std::size_t dim = components.front().gaussian.dim();
  double total = 0.0;
  for (const auto& c : components) {
    require_dim(op, c.gaussian.dim(), dim);
    if (!(c.weight >= 0.0)) throw std::invalid_argument(std::string(op) + ": weights must be >= 0");
    total += c.weight;
  }
  if (!(total > 0.0)) throw std::invalid_argument(std::string(op) + ": total weight is zero");
  return dim;
}
}  // namespace detail

/// Normalised geometric mixture ∝ exp(Σ w_i log N_i): per dimension the
/// precision is Σ w_i/var_i and the mean is the precision-weighted mean.
/// Weights are used as given; callers pass a probability vector.
inline GaussianProduct gaussian_product(std::span<const WeightedGaussian> components) {
  const std::size_t dim = detail::check_components("gaussian_product", components);
  GaussianProduct out;
  out.gaussian.mean.assign(dim, 0.0);
  out.gaussian.var.assign(dim, 0.0);
  for (std::size_t d = 0; d < dim; ++d) {
    double precision = 0.0, shift = 0.0, quad = 0.0, logdet = 0.0;
    for (const auto& c : components) {
      const double m = c.gaussian.mean[d], v = c.gaussian.var[d], w = c.weight;
      precision += w / v;
      shift += w * m / v;
      quad += w * m * m / v;
      logdet += w * std::log(2.0 * std::numbers::pi * v);
    }
    const double mean = shift / precision;
    out.gaussian.mean[d] = mean;
    out.gaussian.var[d] = 1.0 / precision;
    // complete the square of Σ w_i log N_i(z)
    out.log_normalizer += -0.5 * logdet - 0.5 * (quad - precision * mean * mean) +
                          0.5 * std::log(2.0 * std::numbers::pi / precision);
  }
  return out;
}

inline GaussianProduct gaussian_product(const std::vector<WeightedGaussian>& components) {
  return gaussian_product(std::span<const WeightedGaussian>(components));
}

/// Mean and variance of Σ w_i N_i (law of total variance). Weights are
/// normalised internally.
inline DiagGaussian gaussian_mixture_moments(std::span<const WeightedGaussian> components) {
  const std::size_t dim = detail::check_components("gaussian_mixture_moments", components);
  double total = 0.0;
  for (const auto& c : components) total += c.weight;
  std::vector<double> mean(dim, 0.0), second(dim, 0.0);
  for (const auto& c : components) {
    const double w = c.weight / total;
    for (std::size_t d = 0; d < dim; ++d) {
      mean[d] += w * c.gaussian.mean[d];
      second[d] += w * (c.gaussian.var[d] + c.gaussian.mean[d] * c.gaussian.mean[d]);
    }
  }
  std::vector<double> var(dim);
  for (std::size_t d = 0; d < dim; ++d) var[d] = std::max(second[d] - mean[d] * mean[d], 0.0);
  DiagGaussian out;
  out.mean = std::move(mean);
  out.var = std::move(var);
  return out;
}

inline DiagGaussian gaussian_mixture_moments(const std::vector<WeightedGaussian>& components) {
  return gaussian_mixture_moments(std::span<const WeightedGaussian>(components));
}

/// Independent Bernoullis stored as logits.
class BernoulliVec {
 public:
  BernoulliVec() = default;
  explicit BernoulliVec(std::vector<double> logits) : logits_(std::move(logits)) {}

  static BernoulliVec from_probs(const std::vector<double>& probs) {
    std::vector<double> logits(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const double p = probs[i];
      if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("BernoulliVec: probabilities must lie in (0, 1)");
      logits[i] = std::log(p) - std::log1p(-p);
    }
    return BernoulliVec(std::move(logits));
  }

  std::size_t dim() const noexcept { return logits_.size(); }
  const std::vector<double>& logits() const noexcept { return logits_; }

  std::vector<double> probs() const {
    std::vector<double> p(logits_.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = ops::detail_ops::stable_sigmoid(logits_[i]);
    return p;
  }

  /// Σ x·l − softplus(l), exact in logit space.
  double log_prob(std::span<const double> x) const {
    detail::require_dim("bernoulli_log_prob", dim(), x.size());
    double lp = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) lp += x[i] * logits_[i] - ops::detail_ops::stable_softplus(logits_[i]);
    return lp;
  }

  std::vector<double> sample(Rng& rng) const {
    std::vector<double> out(dim());
    const auto p = probs();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = rng.bernoulli(p[i]) ? 1.0 : 0.0;
    return out;
  }

 private:
  std::vector<double> logits_;
};

// ---------------------------------------------------------------------------
// Graph versions. Batched [B, D] tensors; Gaussians carried as
// (mean, log-variance).

struct GaussianNode {
  Node mean;
  Node logvar;
};

inline Node clamp_logvar(const Node& raw) { return ops::clamp(raw, kMinLogVar, kMaxLogVar); }

/// Per-row log density, [B, 1].
inline Node gaussian_log_prob_rows(const Node& mean, const Node& logvar, const Node& x) {
  const Node d = x - mean;
  const Node quad = ops::square(d) * ops::exp(-logvar);
  return -0.5 * ops::sum_cols(quad + logvar + kLog2Pi);
}

/// Total log density over all rows and columns (scalar).
inline Node gaussian_log_prob(const Node& mean, const Node& logvar, const Node& x) {
  const Node d = x - mean;
  const Node quad = ops::square(d) * ops::exp(-logvar);
  return -0.5 * ops::sum(quad + logvar + kLog2Pi);
}

/// Σ KL(N(mq, e^lq) ‖ N(mp, e^lp)) over all entries.
inline Node gaussian_kl(const Node& mean_q, const Node& logvar_q, const Node& mean_p, const Node& logvar_p) {
  const Node ratio = ops::exp(logvar_q - logvar_p);
  const Node d = mean_q - mean_p;
  return 0.5 * ops::sum(ratio + ops::square(d) * ops::exp(-logvar_p) - 1.0 - (logvar_q - logvar_p));
}

/// Σ KL(N(m, e^l) ‖ N(0, I)).
inline Node gaussian_kl_standard(const Node& mean, const Node& logvar) {
  return 0.5 * ops::sum(ops::exp(logvar) + ops::square(mean) - 1.0 - logvar);
}

/// mean + exp(logvar / 2) ⊙ ε with ε ~ N(0, I) drawn from `rng`.
inline Node reparam_sample(const Node& mean, const Node& logvar, Rng& rng) {
  const Node eps = Node::constant(Tensor::randn(mean.shape(), rng));
  return mean + ops::exp(0.5 * logvar) * eps;
}

/// Variance-parameterised variant: mean + sqrt(var) ⊙ ε.
inline Node reparam_sample_var(const Node& mean, const Node& var, Rng& rng) {
  const Node eps = Node::constant(Tensor::randn(mean.shape(), rng));
  return mean + ops::exp(0.5 * ops::log(var)) * eps;
}

/// Σ x·logit − softplus(logit) over all entries.
inline Node bernoulli_log_prob(const Node& logits, const Node& x) {
  return ops::sum(x * logits - ops::softplus(logits));
}

inline Node bernoulli_log_prob_rows(const Node& logits, const Node& x) {
  return ops::sum_cols(x * logits - ops::softplus(logits));
}

}  // namespace condgap
