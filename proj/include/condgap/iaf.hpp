#pragma once

#include <string>
#include <vector>

#include "condgap/autodiff.hpp"
#include "condgap/distributions.hpp"
#include "condgap/parameters.hpp"

namespace condgap {

/// Affine inverse-autoregressive flow on top of a diagonal Gaussian base.
///
///   y_0 = μ_base + σ_base ⊙ ε,          ε ~ N(0, I)
///   y_k = y_{k-1} ⊙ exp(s_k(y_{k-1})) + m_k(y_{k-1})
///
/// where m_k and s_k are single masked linear maps whose output d only sees
/// inputs ordered before d. Even flows use the natural order, odd flows the
/// reversed one. Log-scales are soft-clamped to ±kMaxLogScale, so every
/// scale is strictly positive and log|det J| = Σ s.
///
/// Parameters live under `<prefix>.base.{mean,logvar}` and
/// `<prefix>.flows.<k>.{shift,scale}.{weight,bias}`. Flows start at the
/// identity (zero weights and biases); the base starts at N(0, I).
class AffineIafFlow {
 public:
  static constexpr double kMaxLogScale = 5.0;

  AffineIafFlow() = default;
  AffineIafFlow(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t n_flows)
      : dim_(dim) {
    base_mean_ = store.add(prefix + ".base.mean", Tensor(Shape{1, dim}, 0.0));
    base_logvar_ = store.add(prefix + ".base.logvar", Tensor(Shape{1, dim}, 0.0));
    for (std::size_t k = 0; k < n_flows; ++k) {
      const std::string p = prefix + ".flows." + std::to_string(k);
      Flow f;
      f.shift_weight = store.add(p + ".shift.weight", Tensor(Shape{dim, dim}, 0.0));
      f.shift_bias = store.add(p + ".shift.bias", Tensor(Shape{1, dim}, 0.0));
      f.scale_weight = store.add(p + ".scale.weight", Tensor(Shape{dim, dim}, 0.0));
      f.scale_bias = store.add(p + ".scale.bias", Tensor(Shape{1, dim}, 0.0));
      f.reversed = (k % 2 == 1);
      f.mask = Node::constant(autoregressive_mask(dim, f.reversed));
      flows_.push_back(std::move(f));
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t n_flows() const noexcept { return flows_.size(); }

  Node& base_mean() { return base_mean_; }
  Node& base_logvar() { return base_logvar_; }
  const Node& base_mean_node() const { return base_mean_; }
  const Node& base_logvar_node() const { return base_logvar_; }

  DiagGaussian base() const {
    std::vector<double> var(dim_);
    for (std::size_t i = 0; i < dim_; ++i) var[i] = std::exp(base_logvar_.value()[i]);
    return DiagGaussian(base_mean_.value().storage(), std::move(var));
  }

  struct Forward {
    Node z;         ///< [B, D]
    Node log_prob;  ///< [B, 1]
  };

  /// Pushes standard-normal noise through base and flows.
  Forward forward(const Node& eps) const {
    Node y = ops::add_bias(ops::mul_row(eps, ops::exp(0.5 * base_logvar_)), base_mean_);
    Node log_prob = standard_base_log_prob_rows(eps);
    for (const Flow& f : flows_) {
      const Node m = ops::linear(y, masked(f.shift_weight, f), f.shift_bias);
      const Node s = soft_clamp(ops::linear(y, masked(f.scale_weight, f), f.scale_bias));
      y = y * ops::exp(s) + m;
      log_prob = log_prob - ops::sum_cols(s);
    }
    return {y, log_prob};
  }

  Forward sample(std::size_t batch, Rng& rng) const {
    return forward(Node::constant(Tensor::randn(Shape{batch, dim_}, rng)));
  }

  struct Inverse {
    Node eps;       ///< [B, D] standard-normal coordinates
    Node log_prob;  ///< [B, 1]
  };

  /// Inverts the flows one coordinate at a time in each flow's order.
  Inverse inverse(const Node& z) const {
    const std::size_t B = z.value().rows();
    Node y = z;
    Node log_det = Node::constant(Tensor(Shape{B, 1}, 0.0));
    for (auto it = flows_.rbegin(); it != flows_.rend(); ++it) {
      const Flow& f = *it;
      const Node w_shift = masked(f.shift_weight, f);
      const Node w_scale = masked(f.scale_weight, f);
      const Node zero_col = Node::constant(Tensor(Shape{B, 1}, 0.0));
      std::vector<Node> cols(dim_, zero_col);
      std::vector<Node> log_scales(dim_, zero_col);
      for (std::size_t step = 0; step < dim_; ++step) {
        const std::size_t d = f.reversed ? dim_ - 1 - step : step;
        const Node known = ops::concat(cols);
        const Node m = ops::slice(ops::linear(known, w_shift, f.shift_bias), d, d + 1);
        const Node s = ops::slice(soft_clamp(ops::linear(known, w_scale, f.scale_bias)), d, d + 1);
        cols[d] = (ops::slice(y, d, d + 1) - m) * ops::exp(-s);
        log_scales[d] = s;
      }
      y = ops::concat(cols);
      log_det = log_det + ops::sum_cols(ops::concat(log_scales));
    }
    const Node eps = ops::mul_row(ops::add_bias(y, -base_mean_), ops::exp(-0.5 * base_logvar_));
    return {eps, standard_base_log_prob_rows(eps) - log_det};
  }

  Node log_prob_rows(const Node& z) const { return inverse(z).log_prob; }

 private:
  struct Flow {
    Node shift_weight, shift_bias, scale_weight, scale_bias, mask;
    bool reversed = false;
  };

  static Tensor autoregressive_mask(std::size_t dim, bool reversed) {
    Tensor m(Shape{dim, dim}, 0.0);
    for (std::size_t in = 0; in < dim; ++in)
      for (std::size_t out = 0; out < dim; ++out)
        if (reversed ? in > out : in < out) m.at(in, out) = 1.0;
    return m;
  }

  static Node masked(const Node& w, const Flow& f) { return w * f.mask; }

  static Node soft_clamp(const Node& s) { return kMaxLogScale * ops::tanh(s * (1.0 / kMaxLogScale)); }

  /// log N(y; μ_base, σ²_base) expressed through ε = (y − μ)/σ:
  /// log N(ε; 0, I) − ½ Σ logvar.
  Node standard_base_log_prob_rows(const Node& eps) const {
    const double d = static_cast<double>(dim_);
    return -0.5 * ops::sum_cols(ops::square(eps)) + (-0.5 * d * kLog2Pi) - 0.5 * ops::sum(base_logvar_);
  }

  std::size_t dim_ = 0;
  Node base_mean_;
  Node base_logvar_;
  std::vector<Flow> flows_;
};

}  // namespace condgap
