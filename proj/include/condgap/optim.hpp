#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "condgap/autodiff.hpp"

namespace condgap {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("adam: learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("adam: beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("adam: beta2 must lie in [0, 1)");
    if (!(eps >= 0.0)) throw std::invalid_argument("adam: eps must be >= 0");
  }
};

/// First and second moment buffers, one per parameter, plus the step count.
struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;
};

/// Thrown when a parameter receives a non-finite gradient.
class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& parameter)
      : std::runtime_error("non-finite gradient for parameter '" + parameter + "'"), parameter_(parameter) {}
  const std::string& parameter() const noexcept { return parameter_; }

 private:
  std::string parameter_;
};

/// One bias-corrected Adam update, in place, using each parameter's
/// accumulated gradient. Parameters without a gradient are treated as
/// having a zero gradient. All gradients are checked before any parameter
/// is touched.
inline void adam_step(std::span<Node> params, const AdamConfig& config, AdamState& state) {
  config.validate();
  if (state.first_moment.empty()) {
    for (const Node& p : params) {
      state.first_moment.emplace_back(p.shape(), 0.0);
      state.second_moment.emplace_back(p.shape(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam: state holds " + std::to_string(state.first_moment.size()) +
                                " buffers for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].shape() != params[i].shape()) {
      throw ShapeError("adam_step(" + params[i].name() + ")", state.first_moment[i].shape(), params[i].shape());
    }
    if (params[i].has_grad() && !params[i].grad().all_finite()) throw NonFiniteGradient(params[i].name());
  }

  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      // zero gradient: moments decay, update uses the decayed moments
      auto m = state.first_moment[i].data();
      auto v = state.second_moment[i].data();
      auto w = params[i].mutable_value().data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] *= config.beta1;
        v[j] *= config.beta2;
        const double denom = std::sqrt(v[j] / c2) + config.eps;
        if (denom > 0.0) w[j] -= config.learning_rate * (m[j] / c1) / denom;
      }
      continue;
    }
    const Tensor g = params[i].grad();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    auto w = params[i].mutable_value().data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      const double denom = std::sqrt(v[j] / c2) + config.eps;
      if (denom > 0.0) w[j] -= config.learning_rate * (m[j] / c1) / denom;
    }
  }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
inline double clip_grad_norm(std::span<Node> params, double max_norm) {
  double sq = 0.0;
  for (const Node& p : params)
    if (p.has_grad())
      for (double g : p.grad().data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (Node& p : params) {
      if (!p.has_grad()) continue;
      Tensor g = p.grad();
      for (double& v : g.data()) v *= f;
      p.set_grad(std::move(g));
    }
  }
  return norm;
}

}  // namespace condgap
