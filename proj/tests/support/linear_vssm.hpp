#pragma once

// A VSSM whose networks are set to reproduce a scalar LGSSM, plus the exact
// posterior of that LGSSM written as inference-head overrides.

#include <cmath>
#include <memory>
#include <vector>

#include "condgap/lgssm.hpp"
#include "condgap/vssm.hpp"

namespace condgap::testing {

inline VssmConfig linear_vssm_config(ConditioningMode mode = ConditioningMode::full()) {
  VssmConfig c;
  c.n_latent = 1;
  c.n_obs = 1;
  c.n_features = 8;
  c.mode = mode;
  c.transition_hidden = {};
  c.gain_hidden = {};
  c.emission_hidden = {};
  c.initial_n_flows = 0;
  c.inv_initial_hidden = {8};
  c.inv_disturbance_hidden = {8};
  c.initial_mlp_hidden = {8};
  return c;
}

inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

inline void set_param(Vssm& m, const std::string& path, std::vector<double> values) {
  Tensor& t = m.store().at(path).mutable_value();
  if (t.numel() != values.size()) throw std::invalid_argument("set_param: size mismatch for " + path);
  t.storage() = std::move(values);
}

/// Sets the generative networks of a linear_vssm_config model to the
/// scalar LGSSM `p` (z_0 ~ N(m0, P0), one prediction before x_1).
inline void load_scalar_lgssm(Vssm& m, const LgssmParams& p) {
  const double a = p.A(0, 0), q = p.q_diag(0), h = p.H(0, 0), r = p.r_diag(0);
  set_param(m, "transition.layers.0.weight", {a - 1.0});
  set_param(m, "transition.layers.0.bias", {0.0});
  set_param(m, "gain.layers.0.weight", {0.0});
  set_param(m, "gain.layers.0.bias", {softplus_inverse(std::sqrt(q) - m.config().gain_floor)});
  set_param(m, "emission.layers.0.weight", {h, 0.0});
  set_param(m, "emission.layers.0.bias", {0.0, std::log(r)});
  set_param(m, "initial.base.mean", {a * p.m0(0)});
  set_param(m, "initial.base.logvar", {std::log(a * a * p.P0(0, 0) + q)});
}

/// Exact posterior heads for a batch whose rows all carry sequence `x`.
inline PosteriorOverride exact_posterior(const Vssm& model, const LgssmParams& p, const Sequence& x) {
  auto info = std::make_shared<BackwardInformation>(backward_information(p, x.size(), &x));
  const auto smooth = rts_smoother(p, kalman_filter(p, x));
  const double m1 = smooth[0].mean(0), v1 = smooth[0].cov(0, 0);
  PosteriorOverride o;
  o.initial = [m1, v1](const SequenceBatch& b) {
    return GaussianNode{Node::constant(Tensor(Shape{b.batch, 1}, m1)),
                        Node::constant(Tensor(Shape{b.batch, 1}, std::log(v1)))};
  };
  o.residual = [&model, p, info](const SequenceBatch& b, std::size_t t, const Node& z_prev, const Node& z_tilde) {
    const Tensor g = model.gain(z_prev).value();
    Tensor mean(Shape{b.batch, 1}), logvar(Shape{b.batch, 1});
    for (std::size_t i = 0; i < b.batch; ++i) {
      const VectorXd zp = VectorXd::Constant(1, z_prev.value()[i]);
      const auto post = full_step_posterior(p, *info, t, zp);
      mean[i] = (post.mean(0) - z_tilde.value()[i]) / g[i];
      logvar[i] = std::log(post.cov(0, 0) / (g[i] * g[i]));
    }
    return GaussianNode{Node::constant(std::move(mean)), Node::constant(std::move(logvar))};
  };
  return o;
}

inline SequenceDataset replicate(const Sequence& x, std::size_t n) {
  SequenceRecord rec;
  for (const auto& v : x) rec.x.push_back(std::vector<double>(v.data(), v.data() + v.size()));
  SequenceDataset d;
  d.sequences.assign(n, rec);
  return d;
}

inline SequenceDataset lgssm_dataset(const LgssmParams& p, std::size_t n, Rng& rng) {
  SequenceDataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = lgssm_sample(p, rng);
    SequenceRecord rec;
    for (const auto& v : s.observations) rec.x.push_back(std::vector<double>(v.data(), v.data() + v.size()));
    d.sequences.push_back(std::move(rec));
  }
  return d;
}

inline Sequence to_sequence(const SequenceRecord& r) {
  Sequence s;
  for (const auto& row : r.x) s.push_back(Eigen::Map<const VectorXd>(row.data(), static_cast<Eigen::Index>(row.size())));
  return s;
}

}  // namespace condgap::testing
