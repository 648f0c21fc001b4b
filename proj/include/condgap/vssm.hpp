#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condgap/autodiff.hpp"
#include "condgap/config_io.hpp"
#include "condgap/distributions.hpp"
#include "condgap/iaf.hpp"
#include "condgap/nn.hpp"
#include "condgap/parameters.hpp"
#include "condgap/rng.hpp"
#include "condgap/sequence_data.hpp"

// Residual variational state-space model.
//
//   z_1 ~ p(z_1)                                   (IAF prior)
//   z̃_t = z_{t-1} + f_T(z_{t-1}, u_{t-1})
//   z_t = z̃_t + g(z_{t-1}) ⊙ ε_t,  ε_t ~ N(0, I),  g = softplus(f_G) + floor
//   x_t ~ p(x_t | z_t)
//
// Inference samples z_1 ~ q(z_1 | β_1) and ε_t ~ q(ε_t | z̃_t, β_t), where the
// features β come from a bidirectional GRU (full) or from a forward GRU plus a
// feed-forward net over the first k steps (partial k=1, semi k>1).

namespace condgap {

enum class ConditioningKind { partial, semi, full };

struct ConditioningMode {
  ConditioningKind kind = ConditioningKind::full;
  std::size_t sneak_peek = 0;  // ignored for full

  static ConditioningMode partial() { return {ConditioningKind::partial, 1}; }
  static ConditioningMode semi(std::size_t k) { return {ConditioningKind::semi, k}; }
  static ConditioningMode full() { return {ConditioningKind::full, 0}; }

  static ConditioningMode parse(const std::string& name, std::size_t k) {
    if (name == "partial") return partial();
    if (name == "semi") return semi(k);
    if (name == "full") return full();
    throw std::invalid_argument("unknown conditioning mode '" + name + "'");
  }

  std::string name() const {
    switch (kind) {
      case ConditioningKind::partial: return "partial";
      case ConditioningKind::semi: return "semi";
      case ConditioningKind::full: return "full";
    }
    return "full";
  }

  std::size_t peek(std::size_t T) const { return kind == ConditioningKind::full ? T : sneak_peek; }

  /// Structural checks; T == 0 skips the horizon-dependent ones.
  void validate(std::size_t T = 0) const {
    if (kind == ConditioningKind::partial && sneak_peek != 1)
      throw std::invalid_argument("partial conditioning needs sneak_peek == 1");
    if (kind == ConditioningKind::semi && sneak_peek < 2)
      throw std::invalid_argument("semi conditioning needs sneak_peek >= 2");
    if (T > 0 && kind != ConditioningKind::full) {
      if (sneak_peek > T)
        throw std::invalid_argument("sneak_peek k=" + std::to_string(sneak_peek) + " exceeds T=" + std::to_string(T));
      if (kind == ConditioningKind::semi && sneak_peek >= T)
        throw std::invalid_argument("semi conditioning needs sneak_peek < T (use full)");
    }
  }

  friend bool operator==(const ConditioningMode&, const ConditioningMode&) = default;
};

enum class EmissionKind { gaussian, fixed_slice, bernoulli };

inline EmissionKind emission_kind_from_string(const std::string& s) {
  if (s == "gaussian") return EmissionKind::gaussian;
  if (s == "fixed_slice") return EmissionKind::fixed_slice;
  if (s == "bernoulli") return EmissionKind::bernoulli;
  throw std::invalid_argument("unknown emission kind '" + s + "'");
}

inline std::string to_string(EmissionKind k) {
  switch (k) {
    case EmissionKind::gaussian: return "gaussian";
    case EmissionKind::fixed_slice: return "fixed_slice";
    case EmissionKind::bernoulli: return "bernoulli";
  }
  return "gaussian";
}

struct VssmConfig {
  std::size_t n_latent = 4;
  std::size_t n_obs = 1;
  std::size_t n_cond = 0;
  std::size_t n_features = 32;  // GRU state size
  ConditioningMode mode = ConditioningMode::full();

  std::vector<std::size_t> transition_hidden{32};
  nn::Activation transition_activation = nn::Activation::tanh;
  std::vector<std::size_t> gain_hidden{};
  nn::Activation gain_activation = nn::Activation::tanh;
  double gain_floor = 1e-4;

  EmissionKind emission_kind = EmissionKind::gaussian;
  std::vector<std::size_t> emission_hidden{32};
  nn::Activation emission_activation = nn::Activation::tanh;
  /// Fixed emission variances (one per observation dim). Empty = learned
  /// scale for the gaussian kind; required for fixed_slice.
  std::vector<double> emission_scale{};

  std::size_t initial_n_flows = 2;

  std::vector<std::size_t> inv_initial_hidden{32};
  std::vector<std::size_t> inv_disturbance_hidden{32};
  std::vector<std::size_t> initial_mlp_hidden{32};
  nn::Activation inference_activation = nn::Activation::tanh;

  void validate() const {
    if (n_latent == 0) throw std::invalid_argument("vssm: n_latent must be > 0");
    if (n_obs == 0) throw std::invalid_argument("vssm: n_obs must be > 0");
    if (n_features == 0) throw std::invalid_argument("vssm: n_features must be > 0");
    if (!(gain_floor > 0.0)) throw std::invalid_argument("vssm: gain_floor must be > 0");
    mode.validate();
    if (emission_kind == EmissionKind::fixed_slice) {
      if (n_obs > n_latent) throw std::invalid_argument("vssm: fixed_slice emission needs n_obs <= n_latent");
      if (emission_scale.size() != n_obs)
        throw std::invalid_argument("vssm: fixed_slice emission needs one scale per observation dim");
    }
    if (emission_kind == EmissionKind::bernoulli && !emission_scale.empty())
      throw std::invalid_argument("vssm: bernoulli emission takes no scale");
    if (!emission_scale.empty()) {
      if (emission_scale.size() != n_obs) throw std::invalid_argument("vssm: emission scale needs n_obs entries");
      for (double s : emission_scale)
        if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("vssm: emission scale must be positive");
    }
  }
};

// JSON layout (all keys optional except where the data decides them):
// {"n_latent", "n_obs", "n_cond",
//  "conditioning": {"mode": "partial|semi|full", "sneak_peek": k},
//  "transition": {"layers": [..], "activation"},
//  "gain": {"layers": [..], "activation", "floor"},
//  "emission": {"kind", "layers", "activation", "scale_kind": "learned|fixed", "scale": [..]},
//  "initial": {"n_flows"},
//  "inv_initial": {"layers"}, "inv_disturbance": {"layers"},
//  "feature_rnn": {"n_states", "activation", "initial_mlp": {"layers"}}}
inline VssmConfig vssm_config_from_json(const nlohmann::json& j) {
  VssmConfig c;
  ConfigReader r(j, "model");
  c.n_latent = r.get<std::size_t>("n_latent", c.n_latent);
  c.n_obs = r.get<std::size_t>("n_obs", c.n_obs);
  c.n_cond = r.get<std::size_t>("n_cond", c.n_cond);
  {
    auto m = r.child("conditioning");
    const auto name = m.get<std::string>("mode", "full");
    const auto k = m.get<std::size_t>("sneak_peek", name == "partial" ? 1 : 0);
    try {
      c.mode = ConditioningMode::parse(name, k);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config: '" + m.full("mode") + "': " + e.what());
    }
    m.finish();
  }
  auto activation = [](ConfigReader& rd, const std::string& key, nn::Activation fallback) {
    const auto s = rd.get<std::string>(key, nn::to_string(fallback));
    try {
      return nn::activation_from_string(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config: '" + rd.full(key) + "': " + e.what());
    }
  };
  {
    auto t = r.child("transition");
    c.transition_hidden = t.get("layers", c.transition_hidden);
    c.transition_activation = activation(t, "activation", c.transition_activation);
    t.finish();
  }
  {
    auto g = r.child("gain");
    c.gain_hidden = g.get("layers", c.gain_hidden);
    c.gain_activation = activation(g, "activation", c.gain_activation);
    c.gain_floor = g.get("floor", c.gain_floor);
    g.finish();
  }
  {
    auto e = r.child("emission");
    try {
      c.emission_kind = emission_kind_from_string(e.get<std::string>("kind", "gaussian"));
    } catch (const std::invalid_argument& ex) {
      throw ConfigError("config: '" + e.full("kind") + "': " + ex.what());
    }
    c.emission_hidden = e.get("layers", c.emission_hidden);
    c.emission_activation = activation(e, "activation", c.emission_activation);
    const auto scale_kind = e.get<std::string>(
        "scale_kind", c.emission_kind == EmissionKind::fixed_slice ? "fixed" : "learned");
    if (scale_kind != "learned" && scale_kind != "fixed")
      throw ConfigError("config: '" + e.full("scale_kind") + "' must be 'learned' or 'fixed'");
    c.emission_scale = e.get("scale", std::vector<double>{});
    if (scale_kind == "fixed" && c.emission_scale.empty())
      throw ConfigError("config: '" + e.full("scale") + "' is required when scale_kind is 'fixed'");
    if (scale_kind == "learned" && !c.emission_scale.empty())
      throw ConfigError("config: '" + e.full("scale") + "' given but scale_kind is 'learned'");
    e.finish();
  }
  {
    auto i = r.child("initial");
    c.initial_n_flows = i.get("n_flows", c.initial_n_flows);
    i.finish();
  }
  {
    auto i = r.child("inv_initial");
    c.inv_initial_hidden = i.get("layers", c.inv_initial_hidden);
    i.finish();
  }
  {
    auto d = r.child("inv_disturbance");
    c.inv_disturbance_hidden = d.get("layers", c.inv_disturbance_hidden);
    d.finish();
  }
  {
    auto f = r.child("feature_rnn");
    c.n_features = f.get("n_states", c.n_features);
    c.inference_activation = activation(f, "activation", c.inference_activation);
    auto im = f.child("initial_mlp");
    c.initial_mlp_hidden = im.get("layers", c.initial_mlp_hidden);
    im.finish();
    f.finish();
  }
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: model: ") + e.what());
  }
  return c;
}

inline nlohmann::json vssm_config_to_json(const VssmConfig& c) {
  nlohmann::json j;
  j["n_latent"] = c.n_latent;
  j["n_obs"] = c.n_obs;
  j["n_cond"] = c.n_cond;
  j["conditioning"] = {{"mode", c.mode.name()}, {"sneak_peek", c.mode.sneak_peek}};
  j["transition"] = {{"layers", c.transition_hidden}, {"activation", nn::to_string(c.transition_activation)}};
  j["gain"] = {{"layers", c.gain_hidden}, {"activation", nn::to_string(c.gain_activation)}, {"floor", c.gain_floor}};
  j["emission"] = {{"kind", to_string(c.emission_kind)},
                   {"layers", c.emission_hidden},
                   {"activation", nn::to_string(c.emission_activation)},
                   {"scale_kind", c.emission_scale.empty() ? "learned" : "fixed"}};
  if (!c.emission_scale.empty()) j["emission"]["scale"] = c.emission_scale;
  j["initial"] = {{"n_flows", c.initial_n_flows}};
  j["inv_initial"] = {{"layers", c.inv_initial_hidden}};
  j["inv_disturbance"] = {{"layers", c.inv_disturbance_hidden}};
  j["feature_rnn"] = {{"n_states", c.n_features},
                      {"activation", nn::to_string(c.inference_activation)},
                      {"initial_mlp", {{"layers", c.initial_mlp_hidden}}}};
  return j;
}

/// Thrown when an ELBO term turns non-finite; carries the 1-based step.
class NonFiniteElbo : public std::runtime_error {
 public:
  NonFiniteElbo(const std::string& term, std::size_t step)
      : std::runtime_error("non-finite " + term + " at step t=" + std::to_string(step)), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct ElboReport {
  double elbo = 0.0;   // nats per sequence, batch mean
  double recon = 0.0;
  double kl = 0.0;
  std::size_t n_posterior_samples = 0;
  std::vector<double> per_sequence;  // ELBO per sequence, averaged over samples
  Node objective;                    // differentiable batch-mean ELBO
  Node recon_objective;              // its two parts
  Node kl_objective;
};

/// Emission parameters for a batch of states. Gaussian kinds fill mean and
/// logvar; bernoulli fills logits.
struct EmissionParams {
  EmissionKind kind = EmissionKind::gaussian;
  Node mean;
  Node logvar;
  Node logits;

  DiagGaussian gaussian_row(std::size_t i) const {
    const std::size_t d = mean.value().cols();
    std::vector<double> m(d), v(d);
    for (std::size_t j = 0; j < d; ++j) {
      m[j] = mean.value().at(i, j);
      v[j] = std::exp(logvar.value().at(i, j));
    }
    return DiagGaussian(std::move(m), std::move(v));
  }

  BernoulliVec bernoulli_row(std::size_t i) const {
    const std::size_t d = logits.value().cols();
    std::vector<double> l(d);
    for (std::size_t j = 0; j < d; ++j) l[j] = logits.value().at(i, j);
    return BernoulliVec(std::move(l));
  }
};

/// Replaces the inference heads, e.g. with an exact posterior. `residual`
/// receives the 1-based step t ≥ 2.
struct PosteriorOverride {
  std::function<GaussianNode(const SequenceBatch&)> initial;
  std::function<GaussianNode(const SequenceBatch&, std::size_t t, const Node& z_prev, const Node& z_tilde)> residual;
};

/// One reparameterised draw from q and its ELBO terms.
struct Rollout {
  std::vector<Node> z;               // z_1..z_T, [B, n_latent]
  std::vector<GaussianNode> q;       // q(z_1), then q(ε_t) for t ≥ 2
  Node recon_rows;                   // [B, 1]
  Node kl_rows;                      // [B, 1]
  std::vector<double> recon_per_step;  // batch means
  std::vector<double> kl_per_step;
};

namespace detail {

inline Node kl_standard_rows(const GaussianNode& q) {
  return 0.5 * ops::sum_cols(ops::exp(q.logvar) + ops::square(q.mean) - 1.0 - q.logvar);
}

/// KL(N(mq, e^lq) ‖ N(mp, e^lp)) per row, with (mp, lp) a single row.
inline Node kl_to_row_rows(const GaussianNode& q, const Node& mp, const Node& lp) {
  const Node dl = ops::add_bias(q.logvar, -lp);
  const Node d2 = ops::mul_row(ops::square(ops::add_bias(q.mean, -mp)), ops::exp(-lp));
  return 0.5 * ops::sum_cols(ops::exp(dl) + d2 - 1.0 - dl);
}

inline double batch_mean(const Node& rows) {
  double s = 0.0;
  for (double v : rows.value().data()) s += v;
  return s / static_cast<double>(rows.value().numel());
}

inline bool finite(const Node& n) { return n.value().all_finite(); }

}  // namespace detail

class Vssm {
 public:
  static constexpr double kResidualInitScale = 0.1;

  Vssm(const VssmConfig& config, std::uint64_t init_seed) : config_(config) {
    config_.validate();
    Rng rng(init_seed, 0x5eed);
    const std::size_t n = config_.n_latent;
    const std::size_t in_step = config_.n_obs + config_.n_cond;
    const std::size_t H = config_.n_features;

    transition_ = nn::Mlp(store_, "transition", n + config_.n_cond, config_.transition_hidden, n,
                          config_.transition_activation, rng);
    gain_ = nn::Mlp(store_, "gain", n, config_.gain_hidden, n, config_.gain_activation, rng);
    // start close to z_t = z_{t-1} + softplus(0) ε_t
    for (nn::Mlp* net : {&transition_, &gain_})
      for (double& w : net->output_layer().weight().mutable_value().data()) w *= kResidualInitScale;
    if (config_.emission_kind != EmissionKind::fixed_slice) {
      const bool learned_scale = config_.emission_kind == EmissionKind::gaussian && config_.emission_scale.empty();
      emission_ = nn::Mlp(store_, "emission", n, config_.emission_hidden,
                          learned_scale ? 2 * config_.n_obs : config_.n_obs, config_.emission_activation, rng);
    }
    initial_ = AffineIafFlow(store_, "initial", n, config_.initial_n_flows);

    rnn_forward_ = nn::GruCell(store_, "feature_rnn.forward", in_step, H, rng);
    std::size_t feature_dim = H;
    if (config_.mode.kind == ConditioningKind::full) {
      rnn_backward_ = nn::GruCell(store_, "feature_rnn.backward", in_step, H, rng);
      feature_dim = 2 * H;
    } else {
      initial_mlp_ = nn::Mlp(store_, "feature_rnn.initial_mlp", config_.mode.sneak_peek * in_step,
                             config_.initial_mlp_hidden, H, config_.inference_activation, rng);
    }
    inv_initial_ = nn::Mlp(store_, "inv_initial", feature_dim, config_.inv_initial_hidden, 2 * n,
                           config_.inference_activation, rng);
    inv_disturbance_ = nn::Mlp(store_, "inv_disturbance", n + feature_dim, config_.inv_disturbance_hidden, 2 * n,
                               config_.inference_activation, rng);
  }

  const VssmConfig& config() const noexcept { return config_; }
  ParameterStore& store() noexcept { return store_; }
  const ParameterStore& store() const noexcept { return store_; }
  const AffineIafFlow& initial_prior() const noexcept { return initial_; }

  // -- generative model ----------------------------------------------------

  /// z̃ = z_prev + f_T(z_prev, u_prev). `u_prev` may be null when n_cond == 0.
  Node deterministic_transition(const Node& z_prev, const Node* u_prev) const {
    const Node in = config_.n_cond > 0 ? ops::concat({z_prev, require_u(u_prev)}) : z_prev;
    return z_prev + transition_(in);
  }

  Node gain(const Node& z_prev) const { return ops::add_scalar(ops::softplus(gain_(z_prev)), config_.gain_floor); }

  Node transition_step(const Node& z_prev, const Node* u_prev, const Node& eps) const {
    return deterministic_transition(z_prev, u_prev) + gain(z_prev) * eps;
  }

  EmissionParams emission(const Node& z) const {
    if (z.value().cols() != config_.n_latent)
      throw ShapeError("emission", z.shape(), Shape{z.value().rows(), config_.n_latent});
    EmissionParams e;
    e.kind = config_.emission_kind;
    const std::size_t B = z.value().rows();
    switch (config_.emission_kind) {
      case EmissionKind::fixed_slice:
        e.mean = ops::slice(z, 0, config_.n_obs);
        e.logvar = fixed_logvar(B);
        break;
      case EmissionKind::gaussian:
        if (config_.emission_scale.empty()) {
          const Node out = emission_(z);
          e.mean = ops::slice(out, 0, config_.n_obs);
          e.logvar = clamp_logvar(ops::slice(out, config_.n_obs, 2 * config_.n_obs));
        } else {
          e.mean = emission_(z);
          e.logvar = fixed_logvar(B);
        }
        break;
      case EmissionKind::bernoulli:
        e.logits = emission_(z);
        break;
    }
    return e;
  }

  /// log p(x | z) per row, [B, 1].
  Node emission_log_prob_rows(const Node& z, const Node& x) const {
    const EmissionParams e = emission(z);
    if (e.kind == EmissionKind::bernoulli) return bernoulli_log_prob_rows(e.logits, x);
    return gaussian_log_prob_rows(e.mean, e.logvar, x);
  }

  // -- inference -----------------------------------------------------------

  /// β_1..β_T, each [B, feature_dim].
  std::vector<Node> infer_features(const SequenceBatch& batch) const {
    check_batch(batch);
    const std::size_t T = batch.T;
    config_.mode.validate(T);
    std::vector<Node> in(T);
    for (std::size_t t = 0; t < T; ++t) in[t] = batch.has_conditions() ? ops::concat({batch.x[t], batch.u[t]}) : batch.x[t];

    std::vector<Node> fwd(T);
    Node h = rnn_forward_.initial_state(batch.batch);
    for (std::size_t t = 0; t < T; ++t) fwd[t] = h = rnn_forward_(in[t], h);

    std::vector<Node> beta(T);
    if (config_.mode.kind == ConditioningKind::full) {
      std::vector<Node> bwd(T);
      Node hb = rnn_backward_.initial_state(batch.batch);
      for (std::size_t t = T; t-- > 0;) bwd[t] = hb = rnn_backward_(in[t], hb);
      for (std::size_t t = 0; t < T; ++t) beta[t] = ops::concat({fwd[t], bwd[t]});
    } else {
      const std::size_t k = config_.mode.sneak_peek;
      std::vector<Node> head(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(k));
      beta[0] = initial_mlp_(ops::concat(head));
      for (std::size_t t = 1; t < T; ++t) beta[t] = fwd[t];
    }
    return beta;
  }

  GaussianNode initial_posterior(const Node& beta1) const { return split_head(inv_initial_(beta1)); }

  GaussianNode residual_posterior(const Node& z_tilde, const Node& beta_t) const {
    return split_head(inv_disturbance_(ops::concat({z_tilde, beta_t})));
  }

  /// One ancestral reparameterised draw from q with its ELBO terms. The
  /// noise is drawn in step order, so the draw for step t depends only on
  /// the rng state and on what β_1..β_t see.
  Rollout rollout(const SequenceBatch& batch, Rng& rng, const PosteriorOverride* override_q = nullptr) const {
    check_batch(batch);
    const std::size_t T = batch.T;
    Rollout r;
    std::vector<Node> beta;
    const bool need_features = !override_q || !override_q->initial || !override_q->residual;
    if (need_features) beta = infer_features(batch);

    GaussianNode q1 = (override_q && override_q->initial) ? override_q->initial(batch) : initial_posterior(beta[0]);
    Node z = reparam_sample(q1.mean, q1.logvar, rng);
    Node kl1;
    if (initial_.n_flows() == 0) {
      kl1 = detail::kl_to_row_rows(q1, initial_.base_mean_node(), initial_.base_logvar_node());
    } else {
      kl1 = gaussian_log_prob_rows(q1.mean, q1.logvar, z) - initial_.log_prob_rows(z);
    }
    if (!detail::finite(kl1)) throw NonFiniteElbo("initial KL", 1);
    Node recon = emission_log_prob_rows(z, batch.x[0]);
    if (!detail::finite(recon)) throw NonFiniteElbo("reconstruction term", 1);
    r.z.push_back(z);
    r.q.push_back(q1);
    r.kl_per_step.push_back(detail::batch_mean(kl1));
    r.recon_per_step.push_back(detail::batch_mean(recon));
    Node kl = kl1;

    for (std::size_t t = 1; t < T; ++t) {
      const Node* u_prev = batch.has_conditions() ? &batch.u[t - 1] : nullptr;
      const Node z_tilde = deterministic_transition(z, u_prev);
      GaussianNode qe = (override_q && override_q->residual) ? override_q->residual(batch, t + 1, z, z_tilde)
                                                             : residual_posterior(z_tilde, beta[t]);
      const Node eps = reparam_sample(qe.mean, qe.logvar, rng);
      z = z_tilde + gain(r.z.back()) * eps;
      const Node kl_t = detail::kl_standard_rows(qe);
      if (!detail::finite(kl_t)) throw NonFiniteElbo("residual KL", t + 1);
      const Node rec_t = emission_log_prob_rows(z, batch.x[t]);
      if (!detail::finite(rec_t)) throw NonFiniteElbo("reconstruction term", t + 1);
      kl = kl + kl_t;
      recon = recon + rec_t;
      r.z.push_back(z);
      r.q.push_back(qe);
      r.kl_per_step.push_back(detail::batch_mean(kl_t));
      r.recon_per_step.push_back(detail::batch_mean(rec_t));
    }
    r.recon_rows = recon;
    r.kl_rows = kl;
    return r;
  }

  /// Monte Carlo ELBO averaged over `n_samples` posterior draws.
  ElboReport elbo(const SequenceBatch& batch, std::size_t n_samples, Rng& rng,
                  const PosteriorOverride* override_q = nullptr) const {
    if (n_samples == 0) throw std::invalid_argument("elbo: n_samples must be >= 1");
    ElboReport rep;
    rep.n_posterior_samples = n_samples;
    rep.per_sequence.assign(batch.batch, 0.0);
    Node recon_total, kl_total;
    const double inv = 1.0 / static_cast<double>(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
      const Rollout r = rollout(batch, rng, override_q);
      const Node rows = r.recon_rows - r.kl_rows;
      const Node rec = ops::mean(r.recon_rows), kl = ops::mean(r.kl_rows);
      recon_total = s == 0 ? rec : recon_total + rec;
      kl_total = s == 0 ? kl : kl_total + kl;
      rep.recon += inv * detail::batch_mean(r.recon_rows);
      rep.kl += inv * detail::batch_mean(r.kl_rows);
      for (std::size_t i = 0; i < batch.batch; ++i) rep.per_sequence[i] += inv * rows.value()[i];
    }
    rep.recon_objective = n_samples == 1 ? recon_total : recon_total * inv;
    rep.kl_objective = n_samples == 1 ? kl_total : kl_total * inv;
    rep.objective = rep.recon_objective - rep.kl_objective;
    rep.elbo = rep.objective.item();
    // keep the identity exact in the reported numbers
    rep.kl = rep.recon - rep.elbo;
    if (!std::isfinite(rep.elbo)) throw NonFiniteElbo("ELBO", batch.T);
    return rep;
  }

  /// Ancestral samples from the generative model. `conditions`, if given,
  /// supplies u for every sequence (size n, each T steps).
  SequenceDataset generate(std::size_t n, std::size_t T, Rng& rng,
                           const std::vector<std::vector<std::vector<double>>>* conditions = nullptr) const {
    if (n == 0 || T == 0) throw std::invalid_argument("generate: n and T must be > 0");
    if (config_.n_cond > 0 && !conditions) throw std::invalid_argument("generate: model needs conditions u");
    if (conditions && conditions->size() != n) throw std::invalid_argument("generate: need conditions for every sequence");
    NoGradGuard guard;
    SequenceDataset out;
    out.sequences.resize(n);
    std::vector<Node> u;
    if (config_.n_cond > 0) {
      for (std::size_t t = 0; t < T; ++t) {
        Tensor ut(Shape{n, config_.n_cond});
        for (std::size_t i = 0; i < n; ++i) {
          const auto& row = (*conditions)[i].at(t);
          if (row.size() != config_.n_cond) throw std::invalid_argument("generate: condition width mismatch");
          for (std::size_t j = 0; j < config_.n_cond; ++j) ut.at(i, j) = row[j];
        }
        u.push_back(Node::constant(std::move(ut)));
      }
      for (std::size_t i = 0; i < n; ++i) out.sequences[i].u = (*conditions)[i];
    }
    Node z = initial_.sample(n, rng).z;
    for (std::size_t t = 0; t < T; ++t) {
      if (t > 0) {
        const Node eps = Node::constant(Tensor::randn(Shape{n, config_.n_latent}, rng));
        z = transition_step(z, config_.n_cond > 0 ? &u[t - 1] : nullptr, eps);
      }
      const Tensor x = sample_emission(emission(z), rng);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(config_.n_obs);
        for (std::size_t j = 0; j < config_.n_obs; ++j) row[j] = x.at(i, j);
        out.sequences[i].x.push_back(std::move(row));
      }
    }
    return out;
  }

  /// Draws x ~ p(x | z) row by row.
  Tensor sample_emission(const EmissionParams& e, Rng& rng) const {
    const std::size_t B = (e.kind == EmissionKind::bernoulli ? e.logits : e.mean).value().rows();
    Tensor x(Shape{B, config_.n_obs});
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < config_.n_obs; ++j) {
        if (e.kind == EmissionKind::bernoulli) {
          const double p = ops::detail_ops::stable_sigmoid(e.logits.value().at(i, j));
          x.at(i, j) = rng.bernoulli(p) ? 1.0 : 0.0;
        } else {
          x.at(i, j) = e.mean.value().at(i, j) + std::exp(0.5 * e.logvar.value().at(i, j)) * rng.normal();
        }
      }
    return x;
  }

  nlohmann::json checkpoint(const nlohmann::json& extra_meta = nlohmann::json::object()) const {
    nlohmann::json meta = extra_meta;
    meta["model"] = vssm_config_to_json(config_);
    return checkpoint_to_json(store_, meta);
  }

  static Vssm from_checkpoint(const nlohmann::json& ckpt) {
    if (!ckpt.contains("meta") || !ckpt.at("meta").contains("model"))
      throw std::runtime_error("checkpoint has no model config");
    Vssm m(vssm_config_from_json(ckpt.at("meta").at("model")), 0);
    load_tensors(m.store_, ckpt);
    return m;
  }

 private:
  GaussianNode split_head(const Node& out) const {
    const std::size_t n = config_.n_latent;
    return {ops::slice(out, 0, n), clamp_logvar(ops::slice(out, n, 2 * n))};
  }

  Node fixed_logvar(std::size_t B) const {
    Tensor lv(Shape{B, config_.n_obs});
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < config_.n_obs; ++j) lv.at(i, j) = std::log(config_.emission_scale[j]);
    return Node::constant(std::move(lv));
  }

  const Node& require_u(const Node* u) const {
    if (!u) throw std::invalid_argument("vssm: transition needs u_prev when n_cond > 0");
    return *u;
  }

  void check_batch(const SequenceBatch& b) const {
    if (b.T == 0 || b.x.size() != b.T) throw std::invalid_argument("vssm: empty or inconsistent batch");
    if (b.n_obs != config_.n_obs)
      throw std::invalid_argument("vssm: batch has n_obs=" + std::to_string(b.n_obs) + ", model expects " +
                                  std::to_string(config_.n_obs));
    if (b.n_cond != config_.n_cond)
      throw std::invalid_argument("vssm: batch has n_cond=" + std::to_string(b.n_cond) + ", model expects " +
                                  std::to_string(config_.n_cond));
  }

  VssmConfig config_;
  ParameterStore store_;
  nn::Mlp transition_;
  nn::Mlp gain_;
  nn::Mlp emission_;
  AffineIafFlow initial_;
  nn::GruCell rnn_forward_;
  nn::GruCell rnn_backward_;
  nn::Mlp initial_mlp_;
  nn::Mlp inv_initial_;
  nn::Mlp inv_disturbance_;
};

}  // namespace condgap
