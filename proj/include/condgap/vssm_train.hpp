#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "condgap/optim.hpp"
#include "condgap/parallel.hpp"
#include "condgap/vssm.hpp"

namespace condgap {

struct TrainConfig {
  std::size_t batch_size = 32;
  AdamConfig optimizer{};
  std::size_t n_updates = 1000;
  std::size_t n_posterior_samples = 1;
  double clip_norm = 0.0;  // 0 disables clipping
  /// KL weight ramps linearly from kl_warmup_start to 1 over this many
  /// updates; 0 trains on the plain ELBO throughout.
  std::size_t kl_warmup_updates = 0;
  double kl_warmup_start = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be > 0");
    if (n_posterior_samples == 0) throw std::invalid_argument("train: n_posterior_samples must be > 0");
    if (clip_norm < 0.0) throw std::invalid_argument("train: clip_norm must be >= 0");
    if (!(kl_warmup_start >= 0.0 && kl_warmup_start <= 1.0))
      throw std::invalid_argument("train: kl_warmup_start must lie in [0, 1]");
    optimizer.validate();
  }
};

struct TrainLogRow {
  std::size_t step = 0;
  double elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::size_t completed_updates = 0;
  bool aborted = false;
  std::string abort_reason;
};

/// Index order for epoch `epoch`: a Fisher-Yates shuffle driven by `rng`.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

inline double kl_weight(const TrainConfig& cfg, std::size_t step) {
  if (cfg.kl_warmup_updates == 0 || step >= cfg.kl_warmup_updates) return 1.0;
  const double f = static_cast<double>(step) / static_cast<double>(cfg.kl_warmup_updates);
  return cfg.kl_warmup_start + (1.0 - cfg.kl_warmup_start) * f;
}

/// Adam on the negative minibatch ELBO (KL term optionally down-weighted
/// early on). Logged values are always the plain ELBO. A non-finite loss or gradient
/// stops training and leaves the parameters at the last state whose loss
/// was finite.
inline TrainResult train_vssm(Vssm& model, const SequenceDataset& data, const TrainConfig& cfg,
                              const std::function<void(const TrainLogRow&)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  data.validate();
  TrainResult result;
  Rng rng(cfg.seed, 0x7a11);
  std::vector<Node> params = model.store().nodes();
  AdamState state;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  const std::size_t B = std::min(cfg.batch_size, data.size());
  auto last_good = model.store().snapshot();

  for (std::size_t step = 1; step <= cfg.n_updates; ++step) {
    if (cursor + B > order.size()) {
      order = shuffled_indices(data.size(), rng);
      cursor = 0;
    }
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor + B));
    cursor += B;
    const SequenceBatch batch = SequenceBatch::from(data, idx);
    try {
      ElboReport rep = model.elbo(batch, cfg.n_posterior_samples, rng);
      last_good = model.store().snapshot();
      model.store().zero_grad();
      const double beta = kl_weight(cfg, step);
      backward(beta == 1.0 ? -rep.objective : rep.kl_objective * beta - rep.recon_objective);
      if (cfg.clip_norm > 0.0) clip_grad_norm(params, cfg.clip_norm);
      adam_step(params, cfg.optimizer, state);
      const TrainLogRow row{step, rep.elbo, rep.recon, rep.kl};
      result.log.push_back(row);
      result.completed_updates = step;
      if (on_step) on_step(row);
    } catch (const NonFiniteElbo& e) {
      model.store().restore(last_good);
      result.aborted = true;
      result.abort_reason = "update " + std::to_string(step) + ": " + e.what();
      break;
    } catch (const NonFiniteGradient& e) {
      model.store().restore(last_good);
      result.aborted = true;
      result.abort_reason = "update " + std::to_string(step) + ": " + e.what();
      break;
    }
    if (!model.store().all_finite()) {
      model.store().restore(last_good);
      result.aborted = true;
      result.abort_reason = "update " + std::to_string(step) + ": parameters became non-finite";
      break;
    }
  }
  return result;
}

struct EvalResult {
  double mean = 0.0;           // nats per sequence
  double std = 0.0;            // across posterior samples
  double mean_per_step = 0.0;  // nats per time step
  double std_per_step = 0.0;
  std::vector<double> sample_means;  // dataset-mean ELBO of each posterior sample
};

/// Dataset-average ELBO for each of `n_samples` independent posterior
/// draws (one draw per sequence per sample); reports their mean and sample
/// standard deviation. Sample s uses its own rng stream, so the result does
/// not depend on `threads`.
inline EvalResult evaluate_elbo(const Vssm& model, const SequenceDataset& data, std::size_t n_samples,
                                std::uint64_t seed, std::size_t batch_size = 256, std::size_t threads = 1) {
  if (n_samples == 0) throw std::invalid_argument("evaluate_elbo: n_samples must be > 0");
  if (batch_size == 0) throw std::invalid_argument("evaluate_elbo: batch_size must be > 0");
  data.validate();
  std::vector<double> means(n_samples, 0.0);
  const Rng root(seed, 0xe7a1);
  parallel_for(n_samples, threads, [&](std::size_t s) {
    NoGradGuard guard;
    Rng rng = root.split(s);
    double total = 0.0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
      const ElboReport rep = model.elbo(SequenceBatch::from(data, idx), 1, rng);
      for (double v : rep.per_sequence) total += v;
    }
    means[s] = total / static_cast<double>(data.size());
  });
  EvalResult out;
  out.sample_means = means;
  for (double m : means) out.mean += m / static_cast<double>(n_samples);
  if (n_samples > 1) {
    double ss = 0.0;
    for (double m : means) ss += (m - out.mean) * (m - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(n_samples - 1));
  }
  const double T = static_cast<double>(data.T());
  out.mean_per_step = out.mean / T;
  out.std_per_step = out.std / T;
  return out;
}

}  // namespace condgap
