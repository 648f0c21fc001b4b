#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "condgap/lgssm.hpp"
#include "condgap/smc.hpp"
#include "support/linear_vssm.hpp"

using namespace condgap;

namespace {

std::vector<Row> rows(const Sequence& s) {
  std::vector<Row> out;
  for (const auto& v : s) out.emplace_back(v.data(), v.data() + v.size());
  return out;
}

double sd(const std::vector<double>& v) {
  double m = 0.0;
  for (double a : v) m += a / static_cast<double>(v.size());
  double ss = 0.0;
  for (double a : v) ss += (a - m) * (a - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Observation density that is zero whenever x is NaN-marked (x > 100).
class BlockingModel final : public SmcModel {
 public:
  std::size_t n_latent() const override { return 1; }
  std::size_t n_obs() const override { return 1; }
  Tensor sample_initial(std::size_t n, Rng& rng) const override { return Tensor::randn(Shape{n, 1}, rng); }
  Tensor propagate(const Tensor& z, const Row&, Rng& rng) const override {
    Tensor out = z;
    for (double& v : out.data()) v += rng.normal();
    return out;
  }
  std::vector<double> log_likelihood(const Tensor& z, const Row& x) const override {
    std::vector<double> out(z.rows(), x[0] > 100.0 ? -std::numeric_limits<double>::infinity() : 0.0);
    return out;
  }
  Tensor sample_observation(const Tensor& z, Rng&) const override { return z; }
};

}  // namespace

// ---------------------------------------------------------------------------
// resampling

TEST(ResampleTest, DegenerateWeightsPickTheOnlyParticle) {
  Rng rng(1);
  const double ninf = -std::numeric_limits<double>::infinity();
  const auto idx = systematic_resample({0.0, ninf, ninf}, rng);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 0, 0}));
}

TEST(ResampleTest, UniformWeightsGiveEachIndexOnce) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    EXPECT_EQ(systematic_resample({0.3, 0.3, 0.3, 0.3}, rng), (std::vector<std::size_t>{0, 1, 2, 3}));
  }
}

TEST(ResampleTest, CountsAreUnbiased) {
  Rng rng(2);
  const std::vector<double> lw{std::log(0.5), std::log(0.25), std::log(0.25)};
  std::vector<double> mean(3, 0.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> c(3, 0.0);
    for (auto i : systematic_resample(lw, rng, 10000)) c[i] += 1.0;
    for (int k = 0; k < 3; ++k) {
      EXPECT_LE(std::abs(c[k] - 10000.0 * std::exp(lw[k])), 1.0);
      mean[k] += c[k] / 100.0;
    }
  }
  EXPECT_NEAR(mean[0], 5000.0, 1.0);
  EXPECT_NEAR(mean[1], 2500.0, 1.0);
  EXPECT_NEAR(mean[2], 2500.0, 1.0);
}

TEST(ResampleTest, PreservesWeightedMeanOfTestFunctions) {
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 5 + static_cast<std::size_t>(rng.uniform() * 20);
    std::vector<double> lw(n), f(n);
    for (std::size_t i = 0; i < n; ++i) {
      lw[i] = rng.normal(0.0, 2.0);
      f[i] = rng.normal(0.0, 3.0);
    }
    const auto w = normalized_weights(lw);
    double target = 0.0, fmax = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      target += w[i] * f[i];
      fmax = std::max(fmax, std::abs(f[i]));
    }
    const int trials = 4000;
    double acc = 0.0, acc2 = 0.0;
    for (int t = 0; t < trials; ++t) {
      double m = 0.0;
      for (auto i : systematic_resample(lw, rng)) m += f[i] / static_cast<double>(n);
      acc += m;
      acc2 += m * m;
      // each count is within one of n·w_i
      EXPECT_LE(std::abs(m - target), 2.0 * fmax);
    }
    const double mean = acc / trials;
    const double se = std::sqrt(std::max(acc2 / trials - mean * mean, 0.0) / trials);
    EXPECT_NEAR(mean, target, 4.0 * se + 1e-12) << "rep " << rep;
  }
}

TEST(ResampleTest, EssAfterResamplingIsN) {
  Rng rng(4);
  std::vector<double> lw(50);
  for (double& v : lw) v = rng.normal(0.0, 3.0);
  EXPECT_LT(effective_sample_size(lw), 50.0);
  const auto idx = systematic_resample(lw, rng);
  EXPECT_EQ(idx.size(), 50u);
  const std::vector<double> after(idx.size(), 0.0);
  EXPECT_DOUBLE_EQ(effective_sample_size(after), 50.0);
}

// ---------------------------------------------------------------------------
// bootstrap filter

TEST(BootstrapFilterTest, MatchesKalmanWithinMonteCarloError) {
  const LgssmParams p = LgssmParams::scalar(0.9, 0.4, 1.0, 0.5, 0.3, 1.0, 10);
  Rng drng(5);
  const auto s = lgssm_sample(p, drng);
  const auto kf = kalman_filter(p, s.observations);
  const LgssmSmcModel model(p);
  const std::size_t R = 12;
  std::vector<std::vector<double>> means(p.T), vars(p.T);
  for (std::size_t r = 0; r < R; ++r) {
    Rng rng(100 + r);
    const auto sets = bootstrap_filter(model, rows(s.observations), {}, 10000, rng);
    for (std::size_t t = 0; t < p.T; ++t) {
      const auto [m, v] = sets[t].moments();
      means[t].push_back(m[0]);
      vars[t].push_back(v[0]);
    }
  }
  for (std::size_t t = 0; t < p.T; ++t) {
    EXPECT_NEAR(means[t][0], kf.filtered[t].mean(0), 3.0 * sd(means[t])) << "t=" << t + 1;
    EXPECT_NEAR(vars[t][0], kf.filtered[t].cov(0, 0), 3.0 * sd(vars[t])) << "t=" << t + 1;
  }
}

TEST(BootstrapFilterTest, ErrorShrinksWithParticleCount) {
  const LgssmParams p = LgssmParams::scalar(0.8, 0.5, 1.0, 0.3, 0.0, 1.0, 8);
  Rng drng(6);
  const auto s = lgssm_sample(p, drng);
  const auto kf = kalman_filter(p, s.observations);
  const LgssmSmcModel model(p);
  std::vector<double> med;
  for (std::size_t n : {100u, 1000u, 10000u}) {
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 31 + n);
      const auto sets = bootstrap_filter(model, rows(s.observations), {}, n, rng);
      double e = 0.0;
      for (std::size_t t = 0; t < p.T; ++t) {
        const auto [m, v] = sets[t].moments();
        e += std::abs(m[0] - kf.filtered[t].mean(0)) + std::abs(v[0] - kf.filtered[t].cov(0, 0));
      }
      errs.push_back(e);
    }
    med.push_back(median(errs));
  }
  EXPECT_GT(med[0], med[1]);
  EXPECT_GT(med[1], med[2]);
}

TEST(BootstrapFilterTest, DeterministicDynamicsAndSharpObservationsCollapse) {
  const LgssmParams p = LgssmParams::scalar(1.0, 0.0, 1.0, 1e-6, 0.0, 1.0, 5);
  Rng drng(7);
  const auto s = lgssm_sample(p, drng);
  Rng rng(8);
  const auto sets = bootstrap_filter(LgssmSmcModel(p), rows(s.observations), {}, 10000, rng);
  const auto [m, v] = sets.back().moments();
  EXPECT_NEAR(m[0], s.latents.back()(0), 1e-2);
  EXPECT_LT(v[0], 1e-4);
}

TEST(BootstrapFilterTest, SeedDeterminism) {
  const LgssmParams p = LgssmParams::scalar(0.9, 0.4, 1.0, 0.5, 0.3, 1.0, 6);
  Rng drng(9);
  const auto x = rows(lgssm_sample(p, drng).observations);
  Rng a(10), b(10);
  const auto sa = bootstrap_filter(LgssmSmcModel(p), x, {}, 500, a);
  const auto sb = bootstrap_filter(LgssmSmcModel(p), x, {}, 500, b);
  for (std::size_t t = 0; t < x.size(); ++t) {
    EXPECT_EQ(sa[t].particles, sb[t].particles);
    EXPECT_EQ(sa[t].log_weights, sb[t].log_weights);
  }
}

TEST(BootstrapFilterTest, EssBoundsAndEvidence) {
  const LgssmParams p = LgssmParams::scalar(0.9, 0.4, 1.0, 0.5, 0.3, 1.0, 8);
  Rng drng(11);
  const auto s = lgssm_sample(p, drng);
  Rng rng(12);
  const auto sets = bootstrap_filter(LgssmSmcModel(p), rows(s.observations), {}, 20000, rng);
  double log_z = 0.0;
  for (const auto& set : sets) {
    EXPECT_GE(set.ess, 1.0);
    EXPECT_LE(set.ess, 20000.0 + 1e-6);
    log_z += set.log_evidence_increment;
  }
  EXPECT_NEAR(log_z, kalman_filter(p, s.observations).log_likelihood, 0.05);
}

TEST(BootstrapFilterTest, ZeroLikelihoodReportsStep) {
  Rng rng(13);
  try {
    bootstrap_filter(BlockingModel(), {{0.0}, {0.0}, {1000.0}}, {}, 10, rng);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("t=3"), std::string::npos);
  }
  EXPECT_THROW(bootstrap_filter(BlockingModel(), {{0.0}}, {}, 1, rng), std::invalid_argument);
}

TEST(BootstrapFilterTest, RunsOnVssmWithConditions) {
  VssmConfig c;
  c.n_latent = 2;
  c.n_obs = 1;
  c.n_cond = 1;
  c.n_features = 4;
  c.transition_hidden = {4};
  c.emission_hidden = {4};
  c.inv_initial_hidden = {4};
  c.inv_disturbance_hidden = {4};
  Vssm m(c, 14);
  Rng rng(15);
  std::vector<std::vector<std::vector<double>>> u(1, std::vector<std::vector<double>>(6, {0.2}));
  const auto data = m.generate(1, 6, rng, &u);
  const VssmSmcModel model(m);
  const auto sets = bootstrap_filter(model, data.sequences[0].x, data.sequences[0].u, 200, rng);
  EXPECT_EQ(sets.size(), 6u);
  const auto futures = prefix_sample(model, sets[2], 3, {{0.2}, {0.2}, {0.2}}, 40, rng);
  EXPECT_EQ(futures.size(), 40u);
  EXPECT_EQ(futures[0].size(), 3u);
}

// Agrees with the VSSM that reproduces the same LGSSM.
TEST(BootstrapFilterTest, LinearVssmMatchesKalman) {
  const LgssmParams p = LgssmParams::scalar(0.9, 0.4, 1.0, 0.5, 0.3, 1.0, 6);
  Vssm m(condgap::testing::linear_vssm_config(), 16);
  condgap::testing::load_scalar_lgssm(m, p);
  Rng drng(17);
  const auto s = lgssm_sample(p, drng);
  const auto kf = kalman_filter(p, s.observations);
  Rng rng(18);
  const auto sets = bootstrap_filter(VssmSmcModel(m), rows(s.observations), {}, 50000, rng);
  for (std::size_t t = 0; t < p.T; ++t) {
    const auto [mu, v] = sets[t].moments();
    const double se = std::sqrt(kf.filtered[t].cov(0, 0) / sets[t].ess);
    EXPECT_NEAR(mu[0], kf.filtered[t].mean(0), 5.0 * se) << "t=" << t + 1;
  }
}

// ---------------------------------------------------------------------------
// prefix sampling and predictive checks

TEST(PrefixSampleTest, MatchesKalmanPredictive) {
  const LgssmParams p = LgssmParams::scalar(0.85, 0.3, 1.2, 0.4, 0.0, 1.0, 8);
  Rng drng(19);
  const auto s = lgssm_sample(p, drng);
  const std::size_t t = 4, horizon = p.T - t;
  Sequence prefix(s.observations.begin(), s.observations.begin() + t);
  LgssmParams pp = p;
  pp.T = t;
  const auto kf = kalman_filter(pp, prefix);
  double m = kf.filtered.back().mean(0), v = kf.filtered.back().cov(0, 0);
  for (std::size_t k = 0; k < horizon; ++k) {
    m = p.A(0, 0) * m;
    v = p.A(0, 0) * p.A(0, 0) * v + p.q_diag(0);
  }
  const double pred_mean = p.H(0, 0) * m, pred_var = p.H(0, 0) * p.H(0, 0) * v + p.r_diag(0);

  Rng rng(20);
  const LgssmSmcModel model(p);
  const auto sets = bootstrap_filter(model, rows(prefix), {}, 100000, rng);
  const std::size_t n = 20000;
  const auto futures = prefix_sample(model, sets.back(), horizon, {}, n, rng);
  double a = 0.0, a2 = 0.0;
  for (const auto& f : futures) {
    a += f.back()[0];
    a2 += f.back()[0] * f.back()[0];
  }
  const double mean = a / n, var = a2 / n - mean * mean;
  EXPECT_NEAR(mean, pred_mean, 4.0 * std::sqrt(pred_var / n));
  EXPECT_NEAR(var, pred_var, 4.0 * pred_var * std::sqrt(2.0 / n));
}

TEST(PrefixSampleTest, ZeroNoiseFuturesAreIdentical) {
  const LgssmParams p = LgssmParams::scalar(0.9, 0.0, 1.0, 0.0, 0.5, 0.0, 5);
  const LgssmSmcModel model(p);
  Rng rng(21);
  ParticleSet set;
  set.particles = model.sample_initial(10, rng);
  set.log_weights.assign(10, 0.0);
  set.ess = 10.0;
  const auto futures = prefix_sample(model, set, 4, {}, 50, rng);
  for (const auto& f : futures) EXPECT_EQ(f, futures[0]);
}

TEST(PrefixSampleTest, SeedDeterminism) {
  const LgssmParams p = LgssmParams::scalar(0.9, 0.4, 1.0, 0.5, 0.0, 1.0, 5);
  const LgssmSmcModel model(p);
  Rng drng(22);
  const auto x = rows(lgssm_sample(p, drng).observations);
  Rng a(23), b(23);
  const auto fa = prefix_sample(model, bootstrap_filter(model, x, {}, 300, a).back(), 3, {}, 30, a);
  const auto fb = prefix_sample(model, bootstrap_filter(model, x, {}, 300, b).back(), 3, {}, 30, b);
  EXPECT_EQ(fa, fb);
}

TEST(PpcTest, ConcentratedFuturesScoreHigher) {
  std::vector<Row> exact(40, Row{1.5});
  Rng rng(24);
  std::vector<Row> spread;
  for (int i = 0; i < 40; ++i) spread.push_back({1.5 + rng.normal()});
  EXPECT_GT(ppc_final_density(exact, {1.5}).log_density_at_truth,
            ppc_final_density(spread, {1.5}).log_density_at_truth + 5.0);
}

TEST(PpcTest, UnimodalOrdering) {
  Rng rng(25);
  std::vector<Row> f;
  for (int i = 0; i < 500; ++i) f.push_back({rng.normal()});
  EXPECT_GT(ppc_final_density(f, {0.0}).log_density_at_truth, ppc_final_density(f, {3.0}).log_density_at_truth);
}

TEST(PpcTest, KdeOfStandardNormalAtZero) {
  Rng rng(26);
  std::vector<Row> f;
  for (int i = 0; i < 100000; ++i) f.push_back({rng.normal()});
  const auto r = ppc_final_density(f, {0.0}, 11);
  EXPECT_NEAR(std::exp(r.log_density_at_truth), 1.0 / std::sqrt(2.0 * std::numbers::pi), 0.01);
}

TEST(PpcTest, GridDensityIntegratesToOne) {
  Rng rng(27);
  std::vector<Row> f;
  for (int i = 0; i < 300; ++i) f.push_back({rng.normal(), 2.0 * rng.normal()});
  const auto r = ppc_final_density(f, {0.1, -0.2}, 401);
  ASSERT_EQ(r.dims.size(), 2u);
  for (const auto& d : r.dims) {
    double area = 0.0;
    for (std::size_t g = 1; g < d.grid.size(); ++g) area += 0.5 * (d.density[g] + d.density[g - 1]) * (d.grid[g] - d.grid[g - 1]);
    EXPECT_NEAR(area, 1.0, 2e-3);
  }
  EXPECT_NEAR(r.log_density_at_truth, r.dims[0].log_density_at_truth + r.dims[1].log_density_at_truth, 1e-12);
}

TEST(PpcTest, NeedsThirtyFutures) {
  std::vector<Row> f(29, Row{0.0});
  EXPECT_THROW(ppc_final_density(f, {0.0}), std::invalid_argument);
}

TEST(SilvermanTest, MatchesRuleOfThumb) {
  Rng rng(28);
  std::vector<double> v(1000);
  for (double& a : v) a = rng.normal(0.0, 2.0);
  const double h = silverman_bandwidth(v);
  EXPECT_NEAR(h, 0.9 * 2.0 * std::pow(1000.0, -0.2), 0.1 * h);
}
