#include <cmath>

#include "commands.hpp"
#include "condgap/analytic_gap.hpp"

namespace condgap::cli {

namespace {

std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  double a = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) a += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return a;
}

double normal_pdf(double z, double m, double v) { return std::exp(-0.5 * (z - m) * (z - m) / v) / std::sqrt(2.0 * std::numbers::pi * v); }

struct Grid {
  double lo, hi;
  std::size_t points;
};

Grid read_grid(ConfigReader& parent, const std::string& key, Grid g) {
  auto r = parent.child(key);
  g.lo = r.get("min", g.lo);
  g.hi = r.get("max", g.hi);
  g.points = r.get("points", g.points);
  r.finish();
  if (!(g.hi > g.lo) || g.points < 2) throw ConfigError("config: '" + parent.full(key) + "' needs min < max and points >= 2");
  return g;
}

}  // namespace

int demo_univariate(const Context& ctx) {
  ConfigReader r(ctx.config);
  const double v = r.get("obs_noise_var", 0.1);
  const Grid a_grid = read_grid(r, "a_grid", {0.0, 2.0, 2001});
  const Grid z_grid = read_grid(r, "density_grid", {-4.0, 4.0, 801});
  const auto order = r.get<std::size_t>("quadrature_order", 40);
  const auto xs = r.get("posterior_x", std::vector<double>{-1.0, 0.0, 1.0});
  r.finish();
  if (!(v > 0.0)) throw ConfigError("config: 'obs_noise_var' must be > 0");
  if (!(v < 1.0)) throw ConfigError("config: 'obs_noise_var' must be < 1 so that a* = sqrt(1 - v) exists");

  const auto rule = gauss_hermite(order);
  const auto grid = linspace(a_grid.lo, a_grid.hi, a_grid.points);
  const auto rep = univariate_ml_vs_elbo_argmax(grid, rule, v);
  const double a_star = std::sqrt(1.0 - v);
  const UnivariateModel m_star{a_star, v};
  const DiagGaussian w_star = univariate_optimal_shared_q(m_star);

  Csv table({"a", "w_mean", "w_var", "w_var_100a2", "expected_log_marginal", "best_expected_elbo", "gap"});
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const DiagGaussian w = univariate_optimal_shared_q({grid[i], v});
    table.row(grid[i], w.mean[0], w.var[0], 1.0 / (100.0 * grid[i] * grid[i] + 1.0), rep.expected_log_marginal[i],
              rep.best_expected_elbo[i], rep.expected_log_marginal[i] - rep.best_expected_elbo[i]);
  }
  write_file(ctx.out / "w_table.csv", table.str());

  std::vector<std::string> header{"z", "prior", "w_a_star"};
  for (double x : xs) header.push_back("posterior_x=" + format_double(x));
  const auto zs = linspace(z_grid.lo, z_grid.hi, z_grid.points);
  std::vector<std::vector<double>> cols(2 + xs.size());
  for (double z : zs) {
    cols[0].push_back(normal_pdf(z, 0.0, 1.0));
    cols[1].push_back(normal_pdf(z, w_star.mean[0], w_star.var[0]));
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const auto p = univariate_true_posterior(m_star, xs[k]);
      cols[2 + k].push_back(normal_pdf(z, p.mean[0], p.var[0]));
    }
  }
  write_columns(ctx.out / "densities.csv", header, zs, cols);

  nlohmann::json report;
  report["obs_noise_var"] = v;
  report["a_star"] = a_star;
  report["ml_argmax"] = rep.ml_argmax;
  report["elbo_argmax"] = rep.elbo_argmax;
  report["elbo_argmax_differs"] = rep.differ;
  report["grid_step"] = grid.size() > 1 ? grid[1] - grid[0] : 0.0;
  report["w_a_star"] = {{"mean", w_star.mean[0]}, {"var", w_star.var[0]}};
  report["w_a_star_var_100a2"] = 1.0 / (100.0 * a_star * a_star + 1.0);
  report["expected_elbo_at_a_star"] = expected_elbo_univariate(m_star, w_star, rule);
  report["expected_log_marginal_at_a_star"] = expected_log_marginal_univariate(m_star, rule);
  write_json(ctx.out / "report.json", report);
  write_metadata(ctx);
  return 0;
}

int demo_bimodal(const Context& ctx) {
  ConfigReader r(ctx.config);
  const std::uint64_t seed = ctx.seed_or(r.get<std::uint64_t>("seed", 0));
  const Grid z_grid = read_grid(r, "density_grid", {-6.0, 6.0, 2401});
  ReverseKlConfig fit;
  {
    auto f = r.child("fit");
    fit.steps = f.get("steps", fit.steps);
    fit.learning_rate = f.get("learning_rate", fit.learning_rate);
    fit.batch = f.get("batch", fit.batch);
    f.finish();
  }
  struct Named {
    std::string name;
    ConditioningScenario s;
  };
  std::vector<Named> scenarios;
  if (const auto* raw = r.raw("scenarios")) {
    if (!raw->is_array() || raw->empty()) throw ConfigError("config: 'scenarios' must be a non-empty array");
    for (std::size_t i = 0; i < raw->size(); ++i) {
      ConfigReader sr((*raw)[i], "scenarios[" + std::to_string(i) + "]");
      const auto name = sr.require<std::string>("name");
      const auto means = sr.require<std::vector<double>>("means");
      const auto vars = sr.require<std::vector<double>>("vars");
      auto weights = sr.get("weights", std::vector<double>(means.size(), 1.0 / static_cast<double>(means.size())));
      sr.finish();
      if (means.size() != vars.size() || means.size() != weights.size() || means.empty())
        throw ConfigError("config: '" + sr.full("means") + "', vars and weights must have the same non-zero length");
      std::vector<DiagGaussian> post;
      try {
        for (std::size_t k = 0; k < means.size(); ++k) post.push_back(DiagGaussian::scalar(means[k], vars[k]));
        ConditioningScenario s{post, weights};
        s.validate();
        scenarios.push_back({name, s});
      } catch (const std::invalid_argument& e) {
        throw ConfigError("config: 'scenarios[" + std::to_string(i) + "]': " + e.what());
      }
    }
  } else {
    scenarios.push_back({"separated", ConditioningScenario::uniform({DiagGaussian::scalar(-2.0, 0.1), DiagGaussian::scalar(2.0, 0.1)})});
    scenarios.push_back({"overlapping", ConditioningScenario::uniform({DiagGaussian::scalar(-0.5, 1.0), DiagGaussian::scalar(0.5, 1.0)})});
  }
  r.finish();

  const auto zs = linspace(z_grid.lo, z_grid.hi, z_grid.points);
  const Rng root(seed, 0xb1d0);
  nlohmann::json report = nlohmann::json::array();
  for (std::size_t si = 0; si < scenarios.size(); ++si) {
    const auto& [name, s] = scenarios[si];
    const GapReport gap = conditioning_gap(s);
    const GaussianMixture mix = marginal_posterior(s);
    const DiagGaussian mom = mix.moments();
    Rng rng = root.split(si);
    // start slightly off-centre so a symmetric target does not pin the fit to the saddle
    const DiagGaussian init = DiagGaussian::scalar(mom.mean[0] + 0.1 * std::sqrt(mom.var[0]), mom.var[0]);
    const DiagGaussian vhat = fit_gaussian_reverse_kl(mix, init, fit, rng);

    std::vector<std::string> header{"z"};
    for (std::size_t k = 0; k < s.size(); ++k) header.push_back("posterior_" + std::to_string(k));
    header.insert(header.end(), {"mixture", "w", "v_hat"});
    std::vector<std::vector<double>> cols(header.size() - 1);
    for (double z : zs) {
      for (std::size_t k = 0; k < s.size(); ++k)
        cols[k].push_back(normal_pdf(z, s.full_posteriors[k].mean[0], s.full_posteriors[k].var[0]));
      cols[s.size()].push_back(mix.density(z));
      cols[s.size() + 1].push_back(normal_pdf(z, gap.shared_posterior.mean[0], gap.shared_posterior.var[0]));
      cols[s.size() + 2].push_back(normal_pdf(z, vhat.mean[0], vhat.var[0]));
    }
    write_columns(ctx.out / ("densities_" + name + ".csv"), header, zs, cols);

    nlohmann::json integrals;
    for (std::size_t k = 0; k < cols.size(); ++k) integrals[header[k + 1]] = trapezoid(zs, cols[k]);
    nlohmann::json posts = nlohmann::json::array();
    for (std::size_t k = 0; k < s.size(); ++k)
      posts.push_back({{"mean", s.full_posteriors[k].mean[0]}, {"var", s.full_posteriors[k].var[0]},
                       {"weight", s.cond_weights[k]}, {"kl_w_to_posterior", gap.per_condition_kl[k]}});
    report.push_back({{"name", name},
                      {"posteriors", posts},
                      {"gap", gap.gap},
                      {"w", {{"mean", gap.shared_posterior.mean[0]}, {"var", gap.shared_posterior.var[0]}}},
                      {"mixture", {{"mean", mom.mean[0]}, {"var", mom.var[0]}}},
                      {"v_hat", {{"mean", vhat.mean[0]}, {"var", vhat.var[0]}}},
                      {"expected_kl_w", expected_kl(gap.shared_posterior, s)},
                      {"expected_kl_v_hat", expected_kl(vhat, s)},
                      {"density_integrals", integrals}});
  }
  write_json(ctx.out / "report.json", {{"seed", seed}, {"scenarios", report}});
  write_metadata(ctx);
  return 0;
}

}  // namespace condgap::cli
