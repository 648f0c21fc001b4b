#include <cstdlib>
#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace condgap;
using namespace condgap::cli;

namespace {

struct Subcommand {
  const char* name;
  const char* help;
  int (*run)(const Context&);
  const char* keys;
};

const Subcommand kCommands[] = {
    {"demo-univariate", "Univariate linear-Gaussian example: ML vs expected-ELBO argmax, shared posterior table, densities",
     demo_univariate,
     "obs_noise_var, a_grid{min,max,points}, density_grid{min,max,points}, quadrature_order, posterior_x"},
    {"demo-bimodal", "Two-posterior scenarios: shared posterior, mixture, reverse-KL fit, gap, densities", demo_bimodal,
     "seed, density_grid{min,max,points}, fit{steps,learning_rate,batch}, scenarios[{name,means,vars,weights}]"},
    {"gap-lgssm", "Closed-form conditioning gap of a linear-Gaussian SSM, per step and under Q/R sweeps", gap_lgssm,
     "lgssm{A,Q,H,R,m0,P0,T} (matrices row-major, Q/R diagonals), initial_peek, sweep{q_scales,r_scales}"},
    {"gen-data", "Generate train/val/test JSONL sequence files from a dataset spec", gen_data,
     "data{kind,T,n_train,n_val,n_test,seed,branching{..},traffic{..},grid{..},lgssm{..}}"},
    {"train", "Train a residual VSSM; writes train_log.csv, checkpoint.json, summary.json", train,
     "seed, data{train,val,test | generate{..}}, model{..}, train{batch_size,learning_rate,n_updates,"
     "n_posterior_samples,clip_norm,kl_warmup_updates,kl_warmup_start,eval_samples}"},
    {"eval-elbo", "ELBO table (model x split) averaged over posterior samples", eval_elbo,
     "seed, n_samples, batch_size, checkpoint | checkpoints{label: path}, data{train,val,test | generate{..}}"},
    {"prefix-sample", "Particle-filter a prefix, sample futures, score the final value by KDE", prefix_sample,
     "seed, checkpoint | lgssm{..}, dataset, sequences, prefix_length, n_particles, n_futures, resample_threshold, "
     "grid_points"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"condgap: conditioning-gap laboratory for sequential latent-variable models"};
  app.require_subcommand(1);
  std::string config_path, out = "out";
  std::optional<std::uint64_t> seed;

  auto add_globals = [&](CLI::App* a) {
    a->add_option("--config", config_path, "JSON config file (unknown keys are rejected)")->check(CLI::ExistingFile);
    a->add_option("--seed", seed, "Seed; overrides the config's seed");
    a->add_option("--out", out, "Output directory (created if missing)")->capture_default_str();
  };
  add_globals(&app);
  app.fallthrough();
  app.footer("Env: CONDGAP_THREADS caps worker threads. Exit codes: 0 ok, 1 usage/config error, 2 runtime error.");

  std::vector<std::pair<CLI::App*, const Subcommand*>> subs;
  for (const auto& c : kCommands) {
    CLI::App* s = app.add_subcommand(c.name, c.help);
    add_globals(s);
    s->footer(std::string("Config keys: ") + c.keys);
    subs.emplace_back(s, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  Context ctx;
  ctx.config_path = config_path;
  ctx.seed = seed;
  ctx.out = out;
  ctx.threads = configured_threads();
  const Subcommand* cmd = nullptr;
  for (const auto& [s, c] : subs)
    if (s->parsed()) cmd = c;
  ctx.command = cmd->name;

  try {
    if (!config_path.empty()) ctx.config = load_json(config_path, "config");
    if (!ctx.config.is_object()) throw ConfigError("config: '<root>' must be an object");
    return cmd->run(ctx);
  } catch (const ConfigError& e) {
    std::cerr << "condgap " << ctx.command << ": " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "condgap " << ctx.command << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "condgap " << ctx.command << ": error: " << e.what() << "\n";
    return 2;
  }
}
