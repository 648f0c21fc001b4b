#include <map>

#include "commands.hpp"
#include "condgap/smc.hpp"
#include "condgap/vssm_train.hpp"

namespace condgap::cli {

namespace {

/// "data": {"train": path, "val": path, "test": path} or {"generate": spec}.
std::vector<std::pair<std::string, SequenceDataset>> read_splits(ConfigReader r, std::size_t threads) {
  std::vector<std::pair<std::string, SequenceDataset>> out;
  if (r.has("generate")) {
    const DatasetSpec spec = dataset_spec_from_json(r.child("generate"));
    r.finish();
    auto d = generate_dataset(spec, threads);
    out.emplace_back("train", std::move(d.train.data));
    out.emplace_back("val", std::move(d.val.data));
    out.emplace_back("test", std::move(d.test.data));
    return out;
  }
  for (const char* name : {"train", "val", "test"}) {
    const auto path = r.get<std::string>(name, "");
    if (!path.empty()) out.emplace_back(name, load_dataset(path));
  }
  r.finish();
  if (out.empty()) throw UsageError("config: 'data' names no dataset (give train/val/test paths or 'generate')");
  return out;
}

const SequenceDataset* find_split(const std::vector<std::pair<std::string, SequenceDataset>>& s, const std::string& name) {
  for (const auto& [n, d] : s)
    if (n == name) return &d;
  return nullptr;
}

Vssm load_checkpoint(const std::string& path) {
  if (path.empty()) throw UsageError("no checkpoint path given");
  const auto j = load_json(path, "checkpoint");
  try {
    return Vssm::from_checkpoint(j);
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint '" + path + "': " + e.what());
  }
}

void check_shapes(const VssmConfig& c, const SequenceDataset& d, const std::string& what) {
  if (d.n_obs() != c.n_obs || d.n_cond() != c.n_cond)
    throw std::runtime_error(what + " has n_obs=" + std::to_string(d.n_obs()) + ", n_cond=" + std::to_string(d.n_cond()) +
                             " but the model expects n_obs=" + std::to_string(c.n_obs) + ", n_cond=" + std::to_string(c.n_cond));
  try {
    c.mode.validate(d.T());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(what + ": " + e.what());
  }
}

}  // namespace

int train(const Context& ctx) {
  ConfigReader r(ctx.config);
  const std::uint64_t seed = ctx.seed_or(r.get<std::uint64_t>("seed", 0));
  const auto splits = read_splits(r.child("data"), ctx.threads);
  const SequenceDataset* train_set = find_split(splits, "train");
  if (!train_set) throw UsageError("config: 'data.train' is required");

  nlohmann::json model_json = ctx.config.contains("model") ? ctx.config.at("model") : nlohmann::json::object();
  (void)r.raw("model");
  if (!model_json.is_object()) throw ConfigError("config: 'model' must be an object");
  if (!model_json.contains("n_obs")) model_json["n_obs"] = train_set->n_obs();
  if (!model_json.contains("n_cond")) model_json["n_cond"] = train_set->n_cond();
  const VssmConfig mc = vssm_config_from_json(model_json);

  TrainConfig tc;
  tc.seed = seed;
  std::size_t eval_samples = 10;
  {
    auto t = r.child("train");
    tc.batch_size = t.get("batch_size", tc.batch_size);
    tc.optimizer.learning_rate = t.get("learning_rate", tc.optimizer.learning_rate);
    tc.n_updates = t.get("n_updates", tc.n_updates);
    tc.n_posterior_samples = t.get("n_posterior_samples", tc.n_posterior_samples);
    tc.clip_norm = t.get("clip_norm", tc.clip_norm);
    tc.kl_warmup_updates = t.get("kl_warmup_updates", tc.kl_warmup_updates);
    tc.kl_warmup_start = t.get("kl_warmup_start", tc.kl_warmup_start);
    eval_samples = t.get("eval_samples", eval_samples);
    t.finish();
  }
  r.finish();
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [name, d] : splits) check_shapes(mc, d, "split '" + name + "'");

  Vssm model(mc, seed);
  Csv log({"step", "elbo", "recon", "kl"});
  const TrainResult res = train_vssm(model, *train_set, tc, [&](const TrainLogRow& row) {
    log.row(row.step, row.elbo, row.recon, row.kl);
  });
  write_file(ctx.out / "train_log.csv", log.str());
  write_json(ctx.out / "checkpoint.json", model.checkpoint({{"seed", seed}, {"completed_updates", res.completed_updates}}));

  nlohmann::json summary = {{"seed", seed},
                            {"mode", mc.mode.name()},
                            {"sneak_peek", mc.mode.sneak_peek},
                            {"completed_updates", res.completed_updates},
                            {"aborted", res.aborted},
                            {"abort_reason", res.abort_reason}};
  if (eval_samples > 0)
    for (const auto& [name, d] : splits) {
      if (name == "train") continue;
      const EvalResult e = evaluate_elbo(model, d, eval_samples, seed, 256, ctx.threads);
      summary["elbo"][name] = {{"mean", e.mean}, {"std", e.std}, {"per_step_mean", e.mean_per_step}, {"per_step_std", e.std_per_step}};
    }
  write_json(ctx.out / "summary.json", summary);
  write_metadata(ctx);
  if (res.aborted) throw std::runtime_error("training stopped at " + res.abort_reason + "; checkpoint holds the last finite parameters");
  return 0;
}

int eval_elbo(const Context& ctx) {
  ConfigReader r(ctx.config);
  const std::uint64_t seed = ctx.seed_or(r.get<std::uint64_t>("seed", 0));
  const auto n_samples = r.get<std::size_t>("n_samples", 10);
  const auto batch = r.get<std::size_t>("batch_size", 256);
  std::map<std::string, std::string> ckpts;
  if (const auto* c = r.raw("checkpoints")) {
    if (!c->is_object() || c->empty()) throw ConfigError("config: 'checkpoints' must be a non-empty object {label: path}");
    for (auto it = c->begin(); it != c->end(); ++it) {
      if (!it.value().is_string()) throw ConfigError("config: 'checkpoints." + it.key() + "' must be a string");
      ckpts[it.key()] = it.value().get<std::string>();
    }
  }
  if (const auto path = r.get<std::string>("checkpoint", ""); !path.empty()) ckpts["model"] = path;
  if (ckpts.empty()) throw UsageError("config: give 'checkpoint' or 'checkpoints'");
  const auto splits = read_splits(r.child("data"), ctx.threads);
  r.finish();
  if (n_samples < 2) throw ConfigError("config: 'n_samples' must be >= 2");
  if (batch == 0) throw ConfigError("config: 'batch_size' must be > 0");

  Csv table({"model", "mode", "sneak_peek", "split", "n_sequences", "T", "elbo_mean", "elbo_std", "elbo_per_step_mean",
             "elbo_per_step_std"});
  Csv samples({"model", "split", "sample", "elbo"});
  for (const auto& [label, path] : ckpts) {
    const Vssm model = load_checkpoint(path);
    for (const auto& [name, d] : splits) {
      check_shapes(model.config(), d, "split '" + name + "'");
      const EvalResult e = evaluate_elbo(model, d, n_samples, seed, batch, ctx.threads);
      table.row(label, model.config().mode.name(), model.config().mode.sneak_peek, name, d.size(), d.T(), e.mean, e.std,
                e.mean_per_step, e.std_per_step);
      for (std::size_t s = 0; s < e.sample_means.size(); ++s) samples.row(label, name, s, e.sample_means[s]);
    }
  }
  write_file(ctx.out / "elbo_table.csv", table.str());
  write_file(ctx.out / "elbo_samples.csv", samples.str());
  write_metadata(ctx, {{"seed", seed}});
  return 0;
}

int prefix_sample(const Context& ctx) {
  ConfigReader r(ctx.config);
  const std::uint64_t seed = ctx.seed_or(r.get<std::uint64_t>("seed", 0));
  const auto ckpt = r.get<std::string>("checkpoint", "");
  std::optional<LgssmParams> lgssm;
  if (r.has("lgssm")) lgssm = lgssm_params_from_json(r.child("lgssm"), 1);
  const auto data_path = r.require<std::string>("dataset");
  const auto seqs = r.get("sequences", std::vector<std::size_t>{0});
  const auto t = r.require<std::size_t>("prefix_length");
  const auto n_particles = r.get<std::size_t>("n_particles", 1000);
  const auto n_futures = r.get<std::size_t>("n_futures", 100);
  const auto threshold = r.get("resample_threshold", 0.5);
  const auto grid_points = r.get<std::size_t>("grid_points", 101);
  r.finish();
  if (ckpt.empty() == !lgssm.has_value()) throw UsageError("config: give exactly one of 'checkpoint' and 'lgssm'");
  if (n_particles < 2) throw ConfigError("config: 'n_particles' must be >= 2");
  if (n_futures < 30) throw ConfigError("config: 'n_futures' must be >= 30 for the density estimate");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("config: 'resample_threshold' must lie in [0, 1]");
  if (grid_points < 2) throw ConfigError("config: 'grid_points' must be >= 2");

  const SequenceDataset data = load_dataset(data_path);
  const std::size_t T = data.T();
  if (t < 1 || t >= T)
    throw ConfigError("config: 'prefix_length' must lie in [1, T-1] = [1, " + std::to_string(T - 1) + "]");
  for (auto i : seqs)
    if (i >= data.size()) throw ConfigError("config: 'sequences' index " + std::to_string(i) + " out of range");

  std::optional<Vssm> vssm;
  std::unique_ptr<SmcModel> model;
  if (lgssm) {
    if (static_cast<std::size_t>(lgssm->n_obs()) != data.n_obs()) throw std::runtime_error("dataset n_obs does not match lgssm H");
    model = std::make_unique<LgssmSmcModel>(*lgssm);
  } else {
    vssm.emplace(load_checkpoint(ckpt));
    check_shapes(vssm->config(), data, "dataset");
    model = std::make_unique<VssmSmcModel>(*vssm);
  }

  const std::size_t h = T - t;
  Csv futures({"sequence", "future", "step", "dim", "value"});
  Csv ppc({"sequence", "dim", "bandwidth", "log_density_at_truth"});
  Csv dens({"sequence", "dim", "x", "density"});
  nlohmann::json summary = nlohmann::json::array();
  const Rng root(seed, 0x9f1e);
  double total = 0.0;
  for (std::size_t si = 0; si < seqs.size(); ++si) {
    const auto& rec = data.sequences[seqs[si]];
    Rng rng = root.split(si);
    const std::vector<Row> prefix(rec.x.begin(), rec.x.begin() + static_cast<std::ptrdiff_t>(t));
    const auto sets = bootstrap_filter(*model, prefix, rec.u, n_particles, rng, threshold);
    std::vector<Row> u_future;
    if (!rec.u.empty()) u_future.assign(rec.u.begin() + static_cast<std::ptrdiff_t>(t - 1), rec.u.end() - 1);
    const auto f = prefix_sample(*model, sets.back(), h, u_future, n_futures, rng);
    std::vector<Row> finals;
    for (std::size_t k = 0; k < f.size(); ++k) {
      for (std::size_t s = 0; s < h; ++s)
        for (std::size_t d = 0; d < f[k][s].size(); ++d) futures.row(seqs[si], k, t + s + 1, d, f[k][s][d]);
      finals.push_back(f[k].back());
    }
    const PpcResult p = ppc_final_density(finals, rec.x.back(), grid_points);
    for (std::size_t d = 0; d < p.dims.size(); ++d) {
      ppc.row(seqs[si], d, p.dims[d].bandwidth, p.dims[d].log_density_at_truth);
      for (std::size_t g = 0; g < p.dims[d].grid.size(); ++g) dens.row(seqs[si], d, p.dims[d].grid[g], p.dims[d].density[g]);
    }
    double log_z = 0.0;
    for (const auto& s : sets) log_z += s.log_evidence_increment;
    std::vector<double> mean(finals[0].size(), 0.0), var(finals[0].size(), 0.0);
    for (const auto& v : finals)
      for (std::size_t d = 0; d < v.size(); ++d) mean[d] += v[d] / static_cast<double>(finals.size());
    for (const auto& v : finals)
      for (std::size_t d = 0; d < v.size(); ++d) var[d] += (v[d] - mean[d]) * (v[d] - mean[d]) / static_cast<double>(finals.size() - 1);
    summary.push_back({{"sequence", seqs[si]},
                       {"prefix_log_evidence", log_z},
                       {"ess_at_prefix_end", sets.back().ess},
                       {"final_truth", rec.x.back()},
                       {"final_future_mean", mean},
                       {"final_future_var", var},
                       {"log_density_at_truth", p.log_density_at_truth}});
    total += p.log_density_at_truth;
  }
  write_file(ctx.out / "futures.csv", futures.str());
  write_file(ctx.out / "ppc.csv", ppc.str());
  write_file(ctx.out / "ppc_density.csv", dens.str());
  write_json(ctx.out / "summary.json", {{"seed", seed},
                                        {"prefix_length", t},
                                        {"horizon", h},
                                        {"n_particles", n_particles},
                                        {"n_futures", n_futures},
                                        {"mean_log_density_at_truth", total / static_cast<double>(seqs.size())},
                                        {"sequences", summary}});
  write_metadata(ctx);
  return 0;
}

}  // namespace condgap::cli
