#include "commands.hpp"
#include "condgap/lgssm.hpp"

namespace condgap::cli {

namespace {

bool non_increasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[i - 1] + 1e-12) return false;
  return true;
}

}  // namespace

int gap_lgssm(const Context& ctx) {
  ConfigReader r(ctx.config);
  const LgssmParams p = r.has("lgssm") ? lgssm_params_from_json(r.child("lgssm"), 20)
                                       : LgssmParams::scalar(0.9, 0.5, 1.0, 0.5, 0.0, 1.0, 20);
  LgssmGapOptions opt;
  opt.initial_peek = r.get("initial_peek", opt.initial_peek);
  std::vector<double> q_scales{1.0, 0.5, 0.25, 0.1, 0.05, 0.01, 1e-3, 0.0};
  std::vector<double> r_scales{1.0, 0.5, 0.25, 0.1, 0.05, 0.01, 1e-3, 1e-6};
  {
    auto s = r.child("sweep");
    q_scales = s.get("q_scales", q_scales);
    r_scales = s.get("r_scales", r_scales);
    s.finish();
  }
  r.finish();
  for (double v : q_scales)
    if (!(v >= 0.0)) throw ConfigError("config: 'sweep.q_scales' entries must be >= 0");
  for (double v : r_scales)
    if (!(v > 0.0)) throw ConfigError("config: 'sweep.r_scales' entries must be > 0");
  if ((p.r_diag.array() <= 0).any()) throw ConfigError("config: 'lgssm.R' must be positive");

  const auto base = lgssm_conditioning_gap(p, opt);
  Csv steps({"t", "gap", "marginal_gap"});
  for (std::size_t t = 0; t < p.T; ++t) steps.row(t + 1, base.per_step[t], base.marginal_per_step[t]);
  write_file(ctx.out / "gap_per_step.csv", steps.str());

  Csv sweep({"noise", "scale", "total_gap", "marginal_total_gap"});
  std::vector<double> q_tot, r_tot;
  for (double s : q_scales) {
    LgssmParams v = p;
    v.q_diag *= s;
    const auto g = lgssm_conditioning_gap(v, opt);
    sweep.row("Q", s, g.total, g.marginal_total);
    q_tot.push_back(g.total);
  }
  for (double s : r_scales) {
    LgssmParams v = p;
    v.r_diag *= s;
    const auto g = lgssm_conditioning_gap(v, opt);
    sweep.row("R", s, g.total, g.marginal_total);
    r_tot.push_back(g.total);
  }
  write_file(ctx.out / "sweep.csv", sweep.str());

  const bool h_identity = p.H.rows() == p.H.cols() && p.H.isIdentity();
  write_json(ctx.out / "summary.json",
             {{"lgssm", lgssm_params_to_json(p)},
              {"initial_peek", opt.initial_peek},
              {"total_gap", base.total},
              {"marginal_total_gap", base.marginal_total},
              {"q_sweep_non_increasing", non_increasing(q_tot)},
              {"r_sweep_non_increasing", non_increasing(r_tot)},
              {"h_is_identity", h_identity}});
  write_metadata(ctx);
  return 0;
}

int gen_data(const Context& ctx) {
  ConfigReader r(ctx.config);
  DatasetSpec spec = dataset_spec_from_json(r.child("data"));
  r.finish();
  if (ctx.seed) spec.seed = *ctx.seed;
  const GeneratedData d = generate_dataset(spec, ctx.threads);
  Csv labels({"split", "index", "label", "event_step"});
  for (const auto& [name, split] : {std::pair<const char*, const GeneratedSplit*>{"train", &d.train}, {"val", &d.val}, {"test", &d.test}}) {
    std::ostringstream os;
    write_jsonl(os, split->data);
    write_file(ctx.out / (std::string(name) + ".jsonl"), os.str());
    for (std::size_t i = 0; i < split->label.size(); ++i) labels.row(name, i, split->label[i], split->event_step[i]);
  }
  write_file(ctx.out / "labels.csv", labels.str());
  write_json(ctx.out / "spec.json", dataset_spec_to_json(spec));
  if (spec.kind == DatasetKind::branching) {
    const auto p = branching_lgssm_surrogate(spec, d.train);
    const auto g = lgssm_conditioning_gap(p);
    write_json(ctx.out / "surrogate_gap.json",
               {{"lgssm", lgssm_params_to_json(p)}, {"total_gap", g.total}, {"per_step", g.per_step}});
  }
  write_metadata(ctx);
  return 0;
}

}  // namespace condgap::cli
