#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("condgap_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args, std::string* err = nullptr, const std::string& env = "") {
  const fs::path log = workdir() / "stderr.txt";
  const std::string cmd = "cd '" + workdir().string() + "' && " + env + "'" CONDGAP_BIN "' " + args + " > /dev/null 2> '" + log.string() + "'";
  const int status = std::system(cmd.c_str());
  if (err) {
    std::ifstream f(log);
    *err = std::string(std::istreambuf_iterator<char>(f), {});
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void put(const std::string& name, const nlohmann::json& j) { std::ofstream(workdir() / name) << j.dump(); }

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(workdir() / p)); }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(workdir() / p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

/// Every file under a and b except metadata.json, compared byte for byte.
void expect_same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(workdir() / a)) {
    if (!e.is_regular_file() || e.path().filename() == "metadata.json") continue;
    const auto rel = fs::relative(e.path(), workdir() / a);
    EXPECT_EQ(slurp(e.path()), slurp(workdir() / b / rel)) << rel;
    ++n;
  }
  EXPECT_GT(n, 0u);
}

const nlohmann::json kSmallData = {{"data", {{"kind", "branching"}, {"T", 10}, {"n_train", 40}, {"n_val", 20}, {"n_test", 20}, {"seed", 3}}}};

nlohmann::json small_train(const std::string& mode, std::size_t updates) {
  return {{"seed", 1},
          {"data", {{"train", "data/train.jsonl"}, {"val", "data/val.jsonl"}}},
          {"model",
           {{"n_latent", 2},
            {"conditioning", {{"mode", mode}, {"sneak_peek", mode == "semi" ? 4 : (mode == "partial" ? 1 : 0)}}},
            {"transition", {{"layers", {8}}}},
            {"emission", {{"layers", {8}}}},
            {"initial", {{"n_flows", 1}}},
            {"inv_initial", {{"layers", {8}}}},
            {"inv_disturbance", {{"layers", {8}}}},
            {"feature_rnn", {{"n_states", 8}, {"initial_mlp", {{"layers", {8}}}}}}}},
          {"train", {{"batch_size", 8}, {"learning_rate", 3e-3}, {"n_updates", updates}, {"eval_samples", 2}}}};
}

void ensure_data() {
  if (fs::exists(workdir() / "data" / "train.jsonl")) return;
  put("data.json", kSmallData);
  ASSERT_EQ(run("gen-data --config data.json --out data"), 0);
}

}  // namespace

TEST(CliTest, DemoUnivariateReport) {
  ASSERT_EQ(run("demo-univariate --out u"), 0);
  const auto r = read_json("u/report.json");
  const double step = r["grid_step"];
  EXPECT_NEAR(r["ml_argmax"].get<double>(), std::sqrt(0.9), step);
  EXPECT_TRUE(r["elbo_argmax_differs"].get<bool>());
  EXPECT_GT(std::abs(r["elbo_argmax"].get<double>() - std::sqrt(0.9)), 0.02);
  // shared optimum: every posterior has variance 1 / (1 + a²/v)
  EXPECT_NEAR(r["w_a_star"]["var"].get<double>(), 1.0 / (1.0 + 0.9 / 0.1), 1e-12);
  // the (100a² + 1)⁻¹ column is reported as stated
  EXPECT_NEAR(r["w_a_star_var_100a2"].get<double>(), 1.0 / 91.0, 1e-12);
  const auto rows = read_csv("u/w_table.csv");
  EXPECT_EQ(rows.size(), 2002u);
  const auto dens = read_csv("u/densities.csv");
  EXPECT_EQ(dens[0][0], "z");
  EXPECT_EQ(dens.size(), 802u);
}

TEST(CliTest, DemoBimodalReport) {
  ASSERT_EQ(run("demo-bimodal --out b"), 0);
  const auto r = read_json("b/report.json")["scenarios"];
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0]["name"], "separated");
  EXPECT_NEAR(r[0]["gap"].get<double>(), 20.0, 1e-9);
  EXPECT_LT(r[1]["gap"].get<double>(), r[0]["gap"].get<double>());
  for (const auto& s : r)
    for (auto it = s["density_integrals"].begin(); it != s["density_integrals"].end(); ++it)
      EXPECT_NEAR(it.value().get<double>(), 1.0, 1e-3) << s["name"] << " " << it.key();
  // mode seeking on the separated pair, mass covering on the overlapping one
  EXPECT_NEAR(std::abs(r[0]["v_hat"]["mean"].get<double>()), 2.0, 0.5);
  EXPECT_GT(r[1]["v_hat"]["var"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(workdir() / "b/densities_separated.csv"));
}

namespace {

struct Sweep {
  std::vector<double> q, r;
};

Sweep read_sweep(const std::string& dir) {
  const auto rows = read_csv(dir + "/sweep.csv");
  EXPECT_EQ(rows[0][2], "total_gap");
  Sweep s;
  for (std::size_t i = 1; i < rows.size(); ++i) (rows[i][0] == "Q" ? s.q : s.r).push_back(std::stod(rows[i][2]));
  return s;
}

bool non_increasing(const std::vector<double>& v, std::size_t from = 0) {
  for (std::size_t i = from + 1; i < v.size(); ++i)
    if (v[i] > v[i - 1] + 1e-12) return false;
  return true;
}

}  // namespace

TEST(CliTest, GapLgssmSweepVanishesMonotonically) {
  put("gap2.json", {{"lgssm", {{"A", {0.9, 0.2, 0.0, 0.7}}, {"Q", {0.3, 0.3}}, {"H", {1.0, 0.0, 0.0, 1.0}}, {"R", {0.5, 0.5}}, {"T", 20}}}});
  ASSERT_EQ(run("gap-lgssm --config gap2.json --out g2"), 0);
  const Sweep s = read_sweep("g2");
  ASSERT_EQ(s.q.size(), 8u);
  ASSERT_EQ(s.r.size(), 8u);
  EXPECT_TRUE(non_increasing(s.q));
  EXPECT_TRUE(non_increasing(s.r));
  EXPECT_EQ(s.q.back(), 0.0);
  EXPECT_LT(s.r.back(), 1e-4 * s.r.front());
  EXPECT_EQ(read_csv("g2/gap_per_step.csv").size(), 21u);
  const auto sum = read_json("g2/summary.json");
  EXPECT_TRUE(sum["q_sweep_non_increasing"].get<bool>());
  EXPECT_TRUE(sum["r_sweep_non_increasing"].get<bool>());
  EXPECT_TRUE(sum["h_is_identity"].get<bool>());
}

// Away from Q -> 0 the gap need not fall with Q: for a = 0.9, q = r = 0.5 the
// steady-state backward information L solves L = 1/r + a² L / (1 + q L), and
// the per-step gap q (L - 1/r) / (2 (1 + q/r)) is 0.121 at q = 0.5 but 0.126
// at q = 0.25. The summary flag must report that honestly.
TEST(CliTest, GapLgssmReportsNonMonotoneQSweep) {
  put("gap1.json", {{"lgssm", {{"A", {0.9}}, {"Q", {0.5}}, {"H", {1.0}}, {"R", {0.5}}, {"T", 40}}}});
  ASSERT_EQ(run("gap-lgssm --config gap1.json --out g1"), 0);
  const Sweep s = read_sweep("g1");
  auto steady = [](double q) {
    const double a = 0.9, r = 0.5;
    double L = 1.0 / r;
    for (int i = 0; i < 10000; ++i) L = 1.0 / r + a * a * L / (1.0 + q * L);
    return q * (L - 1.0 / r) / (2.0 * (1.0 + q / r));
  };
  EXPECT_LT(steady(0.5), steady(0.25));
  EXPECT_LT(s.q[0], s.q[1]);
  EXPECT_TRUE(non_increasing(s.q, 2));
  EXPECT_FALSE(read_json("g1/summary.json")["q_sweep_non_increasing"].get<bool>());
  EXPECT_TRUE(read_json("g1/summary.json")["r_sweep_non_increasing"].get<bool>());
}

TEST(CliTest, GenDataWritesSplitsAndLabels) {
  ensure_data();
  EXPECT_EQ(read_csv("data/labels.csv").size(), 81u);
  EXPECT_GT(read_json("data/surrogate_gap.json")["total_gap"].get<double>(), 0.0);
  std::istringstream lines(slurp(workdir() / "data/val.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) ++n;
  EXPECT_EQ(n, 20u);
}

TEST(CliTest, EvalOfUntrainedModelIsFiniteAndSeeded) {
  ensure_data();
  put("t0.json", small_train("full", 0));
  ASSERT_EQ(run("train --config t0.json --out t0"), 0);
  put("e.json", {{"checkpoint", "t0/checkpoint.json"}, {"data", {{"val", "data/val.jsonl"}}}});
  ASSERT_EQ(run("eval-elbo --config e.json --out e1 --seed 5"), 0);
  ASSERT_EQ(run("eval-elbo --config e.json --out e2 --seed 5"), 0);
  ASSERT_EQ(run("eval-elbo --config e.json --out e3 --seed 6"), 0);
  EXPECT_EQ(slurp(workdir() / "e1/elbo_table.csv"), slurp(workdir() / "e2/elbo_table.csv"));
  EXPECT_NE(slurp(workdir() / "e1/elbo_table.csv"), slurp(workdir() / "e3/elbo_table.csv"));
  const auto t = read_csv("e1/elbo_table.csv");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0][6], "elbo_mean");
  EXPECT_TRUE(std::isfinite(std::stod(t[1][6])));
  EXPECT_GT(std::stod(t[1][7]), 0.0);
  EXPECT_EQ(read_csv("e1/elbo_samples.csv").size(), 11u);
}

TEST(CliTest, TrainLogAndCheckpointFeedPrefixSample) {
  ensure_data();
  put("t1.json", small_train("partial", 5));
  ASSERT_EQ(run("train --config t1.json --out t1"), 0);
  const auto log = read_csv("t1/train_log.csv");
  ASSERT_EQ(log.size(), 6u);
  EXPECT_EQ(log[0], (std::vector<std::string>{"step", "elbo", "recon", "kl"}));
  put("p.json", {{"checkpoint", "t1/checkpoint.json"}, {"dataset", "data/test.jsonl"}, {"sequences", {0, 3}},
                 {"prefix_length", 4}, {"n_particles", 100}, {"n_futures", 40}});
  ASSERT_EQ(run("prefix-sample --config p.json --out p"), 0);
  EXPECT_EQ(read_csv("p/futures.csv").size(), 1u + 2 * 40 * 6);
  EXPECT_EQ(read_csv("p/ppc.csv").size(), 3u);
  const auto s = read_json("p/summary.json");
  EXPECT_EQ(s["horizon"], 6);
  EXPECT_TRUE(std::isfinite(s["mean_log_density_at_truth"].get<double>()));
}

TEST(CliTest, PrefixSampleWithLinearModel) {
  put("lg_data.json", {{"data", {{"kind", "lgssm_export"}, {"T", 6}, {"n_train", 5}, {"n_val", 5}, {"n_test", 5},
                                 {"lgssm", {{"A", {0.9}}, {"Q", {0.2}}, {"H", {1.0}}, {"R", {0.1}}, {"T", 6}}}}}});
  ASSERT_EQ(run("gen-data --config lg_data.json --out lg"), 0);
  put("lp.json", {{"lgssm", {{"A", {0.9}}, {"Q", {0.2}}, {"H", {1.0}}, {"R", {0.1}}, {"T", 6}}},
                  {"dataset", "lg/test.jsonl"}, {"prefix_length", 3}, {"n_particles", 500}, {"n_futures", 50}});
  ASSERT_EQ(run("prefix-sample --config lp.json --out lp"), 0);
  put("lp_bad.json", {{"lgssm", {{"A", {0.9}}, {"Q", {0.2}}, {"H", {1.0}}, {"R", {0.1}}}},
                      {"checkpoint", "x.json"}, {"dataset", "lg/test.jsonl"}, {"prefix_length", 3}});
  EXPECT_EQ(run("prefix-sample --config lp_bad.json --out lp2"), 1);
}

TEST(CliTest, ExitCodesAndMessages) {
  std::string err;
  EXPECT_EQ(run("--help"), 0);
  for (const char* sub : {"demo-univariate", "demo-bimodal", "gap-lgssm", "gen-data", "train", "eval-elbo", "prefix-sample"}) {
    const std::string help = std::string(sub) + " --help";
    EXPECT_EQ(run(help), 0) << sub;
  }
  EXPECT_EQ(run("", &err), 1);
  EXPECT_EQ(run("train --no-such-flag", &err), 1);
  EXPECT_EQ(run("train --config does_not_exist.json", &err), 1);

  put("bad_key.json", {{"data", {{"kind", "branching"}, {"branching", {{"obs_sigma", 0.1}}}}}});
  EXPECT_EQ(run("gen-data --config bad_key.json --out x", &err), 1);
  EXPECT_NE(err.find("data.branching.obs_sigma"), std::string::npos) << err;

  auto cfg = small_train("full", 1);
  cfg["model"]["transition"]["width"] = 3;
  put("bad_model.json", cfg);
  EXPECT_EQ(run("train --config bad_model.json --out x", &err), 1);
  EXPECT_NE(err.find("model.transition.width"), std::string::npos) << err;

  put("no_data.json", {{"data", {{"train", "missing.jsonl"}}}});
  EXPECT_EQ(run("train --config no_data.json --out x", &err), 2);
  EXPECT_NE(err.find("missing.jsonl"), std::string::npos) << err;

  put("no_ckpt.json", {{"checkpoint", "missing_ckpt.json"}, {"data", {{"val", "data/val.jsonl"}}}});
  ensure_data();
  EXPECT_EQ(run("eval-elbo --config no_ckpt.json --out x", &err), 2);
  EXPECT_NE(err.find("missing_ckpt.json"), std::string::npos) << err;

  std::ofstream(workdir() / "broken.jsonl") << "{\"x\":[[1]]}\n{\"x\":[[1]\n";
  put("broken.json", {{"data", {{"train", "broken.jsonl"}}}});
  EXPECT_EQ(run("train --config broken.json --out x", &err), 2);
  EXPECT_NE(err.find("broken.jsonl:2"), std::string::npos) << err;
}

TEST(CliTest, EverySubcommandIsByteReproducible) {
  ensure_data();
  put("tr.json", small_train("semi", 3));
  put("ev.json", {{"checkpoints", {{"a", "d1/t/checkpoint.json"}}}, {"data", {{"val", "data/val.jsonl"}}}, {"n_samples", 3}});
  put("ps.json", {{"checkpoint", "d1/t/checkpoint.json"}, {"dataset", "data/test.jsonl"}, {"prefix_length", 5},
                  {"n_particles", 64}, {"n_futures", 30}});
  put("db.json", {{"fit", {{"steps", 200}}}});
  for (const char* d : {"d1", "d2"}) {
    const std::string o(d);
    const std::string env = o == "d2" ? "CONDGAP_THREADS=3 " : "CONDGAP_THREADS=1 ";
    ASSERT_EQ(run("demo-univariate --out " + o + "/u", nullptr, env), 0);
    ASSERT_EQ(run("demo-bimodal --config db.json --out " + o + "/b", nullptr, env), 0);
    ASSERT_EQ(run("gap-lgssm --out " + o + "/g", nullptr, env), 0);
    ASSERT_EQ(run("gen-data --config data.json --out " + o + "/d", nullptr, env), 0);
    ASSERT_EQ(run("train --config tr.json --out " + o + "/t", nullptr, env), 0);
    ASSERT_EQ(run("eval-elbo --config ev.json --out " + o + "/e", nullptr, env), 0);
    ASSERT_EQ(run("prefix-sample --config ps.json --out " + o + "/p", nullptr, env), 0);
  }
  expect_same_tree("d1", "d2");
  EXPECT_NE(slurp(workdir() / "d1/u/metadata.json"), "");
}
