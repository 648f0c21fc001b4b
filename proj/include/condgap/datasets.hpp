#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condgap/config_io.hpp"
#include "condgap/lgssm.hpp"
#include "condgap/parallel.hpp"
#include "condgap/rng.hpp"
#include "condgap/sequence_data.hpp"

// Procedural stand-ins for the sequence benchmarks:
//   branching     - digits that share their top rows and split later (row-by-row MNIST)
//   traffic_like  - similar mornings, sudden jams (loop-detector speeds)
//   rowwise_grid  - binarised 8x8 glyphs emitted one row per step (row-by-row MNIST)
//   lgssm_export  - draws from a linear-Gaussian model

namespace condgap {

enum class DatasetKind { branching, traffic_like, rowwise_grid, lgssm_export };

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "branching") return DatasetKind::branching;
  if (s == "traffic_like") return DatasetKind::traffic_like;
  if (s == "rowwise_grid") return DatasetKind::rowwise_grid;
  if (s == "lgssm_export") return DatasetKind::lgssm_export;
  throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::branching: return "branching";
    case DatasetKind::traffic_like: return "traffic_like";
    case DatasetKind::rowwise_grid: return "rowwise_grid";
    case DatasetKind::lgssm_export: return "lgssm_export";
  }
  return "?";
}

struct BranchingParams {
  double target = 1.0;       // branches settle at ±target
  double drift = 0.5;        // fraction of the remaining distance covered per step
  double obs_sd = 0.05;
  double process_sd = 0.03;
  double init_sd = 0.05;
  std::size_t commit_min = 0;  // 0 = T/4
  std::size_t commit_max = 0;  // 0 = T/2
};

struct TrafficParams {
  double base = 1.0;
  double daily_amplitude = 0.15;
  double p_jam = 0.3;
  double depth_min = 0.3;
  double depth_max = 0.6;
  std::size_t duration_min = 0;  // 0 = max(2, T/10)
  std::size_t duration_max = 0;  // 0 = max(duration_min, T/4)
  double obs_sd = 0.03;
};

struct GridParams {
  double intensity = 1.0;  // scales every pixel's on-probability; 0 gives blank glyphs
  double ink = 0.95;
  double speckle = 0.03;
};

struct DatasetSpec {
  DatasetKind kind = DatasetKind::branching;
  std::size_t T = 20;
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  std::uint64_t seed = 0;
  BranchingParams branching;
  TrafficParams traffic;
  GridParams grid;
  LgssmParams lgssm = LgssmParams::scalar(0.9, 0.1, 1.0, 0.1, 0.0, 1.0, 20);

  void validate() const {
    auto fail = [](const std::string& w) { throw std::invalid_argument("dataset: " + w); };
    if (T < 2) fail("T must be >= 2");
    if (n_train == 0 || n_val == 0 || n_test == 0) fail("split sizes must be > 0");
    if (kind == DatasetKind::branching) {
      const auto& b = branching;
      if (b.obs_sd < 0 || b.process_sd < 0 || b.init_sd < 0) fail("branching noise scales must be >= 0");
      if (!(b.drift > 0.0 && b.drift <= 1.0)) fail("branching.drift must lie in (0, 1]");
      const auto [lo, hi] = commit_window();
      if (lo < 1 || lo > hi || hi > T) fail("branching commit window must satisfy 1 <= min <= max <= T");
    }
    if (kind == DatasetKind::traffic_like) {
      const auto& t = traffic;
      if (!(t.p_jam >= 0.0 && t.p_jam <= 1.0)) fail("traffic.p_jam must lie in [0, 1]");
      if (t.depth_min < 0 || t.depth_min > t.depth_max) fail("traffic depths must satisfy 0 <= min <= max");
      if (t.obs_sd < 0) fail("traffic.obs_sd must be >= 0");
      const auto [lo, hi] = jam_durations();
      if (lo < 1 || lo > hi || hi > T) fail("traffic durations must satisfy 1 <= min <= max <= T");
    }
    if (kind == DatasetKind::rowwise_grid) {
      if (T != 8) fail("rowwise_grid needs T = 8");
      for (double v : {grid.intensity, grid.ink, grid.speckle})
        if (!(v >= 0.0 && v <= 1.0)) fail("grid probabilities must lie in [0, 1]");
    }
    if (kind == DatasetKind::lgssm_export) {
      lgssm.validate();
      if (lgssm.T != T) fail("lgssm.T must equal T");
    }
  }

  std::pair<std::size_t, std::size_t> commit_window() const {
    return {branching.commit_min ? branching.commit_min : std::max<std::size_t>(1, T / 4),
            branching.commit_max ? branching.commit_max : std::max<std::size_t>(1, T / 2)};
  }

  std::pair<std::size_t, std::size_t> jam_durations() const {
    const std::size_t lo = traffic.duration_min ? traffic.duration_min : std::max<std::size_t>(2, T / 10);
    return {lo, traffic.duration_max ? traffic.duration_max : std::max(lo, T / 4)};
  }
};

/// One split together with what the generator knows about each sequence.
struct GeneratedSplit {
  SequenceDataset data;
  std::vector<int> label;               // branch sign, jam flag or glyph class
  std::vector<std::size_t> event_step;  // commit step or jam onset (1-based), 0 if none
  std::vector<std::vector<double>> latent;  // noise-free trajectory (branching, traffic)
};

struct GeneratedData {
  GeneratedSplit train, val, test;
};

// ---------------------------------------------------------------------------
// glyphs

/// 8x8 templates, '#' = ink. Every class shares the first kGlyphSharedRows rows.
inline constexpr std::size_t kGlyphSharedRows = 2;
inline const std::array<std::array<const char*, 8>, 4>& glyph_templates() {
  static const std::array<std::array<const char*, 8>, 4> g{{
      {"..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####.."},  // 0
      {"..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."},  // 3
      {"..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."},  // 8
      {"..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", ".#....#.", "..####.."},  // 9
  }};
  return g;
}

inline std::size_t glyph_class_count() { return glyph_templates().size(); }

// ---------------------------------------------------------------------------
// generators

namespace detail {

inline void generate_branching(const DatasetSpec& s, Rng& rng, SequenceRecord& rec, int& label, std::size_t& event,
                               std::vector<double>& latent) {
  const auto& b = s.branching;
  const auto [lo, hi] = s.commit_window();
  event = lo + static_cast<std::size_t>(rng.uniform_int(hi - lo + 1));
  label = rng.uniform() < 0.5 ? -1 : 1;
  double y = b.init_sd * rng.normal();
  for (std::size_t t = 1; t <= s.T; ++t) {
    // the branch is chosen at `event` and shows up from the next step on
    if (t > event) y += b.drift * (label * b.target - y);
    y += b.process_sd * rng.normal();
    latent.push_back(y);
    rec.x.push_back({y + b.obs_sd * rng.normal()});
  }
}

inline void generate_traffic(const DatasetSpec& s, Rng& rng, SequenceRecord& rec, int& label, std::size_t& event,
                             std::vector<double>& latent) {
  const auto& p = s.traffic;
  const auto [dlo, dhi] = s.jam_durations();
  label = rng.uniform() < p.p_jam ? 1 : 0;
  std::size_t start = 0, stop = 0;
  double depth = 0.0;
  if (label) {
    const std::size_t dur = dlo + static_cast<std::size_t>(rng.uniform_int(dhi - dlo + 1));
    const std::size_t first = std::max<std::size_t>(1, s.T / 4);
    const std::size_t last = std::max(first, s.T + 1 - dur);
    start = first + static_cast<std::size_t>(rng.uniform_int(last - first + 1));
    stop = std::min(s.T, start + dur - 1);
    depth = p.depth_min + (p.depth_max - p.depth_min) * rng.uniform();
    event = start;
  } else {
    event = 0;
  }
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t t = 1; t <= s.T; ++t) {
    const double phase = static_cast<double>(t - 1) / static_cast<double>(s.T);
    double v = p.base + p.daily_amplitude * std::cos(two_pi * phase);
    if (label && t >= start && t <= stop) v -= depth;
    latent.push_back(v);
    rec.x.push_back({v + p.obs_sd * rng.normal()});
  }
}

inline void generate_glyph(const DatasetSpec& s, Rng& rng, SequenceRecord& rec, int& label) {
  const auto& g = glyph_templates();
  label = static_cast<int>(rng.uniform_int(g.size()));
  for (std::size_t r = 0; r < 8; ++r) {
    std::vector<double> row(8);
    for (std::size_t c = 0; c < 8; ++c) {
      const double p = s.grid.intensity * (g[label][r][c] == '#' ? s.grid.ink : s.grid.speckle);
      row[c] = rng.uniform() < p ? 1.0 : 0.0;
    }
    rec.x.push_back(std::move(row));
  }
}

inline void generate_lgssm(const DatasetSpec& s, Rng& rng, SequenceRecord& rec, std::vector<double>& latent) {
  const auto draw = lgssm_sample(s.lgssm, rng);
  for (std::size_t t = 0; t < s.T; ++t) {
    rec.x.emplace_back(draw.observations[t].data(), draw.observations[t].data() + draw.observations[t].size());
    latent.push_back(draw.latents[t](0));
  }
}

inline GeneratedSplit generate_split(const DatasetSpec& s, const Rng& stream, std::size_t n, std::size_t threads) {
  GeneratedSplit out;
  out.data.sequences.resize(n);
  out.label.assign(n, 0);
  out.event_step.assign(n, 0);
  out.latent.resize(n);
  parallel_for(n, threads, [&](std::size_t i) {
    Rng rng = stream.split(i);
    auto& rec = out.data.sequences[i];
    switch (s.kind) {
      case DatasetKind::branching: generate_branching(s, rng, rec, out.label[i], out.event_step[i], out.latent[i]); break;
      case DatasetKind::traffic_like: generate_traffic(s, rng, rec, out.label[i], out.event_step[i], out.latent[i]); break;
      case DatasetKind::rowwise_grid: generate_glyph(s, rng, rec, out.label[i]); break;
      case DatasetKind::lgssm_export: generate_lgssm(s, rng, rec, out.latent[i]); break;
    }
  });
  return out;
}

}  // namespace detail

/// Train, val and test come from separate rng streams of `spec.seed`;
/// sequence i of a split uses its own sub-stream, so output does not depend
/// on `threads`.
inline GeneratedData generate_dataset(const DatasetSpec& spec, std::size_t threads = 1) {
  spec.validate();
  const Rng root(spec.seed, 0xda7a);
  GeneratedData d;
  d.train = detail::generate_split(spec, root.split(0), spec.n_train, threads);
  d.val = detail::generate_split(spec, root.split(1), spec.n_val, threads);
  d.test = detail::generate_split(spec, root.split(2), spec.n_test, threads);
  return d;
}

/// Scalar LGSSM fitted to branching data by moments of the noise-free
/// trajectory: least-squares AR(1) coefficient, residual variance, and the
/// generator's own observation noise.
inline LgssmParams branching_lgssm_surrogate(const DatasetSpec& spec, const GeneratedSplit& split) {
  double sxy = 0.0, sxx = 0.0, s0 = 0.0;
  const double n = static_cast<double>(split.latent.size());
  for (const auto& y : split.latent) {
    s0 += y[0] * y[0] / n;
    for (std::size_t t = 1; t < y.size(); ++t) {
      sxy += y[t] * y[t - 1];
      sxx += y[t - 1] * y[t - 1];
    }
  }
  const double a = sxx > 0.0 ? sxy / sxx : 0.0;
  double rss = 0.0, cnt = 0.0;
  for (const auto& y : split.latent)
    for (std::size_t t = 1; t < y.size(); ++t) {
      rss += (y[t] - a * y[t - 1]) * (y[t] - a * y[t - 1]);
      cnt += 1.0;
    }
  const double q = std::max(rss / cnt, 1e-12);
  // z_1 = a z_0 + w, so Var z_1 = a² P0 + q
  const double p0 = std::max((s0 - q) / std::max(a * a, 1e-12), 1e-12);
  const double r = std::max(spec.branching.obs_sd * spec.branching.obs_sd, 1e-12);
  return LgssmParams::scalar(a, q, 1.0, r, 0.0, p0, spec.T);
}

// ---------------------------------------------------------------------------
// spec from JSON

inline LgssmParams lgssm_params_from_json(ConfigReader r, std::size_t T) {
  auto vec = [](const std::vector<double>& v) { return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())); };
  auto mat = [&](const std::vector<double>& v, std::size_t rows, const std::string& name) {
    if (rows == 0 || v.size() % rows != 0)
      throw ConfigError("config: '" + r.full(name) + "' has " + std::to_string(v.size()) + " entries, not a multiple of " +
                        std::to_string(rows));
    MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(v.size() / rows));
    for (std::size_t i = 0; i < v.size(); ++i)
      m(static_cast<Eigen::Index>(i / m.cols()), static_cast<Eigen::Index>(i % m.cols())) = v[i];
    return m;
  };
  LgssmParams p;
  p.q_diag = vec(r.require<std::vector<double>>("Q"));
  const std::size_t n = static_cast<std::size_t>(p.q_diag.size());
  p.r_diag = vec(r.require<std::vector<double>>("R"));
  p.A = mat(r.require<std::vector<double>>("A"), n, "A");
  p.H = mat(r.require<std::vector<double>>("H"), static_cast<std::size_t>(p.r_diag.size()), "H");
  p.m0 = vec(r.get<std::vector<double>>("m0", std::vector<double>(n, 0.0)));
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  p.P0 = mat(r.get<std::vector<double>>("P0", eye), n, "P0");
  p.T = r.get<std::size_t>("T", T);
  r.finish();
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return p;
}

inline nlohmann::json lgssm_params_to_json(const LgssmParams& p) {
  auto flat = [](const MatrixXd& m) {
    std::vector<double> v;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
    return v;
  };
  return {{"A", flat(p.A)}, {"Q", flat(p.q_diag)}, {"H", flat(p.H)}, {"R", flat(p.r_diag)},
          {"m0", flat(p.m0)}, {"P0", flat(p.P0)}, {"T", p.T}};
}

inline DatasetSpec dataset_spec_from_json(ConfigReader r) {
  DatasetSpec s;
  s.kind = dataset_kind_from_string(r.require<std::string>("kind"));
  s.T = r.get<std::size_t>("T", s.T);
  s.n_train = r.get<std::size_t>("n_train", s.n_train);
  s.n_val = r.get<std::size_t>("n_val", s.n_val);
  s.n_test = r.get<std::size_t>("n_test", s.n_test);
  s.seed = r.get<std::uint64_t>("seed", s.seed);
  {
    auto b = r.child("branching");
    auto& p = s.branching;
    p.target = b.get("target", p.target);
    p.drift = b.get("drift", p.drift);
    p.obs_sd = b.get("obs_sd", p.obs_sd);
    p.process_sd = b.get("process_sd", p.process_sd);
    p.init_sd = b.get("init_sd", p.init_sd);
    p.commit_min = b.get("commit_min", p.commit_min);
    p.commit_max = b.get("commit_max", p.commit_max);
    b.finish();
  }
  {
    auto t = r.child("traffic");
    auto& p = s.traffic;
    p.base = t.get("base", p.base);
    p.daily_amplitude = t.get("daily_amplitude", p.daily_amplitude);
    p.p_jam = t.get("p_jam", p.p_jam);
    p.depth_min = t.get("depth_min", p.depth_min);
    p.depth_max = t.get("depth_max", p.depth_max);
    p.duration_min = t.get("duration_min", p.duration_min);
    p.duration_max = t.get("duration_max", p.duration_max);
    p.obs_sd = t.get("obs_sd", p.obs_sd);
    t.finish();
  }
  {
    auto g = r.child("grid");
    s.grid.intensity = g.get("intensity", s.grid.intensity);
    s.grid.ink = g.get("ink", s.grid.ink);
    s.grid.speckle = g.get("speckle", s.grid.speckle);
    g.finish();
  }
  if (r.has("lgssm")) s.lgssm = lgssm_params_from_json(r.child("lgssm"), s.T);
  else s.lgssm.T = s.T;
  r.finish();
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return s;
}

inline nlohmann::json dataset_spec_to_json(const DatasetSpec& s) {
  nlohmann::json j = {{"kind", to_string(s.kind)}, {"T", s.T}, {"n_train", s.n_train},
                      {"n_val", s.n_val}, {"n_test", s.n_test}, {"seed", s.seed}};
  const auto& b = s.branching;
  j["branching"] = {{"target", b.target}, {"drift", b.drift}, {"obs_sd", b.obs_sd}, {"process_sd", b.process_sd},
                    {"init_sd", b.init_sd}, {"commit_min", b.commit_min}, {"commit_max", b.commit_max}};
  const auto& t = s.traffic;
  j["traffic"] = {{"base", t.base}, {"daily_amplitude", t.daily_amplitude}, {"p_jam", t.p_jam},
                  {"depth_min", t.depth_min}, {"depth_max", t.depth_max}, {"duration_min", t.duration_min},
                  {"duration_max", t.duration_max}, {"obs_sd", t.obs_sd}};
  j["grid"] = {{"intensity", s.grid.intensity}, {"ink", s.grid.ink}, {"speckle", s.grid.speckle}};
  j["lgssm"] = lgssm_params_to_json(s.lgssm);
  return j;
}

// ---------------------------------------------------------------------------
// JSON lines: {"x": [[...], ...], "u": [[...], ...]} per line

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_rows(std::ostream& os, const std::vector<std::vector<double>>& rows) {
  os << '[';
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (t) os << ',';
    os << '[';
    for (std::size_t i = 0; i < rows[t].size(); ++i) {
      if (i) os << ',';
      os << format_double(rows[t][i]);
    }
    os << ']';
  }
  os << ']';
}

inline void write_jsonl(std::ostream& os, const SequenceDataset& d) {
  for (const auto& s : d.sequences) {
    os << "{\"x\":";
    write_rows(os, s.x);
    os << ",\"u\":";
    write_rows(os, s.u);
    os << "}\n";
  }
}

inline void write_jsonl(const std::string& path, const SequenceDataset& d) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_jsonl(f, d);
  if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

inline SequenceDataset read_jsonl(std::istream& is, const std::string& name = "<stream>") {
  SequenceDataset d;
  std::string line;
  std::size_t lineno = 0;
  auto rows = [](const nlohmann::json& j) {
    if (!j.is_array()) throw std::invalid_argument("expected an array of rows");
    std::vector<std::vector<double>> out;
    for (const auto& row : j) {
      if (!row.is_array()) throw std::invalid_argument("expected a row array");
      std::vector<double> r;
      for (const auto& v : row) {
        if (!v.is_number()) throw std::invalid_argument("non-numeric entry");
        r.push_back(v.get<double>());
      }
      out.push_back(std::move(r));
    }
    return out;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("x")) throw std::invalid_argument("missing \"x\"");
      for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "x" && it.key() != "u") throw std::invalid_argument("unknown key \"" + it.key() + "\"");
      SequenceRecord rec;
      rec.x = rows(j.at("x"));
      if (j.contains("u")) rec.u = rows(j.at("u"));
      if (rec.x.empty()) throw std::invalid_argument("empty sequence");
      d.sequences.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw std::runtime_error(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (d.empty()) throw std::runtime_error(name + ": no sequences");
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(name + ": " + e.what());
  }
  return d;
}

inline SequenceDataset read_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset '" + path + "'");
  return read_jsonl(f, path);
}

}  // namespace condgap
