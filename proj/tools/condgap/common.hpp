#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condgap/config_io.hpp"
#include "condgap/datasets.hpp"
#include "condgap/parallel.hpp"

namespace condgap::cli {

namespace fs = std::filesystem;

/// Bad invocation or config; exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::string command;
  std::string config_path;
  nlohmann::json config = nlohmann::json::object();
  std::optional<std::uint64_t> seed;
  fs::path out = "out";
  std::size_t threads = 1;

  std::uint64_t seed_or(std::uint64_t from_config) const { return seed ? *seed : from_config; }
};

inline nlohmann::json load_json(const std::string& path, const std::string& what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + what + " '" + path + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(what + " '" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

/// Accumulates CSV text; numbers are printed with 17 significant digits.
class Csv {
 public:
  explicit Csv(const std::vector<std::string>& header) { row_strings(header); }

  template <class... Cells>
  void row(const Cells&... cells) {
    bool first = true;
    ((put(cells, first)), ...);
    text_ << '\n';
  }

  std::string str() const { return text_.str(); }

 private:
  void row_strings(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) text_ << (i ? "," : "") << cells[i];
    text_ << '\n';
  }
  void sep(bool& first) {
    if (!first) text_ << ',';
    first = false;
  }
  void put(const std::string& s, bool& first) { sep(first), text_ << s; }
  void put(const char* s, bool& first) { sep(first), text_ << s; }
  void put(double v, bool& first) { sep(first), text_ << format_double(v); }
  void put(int v, bool& first) { sep(first), text_ << v; }
  void put(std::size_t v, bool& first) { sep(first), text_ << v; }
  void put(bool v, bool& first) { sep(first), text_ << (v ? "true" : "false"); }

  std::ostringstream text_;
};

/// First column x, then one column per entry of `cols`.
inline void write_columns(const fs::path& path, const std::vector<std::string>& header, const std::vector<double>& x,
                          const std::vector<std::vector<double>>& cols) {
  std::string text;
  for (std::size_t k = 0; k < header.size(); ++k) text += (k ? "," : "") + header[k];
  text += '\n';
  for (std::size_t i = 0; i < x.size(); ++i) {
    text += format_double(x[i]);
    for (const auto& c : cols) text += ',' + format_double(c[i]);
    text += '\n';
  }
  write_file(path, text);
}

/// Everything that changes between identical runs lives here.
inline void write_metadata(const Context& ctx, const nlohmann::json& extra = nlohmann::json::object()) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  nlohmann::json m = {{"command", ctx.command}, {"created_at", stamp}, {"config_path", ctx.config_path},
                      {"threads", ctx.threads}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  write_json(ctx.out / "metadata.json", m);
}

inline SequenceDataset load_dataset(const std::string& path) {
  if (path.empty()) throw UsageError("no dataset path given");
  return read_jsonl(path);
}

}  // namespace condgap::cli
