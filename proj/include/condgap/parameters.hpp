#pragma once

#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condgap/autodiff.hpp"

namespace condgap {

/// Named trainable tensors keyed by dot-separated paths such as
/// `transition.layers.0.weight`. Iteration order is lexicographic by path,
/// which fixes the order seen by optimizers and checkpoints.
class ParameterStore {
 public:
  Node& add(const std::string& path, Tensor value) {
    if (!value.all_finite()) throw std::invalid_argument("parameter '" + path + "' is not finite");
    auto [it, inserted] = params_.try_emplace(path, Node::parameter(std::move(value), path));
    if (!inserted) throw std::invalid_argument("duplicate parameter path '" + path + "'");
    return it->second;
  }

  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  Node& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + path + "'");
    return it->second;
  }
  const Node& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + path + "'");
    return it->second;
  }

  /// Handles in path order. Handles share state with the store.
  std::vector<Node> nodes() const {
    std::vector<Node> out;
    out.reserve(params_.size());
    for (const auto& [_, n] : params_) out.push_back(n);
    return out;
  }

  std::vector<std::string> paths() const {
    std::vector<std::string> out;
    for (const auto& [p, _] : params_) out.push_back(p);
    return out;
  }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t count_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, node] : params_) n += node.value().numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, n] : params_) n.zero_grad();
  }

  bool all_finite() const {
    for (const auto& [_, n] : params_)
      if (!n.value().all_finite()) return false;
    return true;
  }

  /// Values only, for "last good state" snapshots.
  std::map<std::string, Tensor> snapshot() const {
    std::map<std::string, Tensor> out;
    for (const auto& [p, n] : params_) out.emplace(p, n.value());
    return out;
  }

  void restore(const std::map<std::string, Tensor>& snap) {
    for (const auto& [p, t] : snap) {
      Node& n = at(p);
      if (n.shape() != t.shape()) throw ShapeError("restore(" + p + ")", t.shape(), n.shape());
      n.mutable_value() = t;
    }
  }

 private:
  std::map<std::string, Node> params_;
};

// Checkpoint format:
//   {"format": "condgap-checkpoint", "version": 1, "meta": {...},
//    "tensors": {"<path>": {"shape": [...], "data": [...]}, ...}}
// Doubles are written by nlohmann::json's shortest round-trip formatter, so
// load(save(x)) reproduces every bit.

inline constexpr const char* kCheckpointFormat = "condgap-checkpoint";

inline nlohmann::json tensors_to_json(const ParameterStore& store) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& path : store.paths()) {
    const Tensor& t = store.at(path).value();
    tensors[path] = {{"shape", t.shape()}, {"data", t.storage()}};
  }
  return tensors;
}

inline nlohmann::json checkpoint_to_json(const ParameterStore& store, const nlohmann::json& meta = nlohmann::json::object()) {
  return {{"format", kCheckpointFormat}, {"version", 1}, {"meta", meta}, {"tensors", tensors_to_json(store)}};
}

/// Loads tensor values into an existing store. Every stored path must exist
/// with the same shape, and every store entry must be present.
inline void load_tensors(ParameterStore& store, const nlohmann::json& checkpoint) {
  if (!checkpoint.is_object() || checkpoint.value("format", "") != kCheckpointFormat) {
    throw std::runtime_error("not a condgap checkpoint");
  }
  const auto& tensors = checkpoint.at("tensors");
  for (const auto& path : store.paths()) {
    if (!tensors.contains(path)) throw std::runtime_error("checkpoint lacks parameter '" + path + "'");
  }
  for (const auto& [path, entry] : tensors.items()) {
    if (!store.contains(path)) throw std::runtime_error("checkpoint has unknown parameter '" + path + "'");
    Tensor t(entry.at("shape").get<Shape>(), entry.at("data").get<std::vector<double>>());
    Node& n = store.at(path);
    if (t.shape() != n.shape()) throw ShapeError("load(" + path + ")", t.shape(), n.shape());
    n.mutable_value() = std::move(t);
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << j.dump(1) << '\n';
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("'" + path + "': " + e.what());
  }
}

}  // namespace condgap
