#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

namespace condgap {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Strict reader over one JSON object. Every key read is recorded;
/// finish() rejects whatever was not read. Messages carry the dotted path.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path = {}) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + display() + "' must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, const T& fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(j_.at(key), key);
  }

  template <class T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ConfigError("config: missing required key '" + full(key) + "'");
    return convert<T>(j_.at(key), key);
  }

  /// Sub-object reader; an absent key reads as an empty object.
  ConfigReader child(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    if (!j_.contains(key)) return ConfigReader(empty, full(key));
    return ConfigReader(j_.at(key), full(key));
  }

  const nlohmann::json* raw(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + full(it.key()) + "'");
  }

  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  template <class T>
  T convert(const nlohmann::json& v, const std::string& key) const {
    const std::string where = full(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("config: '" + where + "' must be a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("config: '" + where + "' must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("config: '" + where + "' must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned() == false && v.get<std::int64_t>() < 0)
          throw ConfigError("config: '" + where + "' must be non-negative");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("config: '" + where + "' must be a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) throw ConfigError("config: '" + where + "' must be an array of integers");
      T out;
      for (const auto& e : v) {
        if (!e.is_number_integer() || e.get<std::int64_t>() < 0)
          throw ConfigError("config: '" + where + "' must be an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) throw ConfigError("config: '" + where + "' must be an array of numbers");
      T out;
      for (const auto& e : v) {
        if (!e.is_number()) throw ConfigError("config: '" + where + "' must be an array of numbers");
        out.push_back(e.get<double>());
      }
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace condgap
