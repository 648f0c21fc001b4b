#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "condgap/autodiff.hpp"

namespace condgap {

/// One sequence: x[t] has n_obs entries, u[t] has n_cond entries (u may be
/// empty when the data carries no conditions).
struct SequenceRecord {
  std::vector<std::vector<double>> x;
  std::vector<std::vector<double>> u;

  std::size_t length() const noexcept { return x.size(); }
  friend bool operator==(const SequenceRecord&, const SequenceRecord&) = default;
};

struct SequenceDataset {
  std::vector<SequenceRecord> sequences;

  std::size_t size() const noexcept { return sequences.size(); }
  bool empty() const noexcept { return sequences.empty(); }
  std::size_t T() const { return sequences.at(0).x.size(); }
  std::size_t n_obs() const { return sequences.at(0).x.at(0).size(); }
  std::size_t n_cond() const {
    const auto& u = sequences.at(0).u;
    return u.empty() ? 0 : u.at(0).size();
  }

  /// Equal T, n_obs and n_cond everywhere; all values finite.
  void validate() const {
    if (sequences.empty()) throw std::invalid_argument("dataset is empty");
    const std::size_t T0 = T(), nx = n_obs(), nu = n_cond();
    for (std::size_t i = 0; i < sequences.size(); ++i) {
      const auto& s = sequences[i];
      auto fail = [&](const std::string& what) {
        throw std::invalid_argument("sequence " + std::to_string(i) + ": " + what);
      };
      if (s.x.size() != T0) fail("length " + std::to_string(s.x.size()) + ", expected " + std::to_string(T0));
      if (!s.u.empty() && s.u.size() != T0) fail("u has " + std::to_string(s.u.size()) + " steps");
      if (s.u.empty() && nu != 0) fail("missing u");
      for (const auto& row : s.x) {
        if (row.size() != nx) fail("x row has " + std::to_string(row.size()) + " entries, expected " + std::to_string(nx));
        for (double v : row)
          if (!std::isfinite(v)) fail("non-finite x");
      }
      for (const auto& row : s.u) {
        if (row.size() != nu) fail("u row has " + std::to_string(row.size()) + " entries, expected " + std::to_string(nu));
        for (double v : row)
          if (!std::isfinite(v)) fail("non-finite u");
      }
    }
  }

  friend bool operator==(const SequenceDataset&, const SequenceDataset&) = default;
};

/// Time-major view of a minibatch: x[t] is [B, n_obs], u[t] is [B, n_cond]
/// (u empty when n_cond == 0).
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t T = 0;
  std::size_t n_obs = 0;
  std::size_t n_cond = 0;
  std::vector<Node> x;
  std::vector<Node> u;

  static SequenceBatch from(const SequenceDataset& data, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("SequenceBatch: no indices");
    SequenceBatch b;
    b.batch = indices.size();
    b.T = data.sequences.at(indices[0]).length();
    b.n_obs = data.n_obs();
    b.n_cond = data.n_cond();
    for (std::size_t t = 0; t < b.T; ++t) {
      Tensor xt(Shape{b.batch, b.n_obs});
      Tensor ut(Shape{b.batch, b.n_cond});
      for (std::size_t i = 0; i < b.batch; ++i) {
        const auto& s = data.sequences.at(indices[i]);
        if (s.length() != b.T) throw std::invalid_argument("SequenceBatch: unequal sequence lengths");
        for (std::size_t j = 0; j < b.n_obs; ++j) xt.at(i, j) = s.x[t].at(j);
        for (std::size_t j = 0; j < b.n_cond; ++j) ut.at(i, j) = s.u[t].at(j);
      }
      b.x.push_back(Node::constant(std::move(xt)));
      if (b.n_cond > 0) b.u.push_back(Node::constant(std::move(ut)));
    }
    return b;
  }

  static SequenceBatch all(const SequenceDataset& data) {
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return from(data, idx);
  }

  bool has_conditions() const noexcept { return n_cond > 0; }
};

}  // namespace condgap
