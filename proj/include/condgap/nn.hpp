#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "condgap/autodiff.hpp"
#include "condgap/parameters.hpp"
#include "condgap/rng.hpp"

namespace condgap::nn {

enum class Activation { identity, tanh, relu, softplus, softsign, sigmoid };

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  if (s == "softsign") return Activation::softsign;
  if (s == "sigmoid") return Activation::sigmoid;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
    case Activation::softsign: return "softsign";
    case Activation::sigmoid: return "sigmoid";
  }
  return "identity";
}

inline Node apply(Activation a, const Node& x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return ops::tanh(x);
    case Activation::relu: return ops::relu(x);
    case Activation::softplus: return ops::softplus(x);
    case Activation::softsign: return ops::softsign(x);
    case Activation::sigmoid: return ops::sigmoid(x);
  }
  return x;
}

/// Glorot-uniform weight of shape [fan_in, fan_out].
inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::uniform(Shape{fan_in, fan_out}, rng, -limit, limit);
}

/// Affine layer registered as `<prefix>.weight` [in, out] and `<prefix>.bias` [1, out].
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
      : weight_(store.add(prefix + ".weight", glorot(in, out, rng))),
        bias_(store.add(prefix + ".bias", Tensor(Shape{1, out}, 0.0))),
        in_(in), out_(out) {}

  Node operator()(const Node& x) const { return ops::linear(x, weight_, bias_); }

  Node& weight() { return weight_; }
  Node& bias() { return bias_; }
  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }

 private:
  Node weight_;
  Node bias_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

/// Feed-forward net: hidden layers with a shared activation, then a linear
/// output layer. Parameters live under `<prefix>.layers.<i>`.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& prefix, std::size_t in, const std::vector<std::size_t>& hidden,
      std::size_t out, Activation activation, Rng& rng)
      : activation_(activation) {
    std::size_t width = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers_.emplace_back(store, prefix + ".layers." + std::to_string(i), width, hidden[i], rng);
      width = hidden[i];
    }
    layers_.emplace_back(store, prefix + ".layers." + std::to_string(hidden.size()), width, out, rng);
  }

  Node operator()(Node x) const {
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) x = apply(activation_, layers_[i](x));
    return layers_.back()(x);
  }

  Linear& output_layer() { return layers_.back(); }
  std::vector<Linear>& layers() { return layers_; }

 private:
  std::vector<Linear> layers_;
  Activation activation_ = Activation::tanh;
};

/// Gated recurrent unit, gate order (reset, update, candidate):
///   r = σ(x W_r + h U_r + b),  u = σ(x W_u + h U_u + b),
///   n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n)),  h' = n + u ⊙ (h − n).
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng)
      : input_(store, prefix + ".input", in, 3 * hidden, rng),
        recurrent_(store, prefix + ".recurrent", hidden, 3 * hidden, rng),
        hidden_(hidden) {}

  std::size_t hidden_size() const noexcept { return hidden_; }

  Node initial_state(std::size_t batch) const { return Node::constant(Tensor(Shape{batch, hidden_}, 0.0)); }

  Node operator()(const Node& x, const Node& h) const {
    const Node gx = input_(x);
    const Node gh = recurrent_(h);
    const std::size_t H = hidden_;
    const Node r = ops::sigmoid(ops::slice(gx, 0, H) + ops::slice(gh, 0, H));
    const Node u = ops::sigmoid(ops::slice(gx, H, 2 * H) + ops::slice(gh, H, 2 * H));
    const Node n = ops::tanh(ops::slice(gx, 2 * H, 3 * H) + r * ops::slice(gh, 2 * H, 3 * H));
    return n + u * (h - n);
  }

 private:
  Linear input_;
  Linear recurrent_;
  std::size_t hidden_ = 0;
};

}  // namespace condgap::nn
