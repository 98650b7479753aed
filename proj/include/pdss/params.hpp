#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>

#include "pdss/autograd.hpp"
#include "pdss/tensor.hpp"

namespace pdss {

/// Named parameter tensors. Ordered so iteration (and hence checkpoints and
/// flattened views) is deterministic.
using ParamStore = std::map<std::string, Tensor>;

/// Puts parameters from a store onto a tape on first use and remembers the
/// resulting leaves so their gradients can be collected after backward.
class ParamBinder {
 public:
  ParamBinder(ad::Tape& tape, const ParamStore& store, bool requires_grad)
      : tape_(tape), store_(store), requires_grad_(requires_grad) {}

  ad::Var operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto it = store_.find(name);
    require(it != store_.end(), "missing parameter '" + name + "'");
    auto v = tape_.leaf(it->second, requires_grad_);
    bound_.emplace(name, v);
    return v;
  }

  ad::Tape& tape() { return tape_; }

  /// Gradients of every bound parameter (zeros where none arrived).
  ParamStore gradients() const {
    ParamStore out;
    for (const auto& [name, v] : bound_) {
      const auto& g = tape_.grad(v);
      out.emplace(name, g.shape() == v.shape() ? g : Tensor(v.shape()));
    }
    return out;
  }

 private:
  ad::Tape& tape_;
  const ParamStore& store_;
  bool requires_grad_;
  std::map<std::string, ad::Var> bound_;
};

inline std::size_t param_count(const ParamStore& s) {
  std::size_t n = 0;
  for (const auto& [_, t] : s) n += t.size();
  return n;
}

namespace init {

inline Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = dist(rng);
  return t;
}

inline Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = dist(rng);
  return t;
}

/// Kaiming-style normal init for a [Cout, Cin, k, k] kernel.
inline Tensor conv_kernel(std::size_t cout, std::size_t cin, std::size_t k,
                          std::mt19937_64& rng, double gain = 2.0) {
  const double fan_in = static_cast<double>(cin * k * k);
  return normal({cout, cin, k, k}, std::sqrt(gain / fan_in), rng);
}

inline double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

}  // namespace init

}  // namespace pdss
