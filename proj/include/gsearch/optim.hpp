#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gsearch/error.hpp"
#include "gsearch/tensor.hpp"

namespace gsearch {

template <typename T>
struct SgdState {
  T lr = T(0.1);
  T momentum = T(0.9);
  T weight_decay = T(0);
  std::vector<std::vector<T>> velocity;
};

/// v <- momentum * v - lr * (grad + weight_decay * p);  p <- p + v
template <typename T>
void sgd_momentum_step(std::vector<Tensor<T>>& params, SgdState<T>& state) {
  if (state.velocity.empty()) {
    for (auto& p : params) state.velocity.emplace_back(p.size(), T{0});
  }
  if (state.velocity.size() != params.size()) throw Error("sgd: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) throw Error("sgd: parameter " + std::to_string(i) + " has no gradient");
    auto& v = state.velocity[i];
    if (v.size() != p.size()) throw ShapeError("sgd", "velocity size mismatch for parameter " + std::to_string(i));
    auto d = p.data();
    auto g = p.grad();
    for (std::size_t j = 0; j < d.size(); ++j) {
      v[j] = state.momentum * v[j] - state.lr * (g[j] + state.weight_decay * d[j]);
      d[j] += v[j];
    }
  }
}

/// S(z)_i = sign(z_i) * max(|z_i| - thresholds_i, 0)
template <typename T>
void soft_threshold(std::span<const T> z, std::span<const T> thresholds, std::span<T> out) {
  if (z.size() != thresholds.size() || z.size() != out.size())
    throw ShapeError("soft_threshold", std::to_string(z.size()) + " values, " + std::to_string(thresholds.size()) +
                                           " thresholds");
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (thresholds[i] < T{0}) throw Error("soft_threshold: negative threshold at " + std::to_string(i));
    const T mag = std::abs(z[i]) - thresholds[i];
    out[i] = mag > T{0} ? std::copysign(mag, z[i]) : T{0};
  }
}

template <typename T>
std::vector<T> soft_threshold(std::span<const T> z, std::span<const T> thresholds) {
  std::vector<T> out(z.size());
  soft_threshold<T>(z, thresholds, out);
  return out;
}

template <typename T>
struct ApgState {
  std::vector<T> v;
  T eta = T(0.01);
  T mu = T(0.9);
  long t = 0;
  bool clamp_nonnegative = true;
};

/// Momentum proximal step on gates:
///   z = g - eta * grad
///   v = S(z) - g + mu * v
///   g = S(z) + mu * v
/// `thresholds` holds the per-entry soft-threshold, typically eta * lambda2 * alpha_j.
template <typename T>
void apg_step(std::span<T> g, std::span<const T> grad, ApgState<T>& state, std::span<const T> thresholds) {
  if (grad.size() != g.size() || thresholds.size() != g.size())
    throw ShapeError("apg_step", std::to_string(g.size()) + " gates, " + std::to_string(grad.size()) + " grads, " +
                                     std::to_string(thresholds.size()) + " thresholds");
  if (!(state.eta > T{0})) throw Error("apg_step: step size must be positive");
  if (state.mu < T{0} || state.mu >= T{1}) throw Error("apg_step: momentum must be in [0,1)");
  if (state.v.empty()) state.v.assign(g.size(), T{0});
  if (state.v.size() != g.size()) throw ShapeError("apg_step", "velocity size mismatch");
  std::vector<T> z(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) z[i] = g[i] - state.eta * grad[i];
  std::vector<T> s(g.size());
  soft_threshold<T>(z, thresholds, s);
  for (std::size_t i = 0; i < g.size(); ++i) {
    state.v[i] = s[i] - g[i] + state.mu * state.v[i];
    g[i] = s[i] + state.mu * state.v[i];
    if (state.clamp_nonnegative && g[i] < T{0}) g[i] = T{0};
  }
  ++state.t;
}

}  // namespace gsearch
