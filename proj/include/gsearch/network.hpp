#pragma once

// Weights, gates and the (optionally gated) forward pass over a TopologyGraph.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gsearch/autodiff.hpp"
#include "gsearch/topology.hpp"

namespace gsearch {

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma, beta, mean, var;

  static BatchNormParams make(std::size_t channels) {
    BatchNormParams p{Tensor<T>(Shape{channels}, T{1}), Tensor<T>(Shape{channels}, T{0}),
                      Tensor<T>(Shape{channels}, T{0}), Tensor<T>(Shape{channels}, T{1})};
    p.gamma.set_requires_grad();
    p.beta.set_requires_grad();
    return p;
  }
  BatchNormParams clone() const { return {gamma.clone(), beta.clone(), mean.clone(), var.clone()}; }
};

template <typename T>
struct LayerWeights {
  Tensor<T> weight;  // conv: [out, in, k, k]; linear/classifier: [in, out]
  Tensor<T> bias;    // [out] when the layer has a bias
  std::optional<BatchNormParams<T>> post_bn;
  std::vector<std::optional<BatchNormParams<T>>> input_bn;  // one per incoming connection when pre-normed
};

template <typename T>
struct Network {
  TopologyGraph topology;
  std::vector<LayerWeights<T>> layers;

  /// Trainable tensors in a fixed order, with stable names.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& name = topology.layers[i].name;
      const auto& w = layers[i];
      for (std::size_t j = 0; j < w.input_bn.size(); ++j)
        if (w.input_bn[j]) {
          const auto p = name + ".in" + std::to_string(j) + ".bn";
          out.emplace_back(p + ".gamma", w.input_bn[j]->gamma);
          out.emplace_back(p + ".beta", w.input_bn[j]->beta);
        }
      out.emplace_back(name + ".weight", w.weight);
      if (w.bias.defined()) out.emplace_back(name + ".bias", w.bias);
      if (w.post_bn) {
        out.emplace_back(name + ".bn.gamma", w.post_bn->gamma);
        out.emplace_back(name + ".bn.beta", w.post_bn->beta);
      }
    }
    return out;
  }

  /// Running statistics (not trained by gradient).
  std::vector<std::pair<std::string, Tensor<T>>> named_buffers() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& name = topology.layers[i].name;
      const auto& w = layers[i];
      for (std::size_t j = 0; j < w.input_bn.size(); ++j)
        if (w.input_bn[j]) {
          const auto p = name + ".in" + std::to_string(j) + ".bn";
          out.emplace_back(p + ".mean", w.input_bn[j]->mean);
          out.emplace_back(p + ".var", w.input_bn[j]->var);
        }
      if (w.post_bn) {
        out.emplace_back(name + ".bn.mean", w.post_bn->mean);
        out.emplace_back(name + ".bn.var", w.post_bn->var);
      }
    }
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  Network clone() const {
    Network n;
    n.topology = topology;
    for (auto& w : layers) {
      LayerWeights<T> c;
      c.weight = w.weight.clone();
      if (w.bias.defined()) c.bias = w.bias.clone();
      if (w.post_bn) c.post_bn = w.post_bn->clone();
      for (auto& b : w.input_bn) c.input_bn.push_back(b ? std::optional(b->clone()) : std::nullopt);
      n.layers.push_back(std::move(c));
    }
    return n;
  }

  /// Converts to another scalar type (used to run gradient checks in double).
  template <typename U>
  Network<U> cast() const {
    auto conv = [](const Tensor<T>& t) {
      std::vector<U> d(t.data().begin(), t.data().end());
      Tensor<U> out(t.shape(), std::move(d));
      out.set_requires_grad(t.requires_grad());
      return out;
    };
    auto conv_bn = [&](const BatchNormParams<T>& b) {
      return BatchNormParams<U>{conv(b.gamma), conv(b.beta), conv(b.mean), conv(b.var)};
    };
    Network<U> n;
    n.topology = topology;
    for (auto& w : layers) {
      LayerWeights<U> c;
      c.weight = conv(w.weight);
      if (w.bias.defined()) c.bias = conv(w.bias);
      if (w.post_bn) c.post_bn = conv_bn(*w.post_bn);
      for (auto& b : w.input_bn) c.input_bn.push_back(b ? std::optional(conv_bn(*b)) : std::nullopt);
      n.layers.push_back(std::move(c));
    }
    return n;
  }
};

/// Fresh weights: He-normal for hidden layers, 1/sqrt(fan_in) normal for the classifier.
template <typename T>
Network<T> init_network(const TopologyGraph& topology, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Network<T> net;
  net.topology = topology;
  for (const auto& l : topology.layers) {
    LayerWeights<T> w;
    const auto cin = static_cast<std::size_t>(l.in_channels());
    const auto cout = static_cast<std::size_t>(l.out_channels);
    const auto k = static_cast<std::size_t>(l.kernel);
    const bool dense = l.kind == LayerKind::linear || l.kind == LayerKind::classifier;
    Shape shape = dense ? Shape{cin, cout} : Shape{cout, cin, k, k};
    const double fan_in = static_cast<double>(dense ? cin : cin * k * k);
    const double stddev = l.kind == LayerKind::classifier ? 1.0 / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> values(shape_size(shape));
    for (auto& v : values) v = static_cast<T>(dist(rng));
    w.weight = Tensor<T>(shape, std::move(values));
    w.weight.set_requires_grad();
    if (l.bias) {
      w.bias = Tensor<T>(Shape{cout});
      w.bias.set_requires_grad();
    }
    if (l.post_norm) w.post_bn = BatchNormParams<T>::make(cout);
    for (auto& in : l.inputs) {
      if (l.pre_norm)
        w.input_bn.push_back(BatchNormParams<T>::make(static_cast<std::size_t>(in.size())));
      else
        w.input_bn.push_back(std::nullopt);
    }
    net.layers.push_back(std::move(w));
  }
  return net;
}

// ---------------------------------------------------------------------------
// Gates

enum class GateSharing { per_connection, per_source };

inline const char* to_string(GateSharing s) { return s == GateSharing::per_connection ? "per-connection" : "per-source"; }

struct GateSlot {
  int layer = -1;   // first consumer covered by this vector
  int input = -1;   // connection index within that consumer
  int source = -1;  // source layer
  int channels = 0;
};

/// Assignment of gate vectors to connections. Every connection from a hidden
/// layer is gated; connections from the network input are not.
struct GateLayout {
  GateSharing sharing = GateSharing::per_connection;
  std::vector<std::vector<int>> slot;  // [layer][input] -> gate vector index, or -1
  std::vector<GateSlot> vectors;

  std::size_t total() const {
    std::size_t n = 0;
    for (auto& v : vectors) n += static_cast<std::size_t>(v.channels);
    return n;
  }
};

inline GateLayout make_gate_layout(const TopologyGraph& g, GateSharing sharing) {
  GateLayout layout;
  layout.sharing = sharing;
  std::vector<int> by_source(static_cast<std::size_t>(g.size()), -1);
  for (int i = 0; i < g.size(); ++i) {
    const auto& l = g.layer(i);
    layout.slot.emplace_back(l.inputs.size(), -1);
    for (std::size_t j = 0; j < l.inputs.size(); ++j) {
      const auto& in = l.inputs[j];
      if (in.from_input()) continue;
      if (in.size() != g.source_channels(in.source))
        throw SpecError("gates attach to full teacher connections only (layer " + l.name + ")");
      int idx;
      if (sharing == GateSharing::per_source && by_source[static_cast<std::size_t>(in.source)] >= 0) {
        idx = by_source[static_cast<std::size_t>(in.source)];
      } else {
        idx = static_cast<int>(layout.vectors.size());
        layout.vectors.push_back({i, static_cast<int>(j), in.source, in.size()});
        by_source[static_cast<std::size_t>(in.source)] = idx;
      }
      layout.slot.back()[j] = idx;
    }
  }
  return layout;
}

template <typename T>
struct GateSet {
  GateLayout layout;
  std::vector<Tensor<T>> g;                 // one per layout vector
  std::vector<std::vector<double>> alpha;   // L1 weights, aligned with g

  const Tensor<T>* gate_for(int layer, std::size_t input) const {
    const int idx = layout.slot.at(static_cast<std::size_t>(layer)).at(input);
    return idx < 0 ? nullptr : &g[static_cast<std::size_t>(idx)];
  }
  std::vector<std::span<const T>> values() const {
    std::vector<std::span<const T>> out;
    for (auto& t : g) out.push_back(t.data());
    return out;
  }
  std::size_t open_count() const {
    std::size_t n = 0;
    for (auto& t : g)
      for (T v : t.data()) n += v != T{0};
    return n;
  }
  GateSet clone() const {
    GateSet c{layout, {}, alpha};
    for (auto& t : g) c.g.push_back(t.clone());
    return c;
  }
};

template <typename T>
struct GatedModel {
  Network<T> net;
  GateSet<T> gates;
};

/// Wraps a copy of `teacher` with unit gates on every channel of every gated connection.
/// `alphas` must supply one L1 weight in (0, 1] per gate entry.
template <typename T>
GatedModel<T> attach_gates(const Network<T>& teacher, const std::vector<std::vector<double>>& alphas,
                           GateSharing sharing = GateSharing::per_connection) {
  GatedModel<T> m{teacher.clone(), {}};
  m.gates.layout = make_gate_layout(teacher.topology, sharing);
  std::string gaps;
  for (std::size_t v = 0; v < m.gates.layout.vectors.size(); ++v) {
    const auto& slot = m.gates.layout.vectors[v];
    const std::size_t have = v < alphas.size() ? alphas[v].size() : 0;
    if (have < static_cast<std::size_t>(slot.channels)) {
      gaps += " " + teacher.topology.layer(slot.layer).name + ".in" + std::to_string(slot.input) + "[" +
              std::to_string(have) + ".." + std::to_string(slot.channels - 1) + "]";
    }
  }
  if (!gaps.empty()) throw Error("alphas do not cover gate channels:" + gaps);
  if (alphas.size() != m.gates.layout.vectors.size()) throw Error("alphas cover more gate vectors than exist");
  for (std::size_t v = 0; v < alphas.size(); ++v) {
    if (alphas[v].size() != static_cast<std::size_t>(m.gates.layout.vectors[v].channels))
      throw Error("alpha vector " + std::to_string(v) + " has extra entries");
    for (double a : alphas[v])
      if (!(a > 0 && a <= 1)) throw Error("alpha entries must lie in (0, 1]");
    Tensor<T> g(Shape{alphas[v].size()}, T{1});
    g.set_requires_grad();
    m.gates.g.push_back(std::move(g));
  }
  m.gates.alpha = alphas;
  return m;
}

// ---------------------------------------------------------------------------
// Forward

namespace detail {

inline bool is_identity(const Connection& c, int source_channels) {
  if (c.size() != source_channels) return false;
  for (int i = 0; i < c.size(); ++i)
    if (c.channels[static_cast<std::size_t>(i)] != i) return false;
  return true;
}

}  // namespace detail

/// Runs the network on x ([N,C,H,W], or [N,D] for flat inputs). With `gates`, each gated
/// connection's activation map is scaled channel-wise before the consuming op.
template <typename T>
Tensor<T> forward(Tape<T>& tape, Network<T>& net, const Tensor<T>& x, Mode mode, const GateSet<T>* gates = nullptr) {
  const auto& topo = net.topology;
  const auto& in = topo.input;
  const bool ok = in.flat ? (x.rank() == 2 && x.dim(1) == static_cast<std::size_t>(in.channels))
                          : (x.rank() == 4 && x.dim(1) == static_cast<std::size_t>(in.channels) &&
                             x.dim(2) == static_cast<std::size_t>(in.height) &&
                             x.dim(3) == static_cast<std::size_t>(in.width));
  if (!ok) throw ShapeError("forward", "input " + shape_str(x.shape()) + " does not match " + topo.spec.to_string());
  std::vector<Tensor<T>> acts(topo.layers.size());
  for (std::size_t i = 0; i < topo.layers.size(); ++i) {
    const auto& l = topo.layers[i];
    auto& w = net.layers[i];
    std::vector<Tensor<T>> parts;
    for (std::size_t j = 0; j < l.inputs.size(); ++j) {
      const auto& conn = l.inputs[j];
      Tensor<T> a = conn.from_input() ? x : acts[static_cast<std::size_t>(conn.source)];
      if (!detail::is_identity(conn, topo.source_channels(conn.source))) a = select_channels(tape, a, conn.channels);
      if (l.pre_norm) {
        auto& bn = *w.input_bn[j];
        a = relu(tape, batch_norm(tape, a, bn.gamma, bn.beta, bn.mean, bn.var, mode));
      }
      if (gates) {
        if (const auto* g = gates->gate_for(static_cast<int>(i), j)) a = channel_scale(tape, a, *g);
      }
      parts.push_back(std::move(a));
    }
    Tensor<T> h = concat_channels(tape, parts);
    Tensor<T> y;
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::transition:
        y = conv2d(tape, h, w.weight, static_cast<std::size_t>(l.stride), static_cast<std::size_t>(l.pad));
        break;
      case LayerKind::classifier:
        if (h.rank() == 4) h = global_avg_pool(tape, h);
        [[fallthrough]];
      case LayerKind::linear:
        y = matmul(tape, h, w.weight);
        if (w.bias.defined()) y = add_bias(tape, y, w.bias);
        break;
    }
    if (w.post_bn) y = batch_norm(tape, y, w.post_bn->gamma, w.post_bn->beta, w.post_bn->mean, w.post_bn->var, mode);
    if (l.post_relu) y = relu(tape, y);
    if (l.pool > 1) y = avg_pool2d(tape, y, static_cast<std::size_t>(l.pool));
    acts[i] = std::move(y);
  }
  return acts.back();
}

template <typename T>
Tensor<T> gated_forward(Tape<T>& tape, GatedModel<T>& model, const Tensor<T>& x, Mode mode) {
  return forward(tape, model.net, x, mode, &model.gates);
}

/// Eval-mode forward without recording.
template <typename T>
Tensor<T> predict(Network<T>& net, const Tensor<T>& x, const GateSet<T>* gates = nullptr) {
  Tape<T> tape(false);
  return forward(tape, net, x, Mode::eval, gates);
}

}  // namespace gsearch
