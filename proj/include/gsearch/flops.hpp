#pragma once

// FLOPs and parameter accounting for full and partially gated topologies.
//
// A channel mask marks, per connection, which carried channels survive. A layer
// output channel is alive when some alive consumer keeps it; the classifier's
// outputs are always alive. Dead channels cost nothing, and a layer with no
// alive outputs is dropped together with its inputs.

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "gsearch/network.hpp"
#include "gsearch/topology.hpp"

namespace gsearch {

enum class FlopsConvention {
  mac_as_one,  // one multiply-add counts as one FLOP
  mac_as_two,  // one multiply-add counts as two FLOPs
};

/// Default counting convention. One FLOP per multiply-add reproduces the published
/// DenseNet-BC(100,12) figure; see README for the calibration.
inline constexpr FlopsConvention kDefaultConvention = FlopsConvention::mac_as_one;

inline long long flops_factor(FlopsConvention c) { return c == FlopsConvention::mac_as_two ? 2 : 1; }

inline std::string convention_note(FlopsConvention c) {
  return std::string(c == FlopsConvention::mac_as_two ? "2 FLOPs" : "1 FLOP") +
         " per multiply-add in conv/linear layers; bias, batch-norm, ReLU and pooling not counted";
}

/// [layer][input][position] -> kept?
using ChannelMask = std::vector<std::vector<std::vector<char>>>;

inline ChannelMask full_mask(const TopologyGraph& g) {
  ChannelMask m;
  for (auto& l : g.layers) {
    m.emplace_back();
    for (auto& in : l.inputs) m.back().emplace_back(static_cast<std::size_t>(in.size()), 1);
  }
  return m;
}

/// Mask with every channel whose gate is exactly zero removed.
template <typename T>
ChannelMask mask_from_gates(const TopologyGraph& g, const GateSet<T>& gates) {
  ChannelMask m = full_mask(g);
  for (int i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g.layer(i).inputs.size(); ++j)
      if (const auto* gt = gates.gate_for(i, j)) {
        auto d = gt->data();
        auto& row = m[static_cast<std::size_t>(i)][j];
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = d[c] != T{0};
      }
  return m;
}

struct Liveness {
  std::vector<std::vector<int>> keep_count;  // [layer][out channel] -> alive consumers keeping it
  std::vector<char> layer_alive;
  std::vector<int> out_alive;  // alive output channels
  std::vector<int> in_eff;     // kept input channels of alive layers

  bool channel_alive(int layer, int c) const {
    return keep_count[static_cast<std::size_t>(layer)][static_cast<std::size_t>(c)] > 0;
  }
};

inline Liveness compute_liveness(const TopologyGraph& g, const ChannelMask& mask) {
  const auto n = static_cast<std::size_t>(g.size());
  Liveness lv;
  lv.keep_count.resize(n);
  lv.layer_alive.assign(n, 0);
  lv.out_alive.assign(n, 0);
  lv.in_eff.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) lv.keep_count[i].assign(static_cast<std::size_t>(g.layers[i].out_channels), 0);
  for (std::size_t i = n; i-- > 0;) {
    const auto& l = g.layers[i];
    if (l.kind == LayerKind::classifier) {
      lv.out_alive[i] = l.out_channels;
    } else {
      for (int c : lv.keep_count[i]) lv.out_alive[i] += c > 0;
    }
    if (lv.out_alive[i] == 0) continue;
    lv.layer_alive[i] = 1;
    for (std::size_t j = 0; j < l.inputs.size(); ++j) {
      const auto& conn = l.inputs[j];
      for (std::size_t p = 0; p < conn.channels.size(); ++p) {
        if (!mask[i][j][p]) continue;
        ++lv.in_eff[i];
        if (!conn.from_input())
          ++lv.keep_count[static_cast<std::size_t>(conn.source)][static_cast<std::size_t>(conn.channels[p])];
      }
    }
  }
  return lv;
}

struct LayerCost {
  std::string name;
  long long flops = 0;
  long long params = 0;
};

struct FlopsReport {
  FlopsConvention convention = kDefaultConvention;
  std::vector<LayerCost> layers;
  long long total_flops = 0;
  long long total_params = 0;
  std::vector<std::vector<long long>> saved_flops;  // F_j per gate entry, aligned with a GateLayout

  std::string note() const { return convention_note(convention); }
};

/// Counts FLOPs and parameters of `g` restricted to `mask` (all channels when null).
inline FlopsReport model_flops_params(const TopologyGraph& g, const ChannelMask* mask = nullptr,
                                      FlopsConvention convention = kDefaultConvention) {
  const ChannelMask full = mask ? ChannelMask{} : full_mask(g);
  const ChannelMask& m = mask ? *mask : full;
  const Liveness lv = compute_liveness(g, m);
  const long long f = flops_factor(convention);
  FlopsReport r;
  r.convention = convention;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    LayerCost cost{l.name, 0, 0};
    if (lv.layer_alive[i]) {
      const long long in = lv.in_eff[i], out = lv.out_alive[i];
      cost.flops = f * l.macs_per_pair() * in * out;
      cost.params = in * out * l.kernel * l.kernel;
      if (l.bias) cost.params += out;
      if (l.post_norm) cost.params += 2 * out;
      if (l.pre_norm) cost.params += 2 * in;
    }
    r.total_flops += cost.flops;
    r.total_params += cost.params;
    r.layers.push_back(std::move(cost));
  }
  return r;
}

namespace detail {

class RemovalSimulator {
 public:
  RemovalSimulator(const TopologyGraph& g, const ChannelMask& mask, FlopsConvention c)
      : g_(g), mask_(mask), lv_(compute_liveness(g, mask)), factor_(flops_factor(c)) {}

  /// Drops position `pos` of connection `input` into `layer`.
  long long remove_connection_channel(int layer, std::size_t input, std::size_t pos) {
    auto& kept = mask_[static_cast<std::size_t>(layer)][input][pos];
    if (!kept) return 0;
    kept = 0;
    const auto li = static_cast<std::size_t>(layer);
    if (!lv_.layer_alive[li]) return 0;
    const auto& l = g_.layer(layer);
    long long saved = factor_ * l.macs_per_pair() * lv_.out_alive[li];
    --lv_.in_eff[li];
    const auto& conn = l.inputs[input];
    if (!conn.from_input()) saved += release(conn.source, conn.channels[pos]);
    return saved;
  }

  /// Drops channel `c` of `source` from every connection carrying it.
  long long remove_source_channel(int source, int c) {
    long long saved = 0;
    for (int t = source + 1; t < g_.size(); ++t) {
      const auto& l = g_.layer(t);
      for (std::size_t j = 0; j < l.inputs.size(); ++j) {
        const auto& conn = l.inputs[j];
        if (conn.source != source) continue;
        for (std::size_t p = 0; p < conn.channels.size(); ++p)
          if (conn.channels[p] == c) saved += remove_connection_channel(t, j, p);
      }
    }
    return saved;
  }

 private:
  // One fewer alive consumer keeps channel c of `layer`; kill it when none remain.
  long long release(int layer, int c) {
    const auto li = static_cast<std::size_t>(layer);
    auto& count = lv_.keep_count[li][static_cast<std::size_t>(c)];
    if (--count > 0) return 0;
    const auto& l = g_.layer(layer);
    long long saved = factor_ * l.macs_per_pair() * lv_.in_eff[li];
    if (--lv_.out_alive[li] > 0) return saved;
    lv_.layer_alive[li] = 0;
    for (std::size_t j = 0; j < l.inputs.size(); ++j) {
      const auto& conn = l.inputs[j];
      if (conn.from_input()) continue;
      for (std::size_t p = 0; p < conn.channels.size(); ++p)
        if (mask_[li][j][p]) saved += release(conn.source, conn.channels[p]);
    }
    lv_.in_eff[li] = 0;
    return saved;
  }

  const TopologyGraph& g_;
  ChannelMask mask_;
  Liveness lv_;
  long long factor_;
};

}  // namespace detail

/// F_j for one channel of one connection: FLOPs saved by removing it from the
/// surviving graph, counting its consumption and, when no other consumer keeps
/// it, its production (cascading through layers left without outputs).
inline long long channel_saved_flops(const TopologyGraph& g, const ChannelMask& mask, int layer, std::size_t input,
                                     std::size_t pos, FlopsConvention convention = kDefaultConvention) {
  if (layer < 0 || layer >= g.size() || input >= g.layer(layer).inputs.size() ||
      pos >= g.layer(layer).inputs[input].channels.size())
    throw Error("channel_saved_flops: invalid channel (layer " + std::to_string(layer) + ", input " +
                std::to_string(input) + ", position " + std::to_string(pos) + ")");
  detail::RemovalSimulator sim(g, mask, convention);
  return sim.remove_connection_channel(layer, input, pos);
}

/// F_j when a source channel is removed from all of its consumers at once.
inline long long source_channel_saved_flops(const TopologyGraph& g, const ChannelMask& mask, int source, int channel,
                                            FlopsConvention convention = kDefaultConvention) {
  if (source < 0 || source >= g.size() || channel < 0 || channel >= g.layer(source).out_channels)
    throw Error("source_channel_saved_flops: invalid channel " + std::to_string(channel) + " of layer " +
                std::to_string(source));
  detail::RemovalSimulator sim(g, mask, convention);
  return sim.remove_source_channel(source, channel);
}

/// Report with F_j filled in for every entry of `layout`.
inline FlopsReport flops_with_savings(const TopologyGraph& g, const GateLayout& layout, const ChannelMask* mask = nullptr,
                                      FlopsConvention convention = kDefaultConvention) {
  const ChannelMask m = mask ? *mask : full_mask(g);
  FlopsReport r = model_flops_params(g, &m, convention);
  for (const auto& slot : layout.vectors) {
    std::vector<long long> f(static_cast<std::size_t>(slot.channels));
    for (int c = 0; c < slot.channels; ++c) {
      f[static_cast<std::size_t>(c)] =
          layout.sharing == GateSharing::per_source
              ? source_channel_saved_flops(g, m, slot.source, c, convention)
              : channel_saved_flops(g, m, slot.layer, static_cast<std::size_t>(slot.input), static_cast<std::size_t>(c),
                                    convention);
    }
    r.saved_flops.push_back(std::move(f));
  }
  return r;
}

/// alpha_j = F_j / max_k F_k.
inline std::vector<std::vector<double>> alpha_weights(const FlopsReport& report) {
  long long mx = 0;
  for (auto& v : report.saved_flops)
    for (long long f : v) mx = std::max(mx, f);
  if (mx <= 0) throw Error("alpha_weights: no positive saved FLOPs");
  std::vector<std::vector<double>> out;
  for (auto& v : report.saved_flops) {
    out.emplace_back();
    for (long long f : v) out.back().push_back(static_cast<double>(f) / static_cast<double>(mx));
  }
  return out;
}

/// All-ones L1 weights for the unweighted ablation.
inline std::vector<std::vector<double>> unit_alphas(const GateLayout& layout) {
  std::vector<std::vector<double>> out;
  for (auto& v : layout.vectors) out.emplace_back(static_cast<std::size_t>(v.channels), 1.0);
  return out;
}

template <typename T>
long long effective_flops(const GatedModel<T>& m, FlopsConvention convention = kDefaultConvention) {
  const auto mask = mask_from_gates(m.net.topology, m.gates);
  return model_flops_params(m.net.topology, &mask, convention).total_flops;
}

inline std::string format_report(const FlopsReport& r, bool per_layer = true) {
  std::ostringstream os;
  os << "convention: " << r.note() << "\n";
  if (per_layer)
    for (auto& l : r.layers) os << "layer " << l.name << " flops=" << l.flops << " params=" << l.params << "\n";
  os << "total_flops=" << r.total_flops << "\n";
  os << "total_params=" << r.total_params << "\n";
  return os.str();
}

}  // namespace gsearch
