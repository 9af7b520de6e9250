#pragma once

// Student extraction: drop closed channels, dead layers and empty connections,
// folding surviving gate values into the consuming weights.

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "gsearch/flops.hpp"
#include "gsearch/network.hpp"

namespace gsearch {

struct KeptConnection {
  int layer = -1;         // teacher consumer layer
  int input = -1;         // connection index within the consumer
  int source = -1;        // teacher source layer (-1: network input)
  std::vector<int> kept;  // surviving teacher source channels, ascending

  bool operator==(const KeptConnection&) const = default;
};

struct StudentArchitecture {
  ArchSpec teacher;
  std::vector<KeptConnection> connections;          // every teacher connection, in layer order
  std::vector<std::pair<int, int>> removed;         // (layer, input) of connections with nothing kept
  std::string teacher_id;
  std::string config_hash;

  bool operator==(const StudentArchitecture&) const = default;
};

/// Teacher-to-student correspondence for a derived topology.
struct StudentMapping {
  std::vector<int> layer;                   // teacher layer -> student layer, or -1 if removed
  std::vector<std::vector<int>> alive;      // teacher layer -> surviving output channels, ascending
};

/// Derives the architecture kept by `mask`. Throws DisconnectedError when a
/// surviving layer has lost all of its inputs.
inline StudentArchitecture architecture_from_mask(const TopologyGraph& teacher, const ChannelMask& mask) {
  const Liveness lv = compute_liveness(teacher, mask);
  StudentArchitecture arch;
  arch.teacher = teacher.spec;
  for (int i = 0; i < teacher.size(); ++i) {
    const auto& l = teacher.layer(i);
    const bool alive = lv.layer_alive[static_cast<std::size_t>(i)];
    if (alive && lv.in_eff[static_cast<std::size_t>(i)] == 0) throw DisconnectedError(i, l.name);
    for (std::size_t j = 0; j < l.inputs.size(); ++j) {
      KeptConnection kc{i, static_cast<int>(j), l.inputs[j].source, {}};
      if (alive)
        for (std::size_t p = 0; p < l.inputs[j].channels.size(); ++p)
          if (mask[static_cast<std::size_t>(i)][j][p]) kc.kept.push_back(l.inputs[j].channels[p]);
      std::sort(kc.kept.begin(), kc.kept.end());
      if (kc.kept.empty()) arch.removed.emplace_back(i, static_cast<int>(j));
      arch.connections.push_back(std::move(kc));
    }
  }
  return arch;
}

/// Builds the student topology described by `arch` on top of its teacher.
inline std::pair<TopologyGraph, StudentMapping> student_topology(const TopologyGraph& teacher,
                                                                 const StudentArchitecture& arch) {
  const auto n = static_cast<std::size_t>(teacher.size());
  std::map<std::pair<int, int>, const KeptConnection*> by_conn;
  for (auto& kc : arch.connections) {
    if (kc.layer < 0 || kc.layer >= teacher.size() || kc.input < 0 ||
        static_cast<std::size_t>(kc.input) >= teacher.layer(kc.layer).inputs.size() ||
        teacher.layer(kc.layer).inputs[static_cast<std::size_t>(kc.input)].source != kc.source)
      throw SpecError("student architecture does not match its teacher topology");
    const int sc = teacher.source_channels(kc.source);
    for (int c : kc.kept)
      if (c < 0 || c >= sc) throw SpecError("kept channel " + std::to_string(c) + " out of range");
    by_conn[{kc.layer, kc.input}] = &kc;
  }
  StudentMapping map;
  map.layer.assign(n, -1);
  map.alive.resize(n);
  // Surviving outputs: every channel some kept connection carries; all classifier outputs.
  for (auto& kc : arch.connections)
    if (kc.source >= 0)
      for (int c : kc.kept) map.alive[static_cast<std::size_t>(kc.source)].push_back(c);
  for (std::size_t i = 0; i < n; ++i) {
    auto& a = map.alive[i];
    if (teacher.layers[i].kind == LayerKind::classifier) {
      a.resize(static_cast<std::size_t>(teacher.layers[i].out_channels));
      std::iota(a.begin(), a.end(), 0);
    }
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  TopologyGraph s;
  s.spec = teacher.spec;
  s.input = teacher.input;
  for (std::size_t i = 0; i < n; ++i) {
    if (map.alive[i].empty()) continue;
    LayerSpec l = teacher.layers[i];
    l.out_channels = static_cast<int>(map.alive[i].size());
    l.inputs.clear();
    for (std::size_t j = 0; j < teacher.layers[i].inputs.size(); ++j) {
      auto it = by_conn.find({static_cast<int>(i), static_cast<int>(j)});
      if (it == by_conn.end()) throw SpecError("student architecture is missing a connection of " + l.name);
      const auto& kc = *it->second;
      if (kc.kept.empty()) continue;
      Connection c;
      if (kc.source < 0) {
        c.source = -1;
        c.channels = kc.kept;
      } else {
        const int src = map.layer[static_cast<std::size_t>(kc.source)];
        if (src < 0) throw SpecError("connection into " + l.name + " comes from a removed layer");
        c.source = src;
        const auto& a = map.alive[static_cast<std::size_t>(kc.source)];
        for (int ch : kc.kept)
          c.channels.push_back(static_cast<int>(std::lower_bound(a.begin(), a.end(), ch) - a.begin()));
      }
      l.inputs.push_back(std::move(c));
    }
    if (l.inputs.empty()) throw DisconnectedError(static_cast<int>(i), l.name);
    map.layer[i] = s.size();
    s.layers.push_back(std::move(l));
  }
  s.resolve_and_validate();
  return {std::move(s), std::move(map)};
}

template <typename T>
struct Extraction {
  StudentArchitecture arch;
  Network<T> student;
};

namespace detail {

template <typename T>
Tensor<T> gather(const Tensor<T>& t, const std::vector<int>& idx) {
  std::vector<T> d;
  for (int i : idx) d.push_back(t[static_cast<std::size_t>(i)]);
  Tensor<T> out(Shape{idx.size()}, std::move(d));
  out.set_requires_grad(t.requires_grad());
  return out;
}

template <typename T>
BatchNormParams<T> gather_bn(const BatchNormParams<T>& b, const std::vector<int>& idx) {
  return {gather(b.gamma, idx), gather(b.beta, idx), gather(b.mean, idx), gather(b.var, idx)};
}

}  // namespace detail

/// Extracts the student kept by the model's non-zero gates, with gate values folded
/// into the consuming weights so that the student computes the gated function.
template <typename T>
Extraction<T> extract_student(const GatedModel<T>& model) {
  const auto& teacher = model.net.topology;
  const ChannelMask mask = mask_from_gates(teacher, model.gates);
  Extraction<T> ex;
  ex.arch = architecture_from_mask(teacher, mask);
  auto [topo, map] = student_topology(teacher, ex.arch);
  ex.student.topology = topo;
  std::map<std::pair<int, int>, const KeptConnection*> by_conn;
  for (auto& kc : ex.arch.connections) by_conn[{kc.layer, kc.input}] = &kc;

  for (int i = 0; i < teacher.size(); ++i) {
    const auto ti = static_cast<std::size_t>(i);
    if (map.layer[ti] < 0) continue;
    const auto& tl = teacher.layers[ti];
    const auto& tw = model.net.layers[ti];
    const auto& out_idx = map.alive[ti];
    // Teacher input-channel index and gate factor for each student input channel.
    std::vector<int> in_idx;
    std::vector<T> in_scale;
    LayerWeights<T> sw;
    int offset = 0;
    for (std::size_t j = 0; j < tl.inputs.size(); ++j) {
      const auto& kc = *by_conn.at({i, static_cast<int>(j)});
      const Tensor<T>* gate = model.gates.gate_for(i, j);
      std::vector<int> positions;
      for (int ch : kc.kept) {
        const auto& chans = tl.inputs[j].channels;
        const int pos = static_cast<int>(std::find(chans.begin(), chans.end(), ch) - chans.begin());
        positions.push_back(pos);
        in_idx.push_back(offset + pos);
        in_scale.push_back(gate ? (*gate)[static_cast<std::size_t>(pos)] : T{1});
      }
      if (!kc.kept.empty()) {
        if (tw.input_bn[j])
          sw.input_bn.push_back(detail::gather_bn(*tw.input_bn[j], positions));
        else
          sw.input_bn.push_back(std::nullopt);
      }
      offset += tl.inputs[j].size();
    }
    const auto& w = tw.weight;
    const std::size_t nin = in_idx.size(), nout = out_idx.size();
    if (tl.kind == LayerKind::linear || tl.kind == LayerKind::classifier) {
      const std::size_t tout = w.dim(1);
      Tensor<T> nw(Shape{nin, nout});
      for (std::size_t a = 0; a < nin; ++a)
        for (std::size_t b = 0; b < nout; ++b)
          nw[a * nout + b] = w[static_cast<std::size_t>(in_idx[a]) * tout + static_cast<std::size_t>(out_idx[b])] * in_scale[a];
      sw.weight = nw;
    } else {
      const std::size_t tin = w.dim(1), kk = w.dim(2) * w.dim(3);
      Tensor<T> nw(Shape{nout, nin, w.dim(2), w.dim(3)});
      for (std::size_t b = 0; b < nout; ++b)
        for (std::size_t a = 0; a < nin; ++a)
          for (std::size_t q = 0; q < kk; ++q)
            nw[(b * nin + a) * kk + q] =
                w[(static_cast<std::size_t>(out_idx[b]) * tin + static_cast<std::size_t>(in_idx[a])) * kk + q] * in_scale[a];
      sw.weight = nw;
    }
    sw.weight.set_requires_grad();
    if (tw.bias.defined()) sw.bias = detail::gather(tw.bias, out_idx);
    if (tw.post_bn) sw.post_bn = detail::gather_bn(*tw.post_bn, out_idx);
    ex.student.layers.push_back(std::move(sw));
  }
  return ex;
}

}  // namespace gsearch
