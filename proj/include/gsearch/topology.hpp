#pragma once

// Network topologies as ordered layers of channel nodes.
//
// A layer consumes the channel-wise concatenation of its incoming connections.
// Each connection names a source layer (-1 for the network input) and the
// source channels it carries, in order. Teacher graphs carry every channel;
// extracted students carry subsets.

#include <algorithm>
#include <charconv>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gsearch/error.hpp"

namespace gsearch {

enum class LayerKind { conv, linear, transition, classifier };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::linear: return "linear";
    case LayerKind::transition: return "transition";
    case LayerKind::classifier: return "classifier";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string_view s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "linear") return LayerKind::linear;
  if (s == "transition") return LayerKind::transition;
  if (s == "classifier") return LayerKind::classifier;
  throw SpecError("unknown layer kind '" + std::string(s) + "'");
}

struct Connection {
  int source = -1;            // -1: network input
  std::vector<int> channels;  // source channel indices carried, in order

  bool from_input() const { return source < 0; }
  int size() const { return static_cast<int>(channels.size()); }
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  int out_channels = 1;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int pool = 1;            // average-pool window applied after the op (1: none)
  bool pre_norm = false;   // BN + ReLU on every incoming connection
  bool post_norm = false;  // BN after the op
  bool post_relu = false;
  bool bias = false;
  std::vector<Connection> inputs;

  // Resolved geometry. `op_*` is the op output, `out_*` after pooling.
  bool spatial = true;
  int in_h = 1, in_w = 1, op_h = 1, op_w = 1, out_h = 1, out_w = 1;

  int in_channels() const {
    int c = 0;
    for (auto& in : inputs) c += in.size();
    return c;
  }
  /// Multiply-adds per (input channel, output channel) pair.
  long long macs_per_pair() const {
    if (kind == LayerKind::linear || kind == LayerKind::classifier) return 1;
    return static_cast<long long>(kernel) * kernel * op_h * op_w;
  }
};

struct InputSpec {
  int channels = 1;
  int height = 1;
  int width = 1;
  bool flat = false;  // [N, channels] rather than [N, C, H, W]

  bool operator==(const InputSpec&) const = default;
};

struct DenseBlock {
  int input_layer = -1;             // layer whose output enters the block
  std::vector<int> entry_layers;    // per dense layer, the node consuming the concatenated features
  std::vector<int> output_layers;   // per dense layer, the node whose output joins the concatenation
  int consumer_after = -1;          // transition or classifier after the block
  int growth = 0;
  int k0 = 0;
};

inline std::string input_to_string(const InputSpec& in) {
  if (in.flat) return std::to_string(in.channels);
  return std::to_string(in.height) + "x" + std::to_string(in.width) + "x" + std::to_string(in.channels);
}

/// Architecture description: a builder string plus input geometry and class count.
///   mlp:4,8,3          widths from input features to classes
///   cnn:8,16p,16       3x3 conv-BN-ReLU stages, "p" adds 2x2 average pooling
///   dense:100,12       DenseNet-BC (bottleneck, compression 0.5), depth L, growth k
///   dense-lite:22,6    plain dense blocks, no bottleneck or compression
struct ArchSpec {
  std::string arch;
  InputSpec input;
  int classes = 0;

  std::string to_string() const {
    return "arch=" + arch + ";input=" + input_to_string(input) + ";classes=" + std::to_string(classes);
  }
  bool operator==(const ArchSpec&) const = default;
};

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline int parse_int(std::string_view s, const std::string& what) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw SpecError("invalid integer '" + std::string(s) + "' in " + what);
  return v;
}

}  // namespace detail

/// Parses "HxWxC" (spatial) or "D" (flat features).
inline InputSpec parse_input(std::string_view s) {
  auto parts = detail::split(s, 'x');
  InputSpec in;
  if (parts.size() == 1) {
    in.flat = true;
    in.channels = detail::parse_int(parts[0], "input");
  } else if (parts.size() == 3) {
    in.height = detail::parse_int(parts[0], "input");
    in.width = detail::parse_int(parts[1], "input");
    in.channels = detail::parse_int(parts[2], "input");
  } else {
    throw SpecError("input must be HxWxC or D, got '" + std::string(s) + "'");
  }
  if (in.channels < 1 || in.height < 1 || in.width < 1) throw SpecError("input extents must be positive");
  return in;
}

inline ArchSpec parse_arch_spec(std::string_view text) {
  ArchSpec spec;
  bool have_input = false;
  for (auto& field : detail::split(text, ';')) {
    auto eq = field.find('=');
    if (eq == std::string::npos) throw SpecError("malformed architecture field '" + field + "'");
    auto key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "arch")
      spec.arch = value;
    else if (key == "input") {
      spec.input = parse_input(value);
      have_input = true;
    } else if (key == "classes")
      spec.classes = detail::parse_int(value, "classes");
    else
      throw SpecError("unknown architecture field '" + key + "'");
  }
  if (spec.arch.empty() || !have_input) throw SpecError("architecture description needs arch= and input=");
  return spec;
}

struct TopologyGraph {
  ArchSpec spec;
  InputSpec input;
  std::vector<LayerSpec> layers;
  std::vector<DenseBlock> dense_blocks;
  int num_classes = 0;

  int size() const { return static_cast<int>(layers.size()); }
  int classifier() const { return size() - 1; }
  const LayerSpec& layer(int i) const { return layers.at(static_cast<std::size_t>(i)); }

  int source_channels(int source) const { return source < 0 ? input.channels : layer(source).out_channels; }

  long long total_channels_of_connections() const {
    long long n = 0;
    for (auto& l : layers)
      for (auto& in : l.inputs)
        if (!in.from_input()) n += in.size();
    return n;
  }

  /// Resolves spatial geometry from the input forward and checks structural invariants.
  void resolve_and_validate() {
    if (layers.empty()) throw SpecError("topology has no layers");
    int classifiers = 0;
    for (int i = 0; i < size(); ++i) {
      auto& l = layers[static_cast<std::size_t>(i)];
      if (l.kind == LayerKind::classifier) ++classifiers;
      if (l.out_channels < 1) throw SpecError("layer " + l.name + " has no output channels");
      if (l.inputs.empty()) throw SpecError("layer " + l.name + " has no incoming connections");
      bool first = true;
      for (auto& in : l.inputs) {
        if (in.source >= i) throw SpecError("layer " + l.name + " consumes a later layer (graph must be topologically ordered)");
        const int sc = source_channels(in.source);
        for (int c : in.channels)
          if (c < 0 || c >= sc) throw SpecError("layer " + l.name + " references channel " + std::to_string(c) + " of a " +
                                                std::to_string(sc) + "-channel source");
        if (in.channels.empty()) throw SpecError("layer " + l.name + " has an empty connection");
        bool sp;
        int h, w;
        if (in.from_input()) {
          sp = !input.flat;
          h = input.height;
          w = input.width;
        } else {
          auto& s = layer(in.source);
          sp = s.spatial;
          h = s.out_h;
          w = s.out_w;
        }
        if (first) {
          l.spatial = sp;
          l.in_h = h;
          l.in_w = w;
          first = false;
        } else if (sp != l.spatial || h != l.in_h || w != l.in_w) {
          throw SpecError("layer " + l.name + " concatenates inputs of different spatial size");
        }
      }
      switch (l.kind) {
        case LayerKind::conv:
        case LayerKind::transition: {
          if (!l.spatial) throw SpecError("conv layer " + l.name + " needs spatial input");
          if (l.kernel % 2 == 0 || l.kernel < 1) throw SpecError("layer " + l.name + " needs an odd kernel");
          l.op_h = (l.in_h + 2 * l.pad - l.kernel) / l.stride + 1;
          l.op_w = (l.in_w + 2 * l.pad - l.kernel) / l.stride + 1;
          if (l.op_h < 1 || l.op_w < 1) throw SpecError("layer " + l.name + " output collapses to zero size");
          l.out_h = l.op_h / l.pool;
          l.out_w = l.op_w / l.pool;
          if (l.out_h < 1 || l.out_w < 1) throw SpecError("layer " + l.name + " pools below one pixel");
          break;
        }
        case LayerKind::linear:
          if (l.spatial) throw SpecError("linear layer " + l.name + " needs flat input");
          [[fallthrough]];
        case LayerKind::classifier:
          // a spatial classifier input is globally average-pooled first
          l.op_h = l.op_w = l.out_h = l.out_w = 1;
          l.spatial = false;
          break;
      }
    }
    if (classifiers != 1 || layers.back().kind != LayerKind::classifier)
      throw SpecError("topology needs exactly one classifier, as the last layer");
    num_classes = layers.back().out_channels;
    for (auto& b : dense_blocks) {
      for (std::size_t l = 0; l < b.entry_layers.size(); ++l) {
        const int expect = b.k0 + b.growth * static_cast<int>(l);
        const int got = layer(b.entry_layers[l]).in_channels();
        if (got != expect)
          throw SpecError("dense block layer " + std::to_string(l + 1) + " receives " + std::to_string(got) +
                          " channels, expected " + std::to_string(expect));
      }
    }
  }
};

namespace detail {

inline Connection full_connection(const TopologyGraph& g, int source) {
  Connection c;
  c.source = source;
  c.channels.resize(static_cast<std::size_t>(g.source_channels(source)));
  std::iota(c.channels.begin(), c.channels.end(), 0);
  return c;
}

inline int add_layer(TopologyGraph& g, LayerSpec l, const std::vector<int>& sources) {
  for (int s : sources) l.inputs.push_back(full_connection(g, s));
  g.layers.push_back(std::move(l));
  return g.size() - 1;
}

inline TopologyGraph build_mlp(const std::vector<int>& widths) {
  if (widths.size() < 2) throw SpecError("mlp needs at least input and output widths");
  for (int w : widths)
    if (w < 1) throw SpecError("mlp widths must be positive");
  TopologyGraph g;
  g.input = InputSpec{widths.front(), 1, 1, true};
  int prev = -1;
  for (std::size_t i = 1; i + 1 < widths.size(); ++i) {
    LayerSpec l;
    l.name = "fc" + std::to_string(i);
    l.kind = LayerKind::linear;
    l.out_channels = widths[i];
    l.bias = true;
    l.post_relu = true;
    prev = add_layer(g, l, {prev});
  }
  LayerSpec c;
  c.name = "classifier";
  c.kind = LayerKind::classifier;
  c.out_channels = widths.back();
  c.bias = true;
  add_layer(g, c, {prev});
  return g;
}

inline TopologyGraph build_cnn(const std::vector<std::string>& stages, InputSpec input, int classes) {
  if (input.flat) throw SpecError("cnn needs an HxWxC input");
  if (stages.empty()) throw SpecError("cnn needs at least one stage");
  TopologyGraph g;
  g.input = input;
  int prev = -1;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    std::string s = stages[i];
    LayerSpec l;
    if (!s.empty() && s.back() == 'p') {
      l.pool = 2;
      s.pop_back();
    }
    l.name = "conv" + std::to_string(i + 1);
    l.kind = LayerKind::conv;
    l.out_channels = parse_int(s, "cnn stage");
    if (l.out_channels < 1) throw SpecError("cnn stage widths must be positive");
    l.kernel = 3;
    l.pad = 1;
    l.post_norm = true;
    l.post_relu = true;
    prev = add_layer(g, l, {prev});
  }
  LayerSpec c;
  c.name = "classifier";
  c.kind = LayerKind::classifier;
  c.out_channels = classes;
  c.bias = true;
  add_layer(g, c, {prev});
  return g;
}

inline TopologyGraph build_dense(int depth, int growth, bool bottleneck, InputSpec input, int classes) {
  if (input.flat) throw SpecError("dense networks need an HxWxC input");
  if (growth < 1) throw SpecError("growth rate must be positive");
  const int per_layer = bottleneck ? 2 : 1;
  const int blocks = 3;
  if (depth < 4 + blocks * per_layer || (depth - 4) % (blocks * per_layer) != 0)
    throw SpecError("depth L=" + std::to_string(depth) + " is inconsistent with " + std::to_string(blocks) +
                    " dense blocks of " + std::to_string(per_layer) + "-conv layers: need (L-4) divisible by " +
                    std::to_string(blocks * per_layer));
  const int n = (depth - 4) / (blocks * per_layer);
  TopologyGraph g;
  g.input = input;
  LayerSpec stem;
  stem.name = "stem";
  stem.kind = LayerKind::conv;
  stem.out_channels = 2 * growth;
  stem.kernel = 3;
  stem.pad = 1;
  int block_input = add_layer(g, stem, {-1});
  for (int b = 0; b < blocks; ++b) {
    DenseBlock blk;
    blk.input_layer = block_input;
    blk.growth = growth;
    blk.k0 = g.layer(block_input).out_channels;
    std::vector<int> feature_sources{block_input};
    for (int l = 1; l <= n; ++l) {
      const std::string prefix = "b" + std::to_string(b + 1) + ".l" + std::to_string(l);
      int entry;
      if (bottleneck) {
        LayerSpec bn;
        bn.name = prefix + ".bottleneck";
        bn.kind = LayerKind::conv;
        bn.out_channels = 4 * growth;
        bn.kernel = 1;
        bn.pre_norm = true;
        entry = add_layer(g, bn, feature_sources);
      } else {
        entry = -2;
      }
      LayerSpec conv;
      conv.name = prefix + ".conv";
      conv.kind = LayerKind::conv;
      conv.out_channels = growth;
      conv.kernel = 3;
      conv.pad = 1;
      conv.pre_norm = true;
      int out = bottleneck ? add_layer(g, conv, {entry}) : add_layer(g, conv, feature_sources);
      if (!bottleneck) entry = out;
      blk.entry_layers.push_back(entry);
      blk.output_layers.push_back(out);
      feature_sources.push_back(out);
    }
    int total = 0;
    for (int s : feature_sources) total += g.source_channels(s);
    if (b + 1 < blocks) {
      LayerSpec t;
      t.name = "transition" + std::to_string(b + 1);
      t.kind = LayerKind::transition;
      t.out_channels = bottleneck ? total / 2 : total;
      t.kernel = 1;
      t.pre_norm = true;
      t.pool = 2;
      blk.consumer_after = add_layer(g, t, feature_sources);
      block_input = blk.consumer_after;
    } else {
      LayerSpec c;
      c.name = "classifier";
      c.kind = LayerKind::classifier;
      c.out_channels = classes;
      c.pre_norm = true;
      c.bias = true;
      blk.consumer_after = add_layer(g, c, feature_sources);
    }
    g.dense_blocks.push_back(blk);
  }
  return g;
}

}  // namespace detail

/// Builds the topology for `spec`. Errors name the offending part of the description.
inline TopologyGraph build_topology(const ArchSpec& spec) {
  auto colon = spec.arch.find(':');
  if (colon == std::string::npos) throw SpecError("architecture '" + spec.arch + "' needs kind:params");
  const std::string kind = spec.arch.substr(0, colon);
  const auto params = detail::split(std::string_view(spec.arch).substr(colon + 1), ',');
  TopologyGraph g;
  if (kind == "mlp") {
    std::vector<int> widths;
    for (auto& p : params) widths.push_back(detail::parse_int(p, "mlp widths"));
    g = detail::build_mlp(widths);
    if (!spec.input.flat || spec.input.channels != widths.front())
      throw SpecError("mlp input width must match the declared input");
    if (spec.classes != 0 && spec.classes != widths.back())
      throw SpecError("mlp output width must match the class count");
  } else if (kind == "cnn") {
    if (spec.classes < 1) throw SpecError("cnn needs a positive class count");
    g = detail::build_cnn(params, spec.input, spec.classes);
  } else if (kind == "dense" || kind == "dense-lite") {
    if (params.size() != 2) throw SpecError(kind + " takes L,k");
    if (spec.classes < 1) throw SpecError(kind + " needs a positive class count");
    g = detail::build_dense(detail::parse_int(params[0], "depth"), detail::parse_int(params[1], "growth"),
                            kind == "dense", spec.input, spec.classes);
  } else {
    throw SpecError("unknown architecture kind '" + kind + "'");
  }
  g.spec = spec;
  if (kind == "mlp") g.spec.classes = g.layers.back().out_channels;
  g.resolve_and_validate();
  return g;
}

inline TopologyGraph build_topology(std::string_view arch, InputSpec input, int classes) {
  return build_topology(ArchSpec{std::string(arch), input, classes});
}

/// mlp:4,8,3 style shorthand with the input and class count implied by the widths.
inline ArchSpec mlp_spec(const std::vector<int>& widths) {
  ArchSpec s;
  s.arch = "mlp:";
  for (std::size_t i = 0; i < widths.size(); ++i) s.arch += (i ? "," : "") + std::to_string(widths[i]);
  s.input = InputSpec{widths.front(), 1, 1, true};
  s.classes = widths.back();
  return s;
}

}  // namespace gsearch
