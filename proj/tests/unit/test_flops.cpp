#include <gtest/gtest.h>

#include "support/oracles.hpp"

using namespace gsearch;

namespace {

/// Counts scalar multiplies of a direct convolution loop.
long long brute_force_conv_macs(int cin, int cout, int h, int w, int k, int pad) {
  long long macs = 0;
  const int oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        for (int c = 0; c < cin; ++c)
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) ++macs;
  return macs;
}

/// Effective FLOPs after physically extracting the student for `mask`.
long long extracted_flops(const TopologyGraph& g, const ChannelMask& mask, FlopsConvention conv) {
  const auto arch = architecture_from_mask(g, mask);
  return model_flops_params(student_topology(g, arch).first, nullptr, conv).total_flops;
}

}  // namespace

TEST(Flops, LinearLayerCount) {
  const auto g = build_topology(mlp_spec({4, 3}));
  const auto r = model_flops_params(g, nullptr, FlopsConvention::mac_as_one);
  EXPECT_EQ(r.total_flops, 12);
  EXPECT_EQ(r.total_params, 15);
  EXPECT_EQ(model_flops_params(g, nullptr, FlopsConvention::mac_as_two).total_flops, 24);
}

TEST(Flops, DenseNetAnchor) {
  const auto g = build_topology("dense:100,12", InputSpec{3, 32, 32, false}, 10);
  const auto r = model_flops_params(g);
  EXPECT_NEAR(static_cast<double>(r.total_params), 0.8e6, 0.05 * 0.8e6);
  EXPECT_NEAR(static_cast<double>(r.total_flops), 296e6, 0.10 * 296e6);
}

TEST(Flops, ConvMacsMatchBruteForce) {
  // 3x3 conv, 2 -> 4 channels, 8x8 output (padding 1 on an 8x8 input).
  const auto g = build_topology("cnn:2,4", InputSpec{1, 8, 8, false}, 2);
  const auto r = model_flops_params(g, nullptr, FlopsConvention::mac_as_one);
  EXPECT_EQ(r.layers[1].flops, brute_force_conv_macs(2, 4, 8, 8, 3, 1));
  EXPECT_EQ(r.layers[1].flops, 3 * 3 * 2 * 4 * 8 * 8);
}

TEST(Flops, SavedFlopsOfLinearOutputUnit) {
  // Output unit 1 of the 4 -> 3 layer: its matrix row (2 x 4) plus its use by the 3 -> 2 classifier (2 x 2).
  const auto g = build_topology(mlp_spec({4, 3, 2}));
  const auto m = full_mask(g);
  const auto two = FlopsConvention::mac_as_two;
  EXPECT_EQ(source_channel_saved_flops(g, m, 0, 1, two), 8 + 4);
  EXPECT_EQ(channel_saved_flops(g, m, 1, 0, 1, two), 8 + 4);
  EXPECT_EQ(channel_saved_flops(g, m, 1, 0, 1, FlopsConvention::mac_as_one), 4 + 2);
}

TEST(Flops, SavedFlopsEqualRecountAfterExtraction) {
  const auto g = build_topology("cnn:4,5,3", InputSpec{1, 6, 6, false}, 3);
  const auto m = full_mask(g);
  const long long before = model_flops_params(g).total_flops;
  for (std::size_t c = 0; c < 5; ++c) {
    auto reduced = m;
    reduced[2][0][c] = 0;
    EXPECT_EQ(channel_saved_flops(g, m, 2, 0, c), before - extracted_flops(g, reduced, kDefaultConvention));
  }
}

TEST(Flops, SavedFlopsMatchRecountOnDenseLite) {
  const auto g = build_topology("dense-lite:13,4", InputSpec{3, 8, 8, false}, 5);
  const auto layout = make_gate_layout(g, GateSharing::per_connection);
  const auto r = flops_with_savings(g, layout);
  const auto m = full_mask(g);
  for (std::size_t v = 0; v < layout.vectors.size(); v += 3) {
    const auto& s = layout.vectors[v];
    auto reduced = m;
    reduced[static_cast<std::size_t>(s.layer)][static_cast<std::size_t>(s.input)][0] = 0;
    EXPECT_EQ(r.saved_flops[v][0], r.total_flops - extracted_flops(g, reduced, kDefaultConvention)) << "vector " << v;
  }
}

TEST(Flops, MoreConsumersSaveMore) {
  const auto g = build_topology("dense-lite:13,4", InputSpec{3, 8, 8, false}, 5);
  const auto m = full_mask(g);
  const auto& b = g.dense_blocks[0];
  // Dense layer 1 of block 1 feeds dense layers 2, 3 and the transition.
  const int src = b.output_layers[0];
  const long long three = source_channel_saved_flops(g, m, src, 0);
  auto one_consumer = m;
  for (int l : {b.entry_layers[2], b.consumer_after})
    for (std::size_t j = 0; j < g.layer(l).inputs.size(); ++j)
      if (g.layer(l).inputs[j].source == src) one_consumer[static_cast<std::size_t>(l)][j][0] = 0;
  EXPECT_GT(three, source_channel_saved_flops(g, one_consumer, src, 0));
}

TEST(Flops, AlphaWeights) {
  FlopsReport equal;
  equal.saved_flops = {{7, 7}, {7}};
  for (auto& v : alpha_weights(equal))
    for (double a : v) EXPECT_EQ(a, 1.0);
  FlopsReport uneven;
  uneven.saved_flops = {{3, 12}, {6}};
  const auto a = alpha_weights(uneven);
  EXPECT_EQ(a[0][1], 1.0);
  EXPECT_EQ(a[0][0], 0.25);
  EXPECT_EQ(a[1][0], 0.5);
}

TEST(Flops, AlphaOrderingFollowsSavedFlops) {
  const auto g = build_topology("cnn:4,6p,5", InputSpec{1, 8, 8, false}, 3);
  const auto layout = make_gate_layout(g, GateSharing::per_connection);
  const auto alphas = alpha_weights(flops_with_savings(g, layout));
  const auto m = full_mask(g);
  std::vector<std::pair<long long, double>> pairs;
  for (std::size_t v = 0; v < layout.vectors.size(); ++v) {
    const auto& s = layout.vectors[v];
    for (int c = 0; c < s.channels; ++c)
      pairs.emplace_back(channel_saved_flops(g, m, s.layer, static_cast<std::size_t>(s.input), static_cast<std::size_t>(c)),
                         alphas[v][static_cast<std::size_t>(c)]);
  }
  for (auto& a : pairs)
    for (auto& b : pairs)
      if (a.first < b.first) EXPECT_LT(a.second, b.second);
}

TEST(Flops, EffectiveFlopsCountOpenGatesOnly) {
  const auto g = build_topology("cnn:4,5,3", InputSpec{1, 6, 6, false}, 3);
  auto model = attach_gates(init_network<float>(g, 1), unit_alphas(make_gate_layout(g, GateSharing::per_connection)));
  const long long full = effective_flops(model);
  EXPECT_EQ(full, model_flops_params(g).total_flops);
  model.gates.g[static_cast<std::size_t>(model.gates.layout.slot[2][0])][1] = 0;
  EXPECT_EQ(full - effective_flops(model), channel_saved_flops(g, full_mask(g), 2, 0, 1));
}
