#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"

using namespace gsearch;
using oracle::grad_check;
using oracle::random_tensor;

namespace {

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Tensor, SharesStorageUntilCloned) {
  Tensor<float> a(Shape{2, 2}, 1.0f);
  Tensor<float> b = a;
  Tensor<float> c = a.clone();
  b[0] = 5;
  EXPECT_EQ(a[0], 5);
  EXPECT_EQ(c[0], 1);
}

TEST(Tensor, RejectsValueCountMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
}

TEST(Autodiff, ReluForward) {
  Tape<double> tape;
  auto y = relu(tape, Tensor<double>(Shape{3}, {-1, 0, 2}));
  EXPECT_EQ(values(y), (std::vector<double>{0, 0, 2}));
}

TEST(Autodiff, ChannelScaleZeroesClosedChannel) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({1, 3, 2, 2}, rng);
  Tape<double> tape;
  auto y = channel_scale(tape, x, Tensor<double>(Shape{3}, {1, 0, 1}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(y[i], x[i]);
    EXPECT_EQ(y[4 + i], 0.0);
    EXPECT_EQ(y[8 + i], x[8 + i]);
  }
}

TEST(Autodiff, ConvOfOnesSumsWindow) {
  Tape<double> tape;
  auto y = conv2d(tape, Tensor<double>(Shape{1, 1, 4, 4}, 1.0), Tensor<double>(Shape{1, 1, 3, 3}, 1.0), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.data()) EXPECT_EQ(v, 9.0);
}

TEST(Autodiff, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 6, 5}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      Tape<double> tape;
      auto y = conv2d(tape, x, w, stride, pad);
      const std::size_t oh = (6 + 2 * pad - 3) / stride + 1, ow = (5 + 2 * pad - 3) / stride + 1;
      ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              double acc = 0;
              for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t ki = 0; ki < 3; ++ki)
                  for (std::size_t kj = 0; kj < 3; ++kj) {
                    const long r = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                    const long s = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                    if (r < 0 || s < 0 || r >= 6 || s >= 5) continue;
                    acc += x[((n * 3 + c) * 6 + static_cast<std::size_t>(r)) * 5 + static_cast<std::size_t>(s)] *
                           w[((o * 3 + c) * 3 + ki) * 3 + kj];
                  }
              EXPECT_NEAR(y[((n * 4 + o) * oh + i) * ow + j], acc, 1e-12);
            }
    }
}

TEST(Autodiff, SumGradientIsOnes) {
  Tensor<double> x(Shape{3}, {0.5, -2, 7});
  x.set_requires_grad();
  Tape<double> tape;
  auto loss = sum(tape, x);
  tape.backward(loss);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
}

TEST(Autodiff, ChannelScaleGateGradientIsChannelSum) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  Tensor<double> g(Shape{3}, {0.3, 1.2, -0.7});
  g.set_requires_grad();
  Tape<double> tape;
  auto loss = sum(tape, channel_scale(tape, x, g));
  tape.backward(loss);
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 4; ++i) s += x[(n * 3 + k) * 4 + i];
    EXPECT_NEAR(g.grad()[k], s, 1e-12);
  }
}

TEST(Autodiff, SoftmaxClosedForms) {
  auto p = softmax_rows(Tensor<double>(Shape{1, 2}, {0, 0}), 3.0);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  p = softmax_rows(Tensor<double>(Shape{1, 2}, {std::log(3.0), 0}), 1.0);
  EXPECT_NEAR(p[0], 0.75, 1e-12);
  EXPECT_NEAR(p[1], 0.25, 1e-12);
  p = softmax_rows(Tensor<double>(Shape{1, 2}, {10, 0}), 1e6);
  EXPECT_NEAR(p[0], 0.5, 1e-5);
  EXPECT_NEAR(p[1], 0.5, 1e-5);
}

TEST(Autodiff, ShapeMismatchNamesPrimitive) {
  Tape<double> tape;
  try {
    matmul(tape, Tensor<double>(Shape{2, 3}), Tensor<double>(Shape{4, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
}

TEST(Autodiff, UnknownPrimitiveIsAnError) { EXPECT_THROW(parse_primitive("softplus"), UnknownPrimitiveError); }

TEST(Autodiff, PrimitiveDispatchMatchesTypedCall) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  Tape<double> tape;
  auto a = primitive_apply(tape, parse_primitive("avg_pool2d"), {x}, {});
  auto b = avg_pool2d(tape, x, 2);
  EXPECT_EQ(values(a), values(b));
}

// Finite-difference checks -------------------------------------------------

TEST(GradCheck, LinearLayer) {
  for (int s = 0; s < 5; ++s) {
    std::mt19937_64 rng(10 + s);
    std::vector<double> r(4 * 3);
    for (auto& v : r) v = std::normal_distribution<double>()(rng);
    auto f = [&](Tape<double>& t, std::vector<Tensor<double>>& in) {
      return oracle::project(t, add_bias(t, matmul(t, in[0], in[1]), in[2]), r);
    };
    const auto res = grad_check(f, {random_tensor({4, 5}, rng), random_tensor({5, 3}, rng), random_tensor({3}, rng)}, 1e-3);
    EXPECT_LT(res.max_rel, 1e-6);
  }
}

TEST(GradCheck, ConvReluPool) {
  for (int s = 0; s < 5; ++s) {
    std::mt19937_64 rng(20 + s);
    std::vector<double> r(2 * 4 * 2 * 2);
    for (auto& v : r) v = std::normal_distribution<double>()(rng);
    auto f = [&](Tape<double>& t, std::vector<Tensor<double>>& in) {
      return oracle::project(t, avg_pool2d(t, relu(t, conv2d(t, in[0], in[1], 1, 1)), 2), r);
    };
    const auto res = grad_check(f, {random_tensor({2, 3, 4, 4}, rng), random_tensor({4, 3, 3, 3}, rng)});
    EXPECT_LT(res.max_rel, 1e-3);
  }
}

TEST(GradCheck, BatchNormTrainMode) {
  for (int s = 0; s < 5; ++s) {
    std::mt19937_64 rng(30 + s);
    std::vector<double> r(5 * 3 * 2 * 2);
    for (auto& v : r) v = std::normal_distribution<double>()(rng);
    auto f = [&](Tape<double>& t, std::vector<Tensor<double>>& in) {
      return oracle::project(
          t, batch_norm(t, in[0], in[1], in[2], Tensor<double>(Shape{3}, 0.0), Tensor<double>(Shape{3}, 1.0), Mode::train),
          r);
    };
    const auto res = grad_check(f, {random_tensor({5, 3, 2, 2}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
    EXPECT_LT(res.max_rel, 1e-3);
  }
}

TEST(GradCheck, FiveLayerCnnAllParameters) {
  // conv-BN-ReLU x4 with pooling, then the classifier; gates on every hidden connection.
  const auto topo = build_topology("cnn:3,4p,4,3", InputSpec{2, 6, 6, false}, 3);
  ASSERT_EQ(topo.size(), 5);
  auto net = init_network<double>(topo, 9);
  auto model = attach_gates(net, unit_alphas(make_gate_layout(topo, GateSharing::per_connection)));
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& g : model.gates.g)
    for (auto& v : g.data()) v = u(rng);
  auto x = random_tensor({4, 2, 6, 6}, rng);
  std::vector<int> labels{0, 1, 2, 1};

  std::vector<Tensor<double>> params = model.net.parameters();
  for (auto& g : model.gates.g) params.push_back(g);
  auto f = [&](Tape<double>& t, std::vector<Tensor<double>>&) {
    return ce_loss(t, gated_forward(t, model, x, Mode::train), std::span<const int>(labels));
  };
  // grad_check perturbs the handles in place, so the closure sees every change.
  const auto res = grad_check(f, params, 1e-5, 1e-6);
  EXPECT_LT(res.max_rel, 1e-3);
  EXPECT_GT(res.checked, 200u);
}
