#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"

using namespace gsearch;
using oracle::random_tensor;

namespace {

double ce(std::vector<double> logits, int label) {
  Tape<double> tape(false);
  const auto k = logits.size();
  std::vector<int> labels{label};
  return ce_loss(tape, Tensor<double>(Shape{1, k}, std::move(logits)), std::span<const int>(labels)).item();
}

double kd(std::vector<double> student, std::vector<double> teacher, double tau) {
  Tape<double> tape(false);
  const auto k = student.size();
  return kd_loss(tape, Tensor<double>(Shape{1, k}, std::move(student)), Tensor<double>(Shape{1, k}, std::move(teacher)), tau)
      .item();
}

}  // namespace

// Losses ---------------------------------------------------------------------

TEST(Losses, CrossEntropyClosedForms) {
  EXPECT_NEAR(ce({std::log(3.0), 0}, 0), -std::log(0.75), 1e-12);
  EXPECT_NEAR(ce({0, 0, 0, 0, 0}, 2), std::log(5.0), 1e-12);
  EXPECT_LT(ce({60, 0, 0}, 0), 1e-20);
}

TEST(Losses, KdClosedForms) {
  EXPECT_EQ(kd({1, -2, 0.5}, {1, -2, 0.5}, 4), 0.0);
  EXPECT_NEAR(kd({0, 0}, {50, -50}, 1), std::log(2.0), 1e-9);
}

TEST(Losses, KdIsNonNegative) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    auto s = random_tensor({4, 6}, rng, 3.0), t = random_tensor({4, 6}, rng, 3.0);
    for (auto dir : {KlDirection::teacher_leading, KlDirection::student_leading}) {
      Tape<double> tape(false);
      EXPECT_GE(kd_loss(tape, s, t, 4.0, dir).item(), 0.0);
    }
  }
}

TEST(Losses, StudentLossWithZeroLambdaIsKd) {
  std::mt19937_64 rng(2);
  auto s = random_tensor({5, 3}, rng), t = random_tensor({5, 3}, rng);
  std::vector<int> labels{0, 1, 2, 0, 1};
  LossConfig cfg;
  cfg.lambda = 0;
  Tape<double> tape(false);
  EXPECT_EQ(student_loss(tape, s, t, std::span<const int>(labels), cfg).item(), kd_loss(tape, s, t, cfg.tau).item());
}

TEST(Losses, StudentLossVanishesForPerfectCopy) {
  Tensor<double> logits(Shape{2, 3}, {80, 0, 0, 0, 80, 0});
  std::vector<int> labels{0, 1};
  Tape<double> tape(false);
  EXPECT_LT(student_loss(tape, logits, logits, std::span<const int>(labels), LossConfig{}).item(), 1e-20);
}

TEST(Losses, DefaultsAreAccepted) {
  LossConfig cfg;
  EXPECT_EQ(cfg.tau, 4.0);
  EXPECT_EQ(cfg.lambda, 0.1);
  EXPECT_NO_THROW(cfg.validate());
  cfg.variant = SearchVariant::kl0_search;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Losses, SearchLossOfFreshCopyIsZero) {
  const auto topo = build_topology("cnn:3,4", InputSpec{1, 6, 6, false}, 3);
  auto teacher = init_network<double>(topo, 1);
  auto model = attach_gates(teacher, unit_alphas(make_gate_layout(topo, GateSharing::per_connection)));
  std::mt19937_64 rng(3);
  auto x = random_tensor({4, 1, 6, 6}, rng);
  LossConfig cfg;
  cfg.lambda1 = 0;
  cfg.lambda2 = 0;
  Tape<double> tape;
  auto logits = forward(tape, model.net, x, Mode::eval, &model.gates);
  const auto r = search_loss(tape, logits, predict(teacher, x), {}, model.gates.values(), model.gates.alpha, cfg);
  EXPECT_NEAR(r.differentiable.item(), 0.0, 1e-15);
}

TEST(Losses, L1Report) {
  const std::vector<double> g{0.5, 0};
  EXPECT_DOUBLE_EQ(l1_report<double>({g}, {{1.0, 0.2}}, 1e-3), 1e-3 * 0.5);
  const std::vector<double> zeros{0, 0, 0}, ones{1, 1, 1}, half{0.5, 0.5, 0.5};
  const std::vector<std::vector<double>> alpha{{0.2, 1.0, 0.7}};
  EXPECT_EQ(l1_report<double>({zeros}, alpha, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(l1_report<double>({ones}, alpha, 0.1), 0.1 * 1.9);
  EXPECT_DOUBLE_EQ(l1_report<double>({half}, alpha, 0.1), 0.5 * l1_report<double>({ones}, alpha, 0.1));
}

TEST(Losses, Kl0AtCurrentKlZeroesFirstTerm) {
  Tensor<double> s(Shape{1, 3}, {0.3, -0.2, 1.0}), t(Shape{1, 3}, {1.0, 0.0, -1.0});
  Tape<double> tape(false);
  const double current = kd_loss(tape, s, t, 4.0).item();
  LossConfig cfg;
  cfg.variant = SearchVariant::kl0_search;
  cfg.kl0 = current;
  cfg.lambda1 = 0;
  EXPECT_NEAR(search_loss<double>(tape, s, t, {}, {}, {}, cfg).first_term, 0.0, 1e-15);
}

TEST(Losses, SearchVariantGradients) {
  for (auto variant : {SearchVariant::kd_search, SearchVariant::np_search, SearchVariant::kl0_search})
    for (auto target : {NpTarget::hard, NpTarget::soft})
      for (int s = 0; s < 5; ++s) {
        std::mt19937_64 rng(40 + s);
        auto teacher = random_tensor({6, 4}, rng, 2.0);
        LossConfig cfg;
        cfg.variant = variant;
        cfg.np_target = target;
        cfg.kl_direction = s % 2 ? KlDirection::student_leading : KlDirection::teacher_leading;
        if (variant == SearchVariant::kl0_search) cfg.kl0 = 0.05;
        cfg.lambda1 = 0.01;
        auto f = [&](Tape<double>& t, std::vector<Tensor<double>>& in) {
          return search_loss<double>(t, in[0], teacher, {in[1]}, {}, {}, cfg).differentiable;
        };
        const auto r = oracle::grad_check(f, {random_tensor({6, 4}, rng, 2.0), random_tensor({2, 3}, rng)});
        EXPECT_LT(r.max_rel, 1e-3) << to_string(variant);
      }
}

// Optimisers -----------------------------------------------------------------

namespace {

std::vector<Tensor<float>> one_param(float value, float grad) {
  Tensor<float> p(Shape{1}, value);
  p.set_requires_grad();
  p.ensure_grad();
  p.grad()[0] = grad;
  return {p};
}

}  // namespace

TEST(Optim, SgdSingleStep) {
  auto p = one_param(0, 1);
  SgdState<float> st{0.1f, 0.0f, 0.0f, {}};
  sgd_momentum_step(p, st);
  EXPECT_FLOAT_EQ(p[0][0], -0.1f);
}

TEST(Optim, SgdZeroGradientKeepsParameter) {
  auto p = one_param(0.7f, 0);
  SgdState<float> st{0.1f, 0.9f, 0.0f, {}};
  sgd_momentum_step(p, st);
  EXPECT_EQ(p[0][0], 0.7f);
}

TEST(Optim, SgdMomentumRecursion) {
  auto p = one_param(0, 1);
  SgdState<float> st{0.1f, 0.9f, 0.0f, {}};
  sgd_momentum_step(p, st);
  EXPECT_FLOAT_EQ(p[0][0], -0.1f);
  sgd_momentum_step(p, st);
  EXPECT_FLOAT_EQ(p[0][0], -0.29f);
}

TEST(Optim, SoftThreshold) {
  auto s = [](double z, double a) {
    const std::vector<double> zv{z}, av{a};
    return soft_threshold<double>(zv, av)[0];
  };
  EXPECT_DOUBLE_EQ(s(0.5, 0.1), 0.4);
  EXPECT_EQ(s(-0.05, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(s(-0.5, 0.1), -0.4);
  for (double z : {-3.0, -0.2, 0.0, 0.7, 12.0}) EXPECT_EQ(s(z, 0.0), z);
}

TEST(Optim, ApgWithoutMomentumIsProximalGradient) {
  std::vector<double> g{1.0}, grad{0.5}, thr{0.1 * 1.0};
  ApgState<double> st;
  st.eta = 0.1;
  st.mu = 0;
  apg_step<double>(g, grad, st, thr);
  EXPECT_NEAR(g[0], 0.85, 1e-15);
}

TEST(Optim, ApgFixedPoint) {
  std::vector<double> g{0.3, 0.0, 1.7}, grad{0, 0, 0}, thr{0, 0, 0};
  ApgState<double> st;
  apg_step<double>(g, grad, st, thr);
  EXPECT_EQ(g, (std::vector<double>{0.3, 0.0, 1.7}));
}

TEST(Optim, ApgClampsToNonNegative) {
  std::vector<double> g{0.01}, grad{5.0}, thr{0.0};
  ApgState<double> st;
  st.eta = 0.1;
  apg_step<double>(g, grad, st, thr);
  EXPECT_EQ(g[0], 0.0);
  st.clamp_nonnegative = false;
  std::vector<double> h{0.01};
  ApgState<double> free_state = st;
  free_state.v.clear();
  apg_step<double>(h, grad, free_state, thr);
  EXPECT_LT(h[0], 0.0);
}

TEST(Optim, ApgSolvesLassoLikeCoordinateDescent) {
  constexpr std::size_t n = 10;
  std::mt19937_64 rng(77);
  std::normal_distribution<double> nd;
  std::vector<double> a(n * n), b(n);
  for (auto& v : a) v = nd(rng);
  for (auto& v : b) v = nd(rng);
  const double lambda = 0.5;
  const auto x_star = oracle::lasso_coordinate_descent(a, b, n, n, lambda);
  double fro = 0;
  for (double v : a) fro += v * v;
  for (double mu : {0.0, 0.9}) {
    ApgState<double> st;
    st.eta = 1.0 / fro;  // |A|_F^2 bounds the Lipschitz constant of the smooth part
    st.mu = mu;
    st.clamp_nonnegative = false;
    std::vector<double> x(n, 0.0), grad(n), thr(n, st.eta * lambda);
    for (int it = 0; it < 5000; ++it) {
      std::vector<double> r(n);
      for (std::size_t i = 0; i < n; ++i) {
        r[i] = -b[i];
        for (std::size_t j = 0; j < n; ++j) r[i] += a[i * n + j] * x[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        grad[j] = 0;
        for (std::size_t i = 0; i < n; ++i) grad[j] += a[i * n + j] * r[i];
      }
      apg_step<double>(x, grad, st, thr);
    }
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(x[j], x_star[j], 1e-6) << "mu " << mu << " coordinate " << j;
  }
}

TEST(Optim, OracleSatisfiesLassoOptimality) {
  // Subgradient conditions: |A^T(Ax - b)|_j <= lambda, with equality and opposite sign on the support.
  constexpr std::size_t n = 10;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  std::vector<double> a(n * n), b(n);
  for (auto& v : a) v = nd(rng);
  for (auto& v : b) v = nd(rng);
  const double lambda = 0.8;
  const auto x = oracle::lasso_coordinate_descent(a, b, n, n, lambda);
  for (std::size_t j = 0; j < n; ++j) {
    double gj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double ri = -b[i];
      for (std::size_t k = 0; k < n; ++k) ri += a[i * n + k] * x[k];
      gj += a[i * n + j] * ri;
    }
    if (x[j] != 0)
      EXPECT_NEAR(gj, -lambda * (x[j] > 0 ? 1 : -1), 1e-9);
    else
      EXPECT_LE(std::abs(gj), lambda + 1e-9);
  }
}
