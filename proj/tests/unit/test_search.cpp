#include <gtest/gtest.h>

#include "gsearch/gsearch.hpp"

using namespace gsearch;

namespace {

const ArchSpec kToyTeacher{"cnn:8,16p,16", InputSpec{1, 16, 16, false}, 2};

Dataset toy_data(std::uint64_t seed = 1) { return gen_synthetic("blobs", 256, 2, 1.0, seed, 256); }

TrainConfig quick_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 32;
  t.schedule = Schedule{0.05, {}, 0.1};
  return t;
}

const Network<float>& toy_teacher() {
  static const Network<float> net = train_teacher(build_topology(kToyTeacher), toy_data(), quick_train(5)).first;
  return net;
}

SearchConfig toy_search(double lambda2) {
  SearchConfig s;
  s.loss.lambda2 = lambda2;
  s.flops_budget = model_flops_params(build_topology(kToyTeacher)).total_flops / 2;
  s.max_epochs = 40;
  s.batch_size = 16;
  s.schedule = Schedule{0.05, {}, 0.1};
  s.gate_lr = 1;
  return s;
}

/// Balanced one-hot dataset on flat 4-dim inputs: sample i has label i % 4 and image e_{i % 4}.
Split one_hot_split(std::size_t n, int classes) {
  Split s;
  std::vector<float> px(n * static_cast<std::size_t>(classes), 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
    s.labels.push_back(c);
    px[i * static_cast<std::size_t>(classes) + static_cast<std::size_t>(c)] = 1.0f;
  }
  s.images = Tensor<float>(Shape{n, static_cast<std::size_t>(classes), 1, 1}, std::move(px));
  return s;
}

Network<float> linear_predictor(int classes, bool identity) {
  auto net = init_network<float>(build_topology(mlp_spec({classes, classes})), 1);
  auto& last = net.layers.back();
  for (auto& w : last.weight.data()) w = 0;
  for (auto& b : last.bias.data()) b = 0;
  if (identity)
    for (int c = 0; c < classes; ++c) last.weight[static_cast<std::size_t>(c * classes + c)] = 1;
  else
    last.bias[0] = 1;
  return net;
}

}  // namespace

TEST(Search, BudgetAtTeacherFlopsStopsImmediately) {
  auto cfg = toy_search(1e-3);
  cfg.flops_budget = model_flops_params(toy_teacher().topology).total_flops;
  const auto r = run_search(toy_teacher(), toy_data(), cfg);
  EXPECT_EQ(r.epochs_to_budget, 0);
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(r.arch.removed.empty());
  EXPECT_EQ(model_flops_params(student_topology(toy_teacher().topology, r.arch).first).total_flops, cfg.flops_budget);
}

TEST(Search, BudgetAboveTeacherIsRejected) {
  auto cfg = toy_search(1e-3);
  cfg.flops_budget = model_flops_params(toy_teacher().topology).total_flops + 1;
  EXPECT_THROW(run_search(toy_teacher(), toy_data(), cfg), ConfigError);
}

TEST(Search, UnreachableBudgetReportsClosest) {
  auto cfg = toy_search(1e-3);
  cfg.max_epochs = 1;
  cfg.flops_budget = 10;
  try {
    run_search(toy_teacher(), toy_data(), cfg);
    FAIL();
  } catch (const BudgetError& e) {
    EXPECT_NE(std::string(e.what()).find("10"), std::string::npos);
  }
}

TEST(Search, ToySearchMeetsBudgetDeterministically) {
  const auto cfg = toy_search(1e-3);
  const auto a = run_search(toy_teacher(), toy_data(), cfg);
  ASSERT_GE(a.epochs_to_budget, 1);
  EXPECT_EQ(a.log.size(), static_cast<std::size_t>(a.epochs_to_budget));
  EXPECT_LE(a.log.back().effective_flops, cfg.flops_budget);
  EXPECT_LE(model_flops_params(student_topology(toy_teacher().topology, a.arch).first).total_flops, cfg.flops_budget);
  EXPECT_LT(a.log.back().open_gates, a.model.gates.layout.total());

  const auto b = run_search(toy_teacher(), toy_data(), cfg);
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(export_arch_string(toy_teacher().topology, a.arch), export_arch_string(toy_teacher().topology, b.arch));
}

TEST(Search, LoggedFlopsMatchGateSnapshots) {
  const auto cfg = toy_search(1e-3);
  const auto r = run_search(toy_teacher(), toy_data(), cfg);
  auto model = r.model;
  model.gates = model.gates.clone();
  for (auto& rec : r.log) {
    for (std::size_t v = 0; v < rec.gates.size(); ++v)
      std::copy(rec.gates[v].begin(), rec.gates[v].end(), model.gates.g[v].data().begin());
    EXPECT_EQ(effective_flops(model), rec.effective_flops) << "epoch " << rec.epoch;
  }
}

TEST(Search, ResumeMatchesUninterruptedRun) {
  const auto cfg = toy_search(1e-3);
  Checkpoint saved;
  const auto full = run_search(toy_teacher(), toy_data(), cfg, std::nullopt, [&](const SearchState& st) {
    if (st.log.size() == 2) put_search_state(saved, st);
  });
  ASSERT_GT(full.epochs_to_budget, 2);
  const auto resumed = run_search(toy_teacher(), toy_data(), cfg, get_search_state(saved));
  EXPECT_EQ(resumed.log, full.log);
  EXPECT_EQ(export_arch_string(toy_teacher().topology, resumed.arch), export_arch_string(toy_teacher().topology, full.arch));
}

TEST(Search, LargerLambda2IsNotSlower) {
  const auto slow = run_search(toy_teacher(), toy_data(), toy_search(1e-3));
  const auto fast = run_search(toy_teacher(), toy_data(), toy_search(1e-2));
  EXPECT_LE(fast.epochs_to_budget, slow.epochs_to_budget);
}

TEST(Training, KdWithoutCeApproachesTeacher) {
  LossConfig loss;
  loss.lambda = 0;
  const auto log = train_network(toy_teacher().topology, toy_data(), TrainMode::kd, &toy_teacher(), quick_train(3), loss).second;
  EXPECT_EQ(log.mode, TrainMode::kd);
  EXPECT_LT(log.train_loss.back(), log.initial_loss);
}

TEST(Training, ModeAndTeacherMustAgree) {
  const auto& topo = toy_teacher().topology;
  EXPECT_THROW(train_network(topo, toy_data(), TrainMode::kd, nullptr, quick_train(1)), ConfigError);
  EXPECT_THROW(train_network(topo, toy_data(), TrainMode::scratch, &toy_teacher(), quick_train(1)), ConfigError);
}

TEST(Training, ErrorsStayInUnitInterval) {
  const auto log = train_network(toy_teacher().topology, toy_data(2), TrainMode::scratch, nullptr, quick_train(2)).second;
  ASSERT_EQ(log.test_error.size(), 2u);
  for (double e : log.test_error) {
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 1.0);
  }
  EXPECT_EQ(log.final_test_error, log.test_error.back());
}

TEST(Evaluate, PerfectPredictorHasZeroError) {
  auto net = linear_predictor(4, true);
  EXPECT_EQ(evaluate(net, one_hot_split(40, 4)), 0.0);
}

TEST(Evaluate, ConstantPredictorOnBalancedData) {
  auto net = linear_predictor(4, false);
  EXPECT_DOUBLE_EQ(evaluate(net, one_hot_split(40, 4)), 3.0 / 4.0);
}

TEST(Evaluate, RepeatedEvaluationIsIdentical) {
  auto net = toy_teacher().clone();
  const auto data = toy_data();
  EXPECT_EQ(evaluate(net, data.test), evaluate(net, data.test));
}

TEST(UniformShrink, SmallestWidthsMeetingFloor) {
  const auto teacher_flops = model_flops_params(build_topology(kToyTeacher)).total_flops;
  for (long long floor : {teacher_flops / 5, teacher_flops / 2, teacher_flops}) {
    const auto s = uniform_shrink(kToyTeacher, floor);
    EXPECT_GE(model_flops_params(build_topology(s)).total_flops, floor) << s.arch;
  }
  const auto half = uniform_shrink(kToyTeacher, teacher_flops / 2);
  EXPECT_NE(half.arch, kToyTeacher.arch);
  EXPECT_EQ(uniform_shrink(kToyTeacher, teacher_flops).arch, kToyTeacher.arch);
}
