#pragma once

// Joint weight/gate search, teacher and student training, evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gsearch/data.hpp"
#include "gsearch/extract.hpp"
#include "gsearch/flops.hpp"
#include "gsearch/losses.hpp"
#include "gsearch/network.hpp"
#include "gsearch/optim.hpp"

namespace gsearch {

/// Step schedule: lr, multiplied by `factor` at each milestone epoch (1-based epochs).
struct Schedule {
  double lr = 0.05;
  std::vector<int> milestones{30, 50};
  double factor = 0.1;

  double at(int epoch) const {
    double v = lr;
    for (int m : milestones)
      if (epoch > m) v *= factor;
    return v;
  }
  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(factor > 0)) throw ConfigError("lr_factor must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] < 1) throw ConfigError("lr_milestones must be positive");
      if (i && milestones[i] <= milestones[i - 1]) throw ConfigError("lr_milestones must be strictly increasing");
    }
  }
};

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  Schedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    schedule.validate();
  }
};

struct SearchConfig {
  LossConfig loss;
  long long flops_budget = 0;
  int max_epochs = 60;
  int batch_size = 64;
  Schedule schedule;
  double momentum = 0.9;
  double gate_lr = 0.01;
  double gate_momentum = 0.9;
  bool clamp_gates = true;
  bool weighted_alpha = true;
  GateSharing sharing = GateSharing::per_connection;
  FlopsConvention convention = kDefaultConvention;
  std::uint64_t seed = 1;

  void validate(long long teacher_flops) const {
    loss.validate();
    schedule.validate();
    if (flops_budget <= 0) throw ConfigError("flops budget must be positive");
    if (flops_budget > teacher_flops)
      throw ConfigError("flops budget " + std::to_string(flops_budget) + " exceeds the teacher's " +
                        std::to_string(teacher_flops) + " FLOPs");
    if (max_epochs < 1) throw ConfigError("search max_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(gate_lr > 0)) throw ConfigError("gate_lr must be positive");
    if (gate_momentum < 0 || gate_momentum >= 1) throw ConfigError("gate_momentum must be in [0, 1)");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  }
};

struct EpochRecord {
  int epoch = 0;
  double first_term = 0;  // batch mean of the distillation (or variant) term
  double decay_term = 0;  // batch mean of lambda1 * |w|^2
  double l1_term = 0;     // weighted L1 at epoch end
  long long effective_flops = 0;
  std::size_t open_gates = 0;
  std::size_t reopened = 0;  // gates that were 0 at the previous epoch end and are non-zero now
  std::vector<std::vector<float>> gates;

  bool operator==(const EpochRecord&) const = default;
};

struct SearchResult {
  StudentArchitecture arch;
  int epochs_to_budget = 0;
  std::vector<EpochRecord> log;
  GatedModel<float> model;
  long long teacher_flops = 0;
  long long budget = 0;
};

/// Resumable search state, as stored in checkpoints.
struct SearchState {
  GatedModel<float> model;
  SgdState<float> sgd;
  std::vector<ApgState<float>> apg;
  std::vector<EpochRecord> log;
};

enum class TrainMode { scratch, kd };

inline const char* to_string(TrainMode m) { return m == TrainMode::kd ? "kd" : "scratch"; }

struct TrainLog {
  TrainMode mode = TrainMode::scratch;
  std::vector<double> train_loss;
  std::vector<double> test_error;
  double final_test_error = 1.0;
  double initial_loss = 0;  // loss on the first batch before any update
};

// ---------------------------------------------------------------------------
// Helpers

/// Adapts an image batch to the network's declared input layout.
template <typename T>
Tensor<T> as_network_input(const Tensor<T>& images, const InputSpec& in) {
  if (!in.flat) return images;
  const std::size_t n = images.dim(0);
  return Tensor<T>(Shape{n, images.size() / n}, std::vector<T>(images.data().begin(), images.data().end()));
}

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Content hash of a network's architecture and parameters.
template <typename T>
std::string network_id(const Network<T>& net) {
  std::string bytes = net.topology.spec.to_string();
  for (auto& [name, t] : net.named_parameters()) {
    bytes += name;
    bytes.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(T));
  }
  return fnv1a_hex(bytes);
}

/// Misclassified fraction under argmax, eval mode.
inline double evaluate(Network<float>& net, const Split& split, const GateSet<float>* gates = nullptr,
                       std::size_t batch = 256) {
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(split.size(), start + batch); ++i) idx.push_back(i);
    auto x = as_network_input(make_batch<float>(split, idx), net.topology.input);
    auto logits = predict(net, x, gates);
    const std::size_t k = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* row = &logits.data()[b * k];
      const auto best = static_cast<int>(std::max_element(row, row + k) - row);
      wrong += best != split.labels[idx[b]];
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(split.size());
}

namespace detail {

inline std::vector<std::vector<float>> gate_snapshot(const GateSet<float>& gates) {
  std::vector<std::vector<float>> out;
  for (auto& g : gates.g) out.emplace_back(g.data().begin(), g.data().end());
  return out;
}

inline std::mt19937_64 batch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0xa06u};
  return std::mt19937_64(seq);
}

template <typename F>
void for_each_batch(const Dataset& data, std::uint64_t seed, int epoch, int batch_size, F&& f) {
  const auto order = epoch_order(data.train.size(), seed, epoch);
  auto rng = batch_rng(seed, epoch);
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
    auto x = make_batch<float>(data.train, idx, &data.augment, &rng);
    f(x, batch_labels(data.train, idx));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Search

/// Gate layout and alphas for a teacher: FLOPs-weighted or all ones.
inline GatedModel<float> prepare_gated_model(const Network<float>& teacher, const SearchConfig& cfg) {
  const auto layout = make_gate_layout(teacher.topology, cfg.sharing);
  const auto alphas = cfg.weighted_alpha
                          ? alpha_weights(flops_with_savings(teacher.topology, layout, nullptr, cfg.convention))
                          : unit_alphas(layout);
  return attach_gates(teacher, alphas, cfg.sharing);
}

/// Joint optimisation of weights (SGD) and gates (proximal momentum steps), stopping at the
/// first epoch boundary where the effective FLOPs meet the budget.
inline SearchResult run_search(const Network<float>& teacher_in, const Dataset& data, const SearchConfig& cfg,
                               std::optional<SearchState> resume = std::nullopt,
                               const std::function<void(const SearchState&)>& on_epoch = {}) {
  Network<float> teacher = teacher_in.clone();
  const long long teacher_flops = model_flops_params(teacher.topology, nullptr, cfg.convention).total_flops;
  cfg.validate(teacher_flops);
  data.validate();

  SearchState st;
  if (resume) {
    st = std::move(*resume);
  } else {
    st.model = prepare_gated_model(teacher, cfg);
    st.sgd = SgdState<float>{static_cast<float>(cfg.schedule.lr), static_cast<float>(cfg.momentum), 0.0f, {}};
    for (std::size_t v = 0; v < st.model.gates.g.size(); ++v)
      st.apg.push_back(ApgState<float>{{}, static_cast<float>(cfg.gate_lr), static_cast<float>(cfg.gate_momentum), 0,
                                       cfg.clamp_gates});
  }
  auto& model = st.model;
  std::vector<std::vector<float>> thresholds;
  for (auto& a : model.gates.alpha) {
    thresholds.emplace_back();
    for (double x : a) thresholds.back().push_back(static_cast<float>(cfg.gate_lr * cfg.loss.lambda2 * x));
  }

  SearchResult result;
  result.teacher_flops = teacher_flops;
  result.budget = cfg.flops_budget;
  auto finish = [&](int epoch) {
    result.epochs_to_budget = epoch;
    result.arch = extract_student(model).arch;
    result.arch.teacher_id = network_id(teacher);
    result.log = st.log;
    result.model = model;
    return result;
  };
  long long closest = effective_flops(model, cfg.convention);
  if (st.log.empty() && closest <= cfg.flops_budget) return finish(0);
  if (!st.log.empty() && st.log.back().effective_flops <= cfg.flops_budget) return finish(st.log.back().epoch);
  for (auto& r : st.log) closest = std::min(closest, r.effective_flops);

  auto params = model.net.parameters();
  for (int epoch = static_cast<int>(st.log.size()) + 1; epoch <= cfg.max_epochs; ++epoch) {
    st.sgd.lr = static_cast<float>(cfg.schedule.at(epoch));
    const auto before = detail::gate_snapshot(model.gates);
    double first = 0, decay = 0;
    int batches = 0;
    detail::for_each_batch(data, cfg.seed, epoch, cfg.batch_size, [&](const Tensor<float>& images, const std::vector<int>&) {
      auto x = as_network_input(images, teacher.topology.input);
      auto teacher_logits = predict(teacher, x);
      Tape<float> tape;
      auto logits = gated_forward(tape, model, x, Mode::train);
      auto loss = search_loss(tape, logits, teacher_logits, params, model.gates.values(), model.gates.alpha, cfg.loss);
      tape.backward(loss.differentiable);
      sgd_momentum_step(params, st.sgd);
      for (std::size_t v = 0; v < model.gates.g.size(); ++v) {
        auto& g = model.gates.g[v];
        std::span<const float> grad = g.grad();
        apg_step<float>(g.data(), grad, st.apg[v], thresholds[v]);
      }
      first += loss.first_term;
      decay += loss.decay_term;
      ++batches;
    });
    EpochRecord rec;
    rec.epoch = epoch;
    rec.first_term = first / batches;
    rec.decay_term = decay / batches;
    rec.l1_term = l1_report(model.gates.values(), model.gates.alpha, cfg.loss.lambda2);
    rec.effective_flops = effective_flops(model, cfg.convention);
    rec.open_gates = model.gates.open_count();
    rec.gates = detail::gate_snapshot(model.gates);
    for (std::size_t v = 0; v < before.size(); ++v)
      for (std::size_t j = 0; j < before[v].size(); ++j) rec.reopened += before[v][j] == 0.0f && rec.gates[v][j] != 0.0f;
    st.log.push_back(std::move(rec));
    closest = std::min(closest, st.log.back().effective_flops);
    if (on_epoch) on_epoch(st);
    if (st.log.back().effective_flops <= cfg.flops_budget) return finish(epoch);
  }
  throw BudgetError(cfg.flops_budget, closest);
}

// ---------------------------------------------------------------------------
// Training

/// Trains a freshly initialised network on `topology`. Scratch mode minimises CE;
/// KD mode minimises KD(tau) + lambda * CE against `teacher`.
inline std::pair<Network<float>, TrainLog> train_network(const TopologyGraph& topology, const Dataset& data,
                                                         TrainMode mode, const Network<float>* teacher_in,
                                                         const TrainConfig& cfg, const LossConfig& loss_cfg = {}) {
  cfg.validate();
  data.validate();
  if (mode == TrainMode::kd && !teacher_in) throw ConfigError("kd training needs a teacher");
  if (mode == TrainMode::scratch && teacher_in) throw ConfigError("scratch training takes no teacher");
  if (topology.num_classes != data.classes)
    throw ConfigError("network has " + std::to_string(topology.num_classes) + " outputs but the data has " +
                      std::to_string(data.classes) + " classes");
  std::optional<Network<float>> teacher;
  if (teacher_in) {
    teacher = teacher_in->clone();
    if (teacher->topology.num_classes != topology.num_classes) throw ConfigError("teacher and student class counts differ");
  }
  Network<float> net = init_network<float>(topology, cfg.seed);
  auto params = net.parameters();
  SgdState<float> sgd{static_cast<float>(cfg.schedule.lr), static_cast<float>(cfg.momentum),
                      static_cast<float>(cfg.weight_decay), {}};
  TrainLog log;
  log.mode = mode;
  bool first_batch = true;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    sgd.lr = static_cast<float>(cfg.schedule.at(epoch));
    double total = 0;
    int batches = 0;
    detail::for_each_batch(data, cfg.seed, epoch, cfg.batch_size, [&](const Tensor<float>& images, const std::vector<int>& labels) {
      auto x = as_network_input(images, topology.input);
      Tape<float> tape;
      auto logits = forward(tape, net, x, Mode::train);
      Tensor<float> loss = mode == TrainMode::kd
                               ? student_loss(tape, logits, predict(*teacher, x), std::span<const int>(labels), loss_cfg)
                               : ce_loss(tape, logits, std::span<const int>(labels), 1.0);
      if (first_batch) {
        log.initial_loss = loss.item();
        first_batch = false;
      }
      tape.backward(loss);
      sgd_momentum_step(params, sgd);
      total += loss.item();
      ++batches;
    });
    log.train_loss.push_back(total / batches);
    log.test_error.push_back(evaluate(net, data.test));
  }
  log.final_test_error = log.test_error.back();
  return {std::move(net), std::move(log)};
}

inline std::pair<Network<float>, TrainLog> train_teacher(const TopologyGraph& topology, const Dataset& data,
                                                         const TrainConfig& cfg) {
  return train_network(topology, data, TrainMode::scratch, nullptr, cfg);
}

/// Trains the student described by `arch` from fresh weights.
inline std::pair<Network<float>, TrainLog> train_student(const StudentArchitecture& arch, const Dataset& data,
                                                         TrainMode mode, const Network<float>* teacher,
                                                         const TrainConfig& cfg, const LossConfig& loss_cfg = {}) {
  const auto teacher_topo = build_topology(arch.teacher);
  return train_network(student_topology(teacher_topo, arch).first, data, mode, teacher, cfg, loss_cfg);
}

// ---------------------------------------------------------------------------
// Uniform shrinking baseline

namespace detail {

inline std::string scaled_arch(const std::string& arch, double s) {
  const auto colon = arch.find(':');
  const std::string kind = arch.substr(0, colon);
  auto parts = split(std::string_view(arch).substr(colon + 1), ',');
  auto scale = [&](int w) { return std::max(1, static_cast<int>(std::ceil(w * s - 1e-9))); };
  std::string out = kind + ":";
  if (kind == "cnn") {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      std::string p = parts[i];
      const bool pool = !p.empty() && p.back() == 'p';
      if (pool) p.pop_back();
      out += (i ? "," : "") + std::to_string(scale(parse_int(p, "cnn stage"))) + (pool ? "p" : "");
    }
  } else if (kind == "mlp") {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const int w = parse_int(parts[i], "mlp widths");
      out += (i ? "," : "") + std::to_string(i == 0 || i + 1 == parts.size() ? w : scale(w));
    }
  } else if (kind == "dense" || kind == "dense-lite") {
    out += parts.at(0) + "," + std::to_string(scale(parse_int(parts.at(1), "growth")));
  } else {
    throw SpecError("cannot shrink architecture '" + arch + "'");
  }
  return out;
}

}  // namespace detail

/// The teacher with every hidden width scaled by one common factor, choosing the smallest
/// factor (in steps of 0.01) whose FLOPs are at least `min_flops`.
inline ArchSpec uniform_shrink(const ArchSpec& teacher, long long min_flops,
                               FlopsConvention convention = kDefaultConvention) {
  for (int pct = 1; pct <= 100; ++pct) {
    ArchSpec s = teacher;
    s.arch = detail::scaled_arch(teacher.arch, pct / 100.0);
    if (model_flops_params(build_topology(s), nullptr, convention).total_flops >= min_flops) return s;
  }
  return teacher;
}

// ---------------------------------------------------------------------------
// Text logs

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string format_search_log(const SearchResult& r) {
  std::ostringstream os;
  os << "teacher_flops=" << r.teacher_flops << " budget=" << r.budget << "\n";
  for (auto& e : r.log)
    os << "epoch=" << e.epoch << " kl=" << format_double(e.first_term) << " decay=" << format_double(e.decay_term)
       << " l1=" << format_double(e.l1_term) << " flops=" << e.effective_flops << " open_gates=" << e.open_gates
       << " reopened=" << e.reopened << "\n";
  os << "epochs_to_budget=" << r.epochs_to_budget << "\n";
  os << "removed_connections=" << r.arch.removed.size() << "\n";
  return os.str();
}

inline std::string format_train_log(const TrainLog& log) {
  std::ostringstream os;
  os << "mode=" << to_string(log.mode) << "\n";
  for (std::size_t i = 0; i < log.train_loss.size(); ++i)
    os << "epoch=" << i + 1 << " train_loss=" << format_double(log.train_loss[i])
       << " test_error=" << format_double(log.test_error[i]) << "\n";
  os << "final_test_error=" << format_double(log.final_test_error) << "\n";
  return os.str();
}

}  // namespace gsearch
