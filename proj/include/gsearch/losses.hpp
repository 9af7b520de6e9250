#pragma once

// Training and search objectives. Every loss is a single tape node whose
// value is accumulated in double and stored as a scalar tensor.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gsearch/autodiff.hpp"

namespace gsearch {

enum class SearchVariant { kd_search, np_search, kl0_search };
enum class KlDirection { teacher_leading, student_leading };
enum class NpTarget { hard, soft };

inline const char* to_string(SearchVariant v) {
  switch (v) {
    case SearchVariant::kd_search: return "kd-search";
    case SearchVariant::np_search: return "np-search";
    case SearchVariant::kl0_search: return "kl0-search";
  }
  return "?";
}

struct LossConfig {
  double tau = 4.0;
  double lambda = 0.1;     // CE weight in the student loss
  double lambda1 = 5e-5;   // squared-norm weight decay; gradient 2*lambda1*w == decay 1e-4
  double lambda2 = 1e-3;   // gate L1 strength
  SearchVariant variant = SearchVariant::kd_search;
  std::optional<double> kl0;
  KlDirection kl_direction = KlDirection::teacher_leading;
  NpTarget np_target = NpTarget::hard;

  void validate() const {
    if (!(tau > 0)) throw ConfigError("tau must be positive");
    if (lambda < 0 || lambda1 < 0 || lambda2 < 0) throw ConfigError("lambda, lambda1, lambda2 must be >= 0");
    if (variant == SearchVariant::kl0_search && !kl0) throw ConfigError("kl0-search requires kl0");
    if (variant != SearchVariant::kl0_search && kl0) throw ConfigError("kl0 is only valid with variant kl0-search");
    if (kl0 && *kl0 < 0) throw ConfigError("kl0 must be >= 0");
  }
};

/// Softened teacher distribution, stored as log-probabilities so that
/// vanishing probabilities stay finite.
struct SoftTargets {
  std::size_t batch = 0, classes = 0;
  double tau = 1.0;
  std::vector<double> log_probs;

  double prob(std::size_t i, std::size_t j) const { return std::exp(log_probs[i * classes + j]); }
  std::vector<int> argmax() const {
    std::vector<int> out(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < classes; ++j)
        if (log_probs[i * classes + j] > log_probs[i * classes + best]) best = j;
      out[i] = static_cast<int>(best);
    }
    return out;
  }
};

namespace detail {

template <typename T>
std::vector<double> log_softmax_rows(const Tensor<T>& logits, double tau) {
  if (!(tau > 0)) throw Error("softmax_temperature: tau must be positive");
  if (logits.rank() != 2) throw ShapeError("log_softmax", "expects [batch, classes], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  auto ld = logits.data();
  std::vector<double> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = ld[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max<double>(mx, ld[i * k + j]);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp((ld[i * k + j] - mx) / tau);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = (ld[i * k + j] - mx) / tau - lz;
  }
  return out;
}

}  // namespace detail

template <typename T>
SoftTargets soft_targets(const Tensor<T>& teacher_logits, double tau) {
  SoftTargets t;
  t.batch = teacher_logits.dim(0);
  t.classes = teacher_logits.dim(1);
  t.tau = tau;
  t.log_probs = detail::log_softmax_rows(teacher_logits, tau);
  return t;
}

/// Mean cross-entropy between softmax(logits / tau) and class-index labels.
template <typename T>
Tensor<T> ce_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels, double tau = 1.0) {
  auto logp = detail::log_softmax_rows(logits, tau);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n)
    throw ShapeError("ce_loss", std::to_string(labels.size()) + " labels for batch " + std::to_string(n));
  std::vector<int> lab(labels.begin(), labels.end());
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= k)
      throw Error("ce_loss: class index " + std::to_string(lab[i]) + " out of range [0," + std::to_string(k) + ")");
    acc -= logp[i * k + static_cast<std::size_t>(lab[i])];
  }
  auto out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (tape.wants({&logits})) {
    tape.record("ce_loss", {logits}, out, [logits, out, logp = std::move(logp), lab, n, k, tau]() mutable {
      if (!logits.requires_grad()) return;
      const double g = out.grad()[0] / (tau * static_cast<double>(n));
      auto gl = logits.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const double target = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
          gl[i * k + j] += static_cast<T>(g * (std::exp(logp[i * k + j]) - target));
        }
    });
  }
  return out;
}

/// Mean cross-entropy between softmax(logits / tau) and a target distribution.
template <typename T>
Tensor<T> ce_loss_soft(Tape<T>& tape, const Tensor<T>& logits, const SoftTargets& target, double tau = 1.0) {
  auto logp = detail::log_softmax_rows(logits, tau);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (target.batch != n || target.classes != k) throw ShapeError("ce_loss", "target shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < n * k; ++i) acc -= std::exp(target.log_probs[i]) * logp[i];
  auto out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (tape.wants({&logits})) {
    tape.record("ce_loss_soft", {logits}, out, [logits, out, logp = std::move(logp), target, n, k, tau]() mutable {
      if (!logits.requires_grad()) return;
      const double g = out.grad()[0] / (tau * static_cast<double>(n));
      auto gl = logits.grad();
      for (std::size_t i = 0; i < n * k; ++i)
        gl[i] += static_cast<T>(g * (std::exp(logp[i]) - std::exp(target.log_probs[i])));
    });
  }
  return out;
}

/// Per-sample KL divergence between softened student and teacher outputs, reduced as
/// mean_i KL_i, or as mean_i |KL_i - kl0| when `kl0` is given.
template <typename T>
Tensor<T> kd_loss(Tape<T>& tape, const Tensor<T>& student_logits, const SoftTargets& teacher,
                  KlDirection direction = KlDirection::teacher_leading, std::optional<double> kl0 = std::nullopt) {
  const double tau = teacher.tau;
  auto logp = detail::log_softmax_rows(student_logits, tau);
  const std::size_t n = student_logits.dim(0), k = student_logits.dim(1);
  if (teacher.batch != n || teacher.classes != k)
    throw ShapeError("kd_loss", "student " + shape_str(student_logits.shape()) + " vs teacher [" +
                                    std::to_string(teacher.batch) + "," + std::to_string(teacher.classes) + "]");
  const auto& logq = teacher.log_probs;
  std::vector<double> kl(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t idx = i * k + j;
      if (direction == KlDirection::teacher_leading)
        kl[i] += std::exp(logq[idx]) * (logq[idx] - logp[idx]);
      else
        kl[i] += std::exp(logp[idx]) * (logp[idx] - logq[idx]);
    }
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += kl0 ? std::abs(kl[i] - *kl0) : kl[i];
  auto out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (tape.wants({&student_logits})) {
    tape.record("kd_loss", {student_logits}, out,
                [student_logits, out, logp = std::move(logp), logq, kl = std::move(kl), n, k, tau, direction,
                 kl0]() mutable {
                  if (!student_logits.requires_grad()) return;
                  const double g = out.grad()[0] / (tau * static_cast<double>(n));
                  auto gl = student_logits.grad();
                  for (std::size_t i = 0; i < n; ++i) {
                    double outer = g;
                    if (kl0) {
                      const double d = kl[i] - *kl0;
                      outer *= d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                    }
                    if (outer == 0.0) continue;
                    if (direction == KlDirection::teacher_leading) {
                      for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t idx = i * k + j;
                        gl[idx] += static_cast<T>(outer * (std::exp(logp[idx]) - std::exp(logq[idx])));
                      }
                    } else {
                      double mean_d = 0;
                      for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t idx = i * k + j;
                        mean_d += std::exp(logp[idx]) * (logp[idx] - logq[idx]);
                      }
                      for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t idx = i * k + j;
                        gl[idx] += static_cast<T>(outer * std::exp(logp[idx]) * (logp[idx] - logq[idx] - mean_d));
                      }
                    }
                  }
                });
  }
  return out;
}

template <typename T>
Tensor<T> kd_loss(Tape<T>& tape, const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, double tau,
                  KlDirection direction = KlDirection::teacher_leading) {
  if (student_logits.shape() != teacher_logits.shape())
    throw ShapeError("kd_loss", shape_str(student_logits.shape()) + " vs " + shape_str(teacher_logits.shape()));
  return kd_loss(tape, student_logits, soft_targets(teacher_logits, tau), direction);
}

/// L_s = L_KD(tau) + lambda * L_CE(tau = 1).
template <typename T>
Tensor<T> student_loss(Tape<T>& tape, const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                       std::span<const int> labels, const LossConfig& cfg) {
  if (cfg.lambda < 0) throw ConfigError("lambda must be >= 0");
  auto kd = kd_loss(tape, student_logits, teacher_logits, cfg.tau, cfg.kl_direction);
  if (cfg.lambda == 0) return kd;
  auto ce = ce_loss(tape, student_logits, labels, 1.0);
  return combine(tape, {kd, ce}, {1.0, cfg.lambda});
}

/// lambda2 * sum_j alpha_j |g_j| over all gate vectors.
template <typename T>
double l1_report(const std::vector<std::span<const T>>& gates, const std::vector<std::vector<double>>& alphas,
                 double lambda2) {
  if (gates.size() != alphas.size()) throw ShapeError("l1_report", "gate/alpha vector count mismatch");
  double acc = 0;
  for (std::size_t v = 0; v < gates.size(); ++v) {
    if (gates[v].size() != alphas[v].size())
      throw ShapeError("l1_report", "gate vector " + std::to_string(v) + " has " + std::to_string(gates[v].size()) +
                                        " entries but " + std::to_string(alphas[v].size()) + " alphas");
    for (std::size_t j = 0; j < gates[v].size(); ++j) acc += alphas[v][j] * std::abs(static_cast<double>(gates[v][j]));
  }
  return lambda2 * acc;
}

template <typename T>
struct SearchLoss {
  Tensor<T> differentiable;  // first term + weight decay; the L1 term is left to the proximal step
  double first_term = 0;
  double decay_term = 0;
  double l1_term = 0;
};

/// Search objective for one batch. `teacher_logits` come from the frozen teacher;
/// `weights` are the decayed parameters; `gates`/`alphas` feed the L1 report only.
template <typename T>
SearchLoss<T> search_loss(Tape<T>& tape, const Tensor<T>& logits, const Tensor<T>& teacher_logits,
                          const std::vector<Tensor<T>>& weights, const std::vector<std::span<const T>>& gates,
                          const std::vector<std::vector<double>>& alphas, const LossConfig& cfg) {
  cfg.validate();
  Tensor<T> first;
  switch (cfg.variant) {
    case SearchVariant::kd_search:
      first = kd_loss(tape, logits, soft_targets(teacher_logits, cfg.tau), cfg.kl_direction);
      break;
    case SearchVariant::kl0_search:
      first = kd_loss(tape, logits, soft_targets(teacher_logits, cfg.tau), cfg.kl_direction, cfg.kl0);
      break;
    case SearchVariant::np_search: {
      auto targets = soft_targets(teacher_logits, 1.0);
      if (cfg.np_target == NpTarget::hard) {
        auto hard = targets.argmax();
        first = ce_loss(tape, logits, std::span<const int>(hard), 1.0);
      } else {
        first = ce_loss_soft(tape, logits, targets, 1.0);
      }
      break;
    }
  }
  SearchLoss<T> out;
  out.first_term = first.item();
  out.l1_term = l1_report(gates, alphas, cfg.lambda2);
  if (cfg.lambda1 > 0 && !weights.empty()) {
    auto decay = squared_norm(tape, weights);
    out.decay_term = cfg.lambda1 * static_cast<double>(decay.item());
    out.differentiable = combine(tape, {first, decay}, {1.0, cfg.lambda1});
  } else {
    out.differentiable = first;
  }
  return out;
}

}  // namespace gsearch
