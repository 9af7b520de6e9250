#pragma once

// Independent reference computations shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "gsearch/gsearch.hpp"

namespace gsearch::oracle {

/// sum(x * r) as a tape node, used to reduce a tensor output to a scalar.
inline Tensor<double> project(Tape<double>& tape, const Tensor<double>& x, const std::vector<double>& r) {
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * r[i];
  auto out = Tensor<double>::scalar(acc);
  if (tape.wants({&x}))
    tape.record("project", {x}, out, [x, out, r]() {
      if (!x.requires_grad()) return;
      auto g = x.grad();
      for (std::size_t i = 0; i < r.size(); ++i) g[i] += out.grad()[0] * r[i];
    });
  return out;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

struct GradCheck {
  double max_rel = 0;
  double max_abs = 0;
  std::size_t checked = 0;
};

/// Relative error of one entry. Entries whose gradients are both below `floor` are
/// compared on the absolute scale `floor`.
inline double rel_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences on every
/// entry of every input. `f` must rebuild its graph from the current input values.
inline GradCheck grad_check(const std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)>& f,
                            std::vector<Tensor<double>> inputs, double h = 1e-5, double floor = 1e-6) {
  for (auto& t : inputs) t.set_requires_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    auto loss = f(tape, inputs);
    tape.backward(loss);
    for (auto& t : inputs) {
      t.ensure_grad();
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    }
  }
  auto value = [&] {
    Tape<double> tape(false);
    return static_cast<double>(f(tape, inputs).item());
  };
  GradCheck r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto d = inputs[k].data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x0 = d[i];
      d[i] = x0 + h;
      const double up = value();
      d[i] = x0 - h;
      const double down = value();
      d[i] = x0;
      const double numeric = (up - down) / (2 * h);
      r.max_rel = std::max(r.max_rel, rel_error(analytic[k][i], numeric, floor));
      r.max_abs = std::max(r.max_abs, std::abs(analytic[k][i] - numeric));
      ++r.checked;
    }
  }
  return r;
}

/// 0.5 * |Ax - b|^2 + lambda * |x|_1 solved by cyclic coordinate descent to a fixed point.
inline std::vector<double> lasso_coordinate_descent(const std::vector<double>& a, const std::vector<double>& b,
                                                    std::size_t rows, std::size_t cols, double lambda) {
  std::vector<double> x(cols, 0.0), r = b;
  std::vector<double> col_sq(cols, 0.0);
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t i = 0; i < rows; ++i) col_sq[j] += a[i * cols + j] * a[i * cols + j];
  for (int sweep = 0; sweep < 1000000; ++sweep) {
    double change = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      double rho = 0;
      for (std::size_t i = 0; i < rows; ++i) rho += a[i * cols + j] * (r[i] + a[i * cols + j] * x[j]);
      const double nx = (rho > lambda ? rho - lambda : (rho < -lambda ? rho + lambda : 0.0)) / col_sq[j];
      const double dx = nx - x[j];
      if (dx != 0)
        for (std::size_t i = 0; i < rows; ++i) r[i] -= a[i * cols + j] * dx;
      x[j] = nx;
      change = std::max(change, std::abs(dx));
    }
    if (change < 1e-15) break;
  }
  return x;
}

/// Average ranks, ties sharing the mean of their positions.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) out[idx[k]] = r;
    i = j + 1;
  }
  return out;
}

/// Spearman correlation: Pearson correlation of the average ranks. Zero when either side is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace gsearch::oracle
