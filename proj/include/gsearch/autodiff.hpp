#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every primitive takes a Tape and records a node holding the closure that
// computes its vector-Jacobian product. Nodes are only recorded when at least
// one input requires a gradient, so inference passes stay cheap.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "gsearch/error.hpp"
#include "gsearch/tensor.hpp"

namespace gsearch {

enum class Mode { train, eval };

template <typename T>
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<const void*> inputs;
    const void* output;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  /// True when the op producing an output from `inputs` must be recorded.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (auto* t : inputs)
      if (t->defined() && t->requires_grad()) return true;
    return false;
  }
  bool wants(const std::vector<Tensor<T>>& inputs) const {
    if (!recording_) return false;
    for (auto& t : inputs)
      if (t.requires_grad()) return true;
    return false;
  }

  void record(std::string op, const std::vector<Tensor<T>>& inputs, Tensor<T>& output,
              std::function<void()> backward) {
    output.set_requires_grad(true);
    Node node{std::move(op), {}, output.id(), std::move(backward)};
    for (auto& in : inputs) {
      node.inputs.push_back(in.id());
      if (in.requires_grad() && seen_.insert(in.id()).second) tracked_.push_back(in);
    }
    if (seen_.insert(output.id()).second) tracked_.push_back(output);
    produced_.insert(output.id());
    nodes_.push_back(std::move(node));
  }

  /// Fills grad slots of every gradient-requiring tensor on this tape with
  /// d(loss)/d(tensor). Tensors on the tape that do not reach `loss` end with zeros.
  void backward(Tensor<T>& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw Error("backward: loss must be a scalar, got shape " +
                  (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!produced_.count(loss.id())) throw Error("backward: loss was not produced on this tape");
    for (auto& t : tracked_) t.zero_grad();
    loss.grad()[0] = T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

 private:
  bool recording_;
  std::vector<Node> nodes_;
  std::vector<Tensor<T>> tracked_;
  std::unordered_set<const void*> seen_;
  std::unordered_set<const void*> produced_;
};

namespace detail {

inline std::size_t spatial(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape primitives

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > T{0} ? xd[i] : T{0};
  if (tape.wants({&x})) {
    tape.record("relu", {x}, out, [x, out]() mutable {
      if (!x.requires_grad()) return;
      auto xd = x.data();
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < xd.size(); ++i)
        if (xd[i] > T{0}) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> flatten(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("flatten", "needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  Tensor<T> out(Shape{n, x.size() / n}, std::vector<T>(x.data().begin(), x.data().end()));
  if (tape.wants({&x})) {
    tape.record("flatten", {x}, out, [x, out]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants({&x})) {
    tape.record("sum", {x}, out, [x, out]() mutable {
      if (!x.requires_grad()) return;
      const T g = out.grad()[0];
      for (auto& v : x.grad()) v += g;
    });
  }
  return out;
}

/// Weighted sum of scalars: sum_i coef_i * s_i.
template <typename T>
Tensor<T> combine(Tape<T>& tape, const std::vector<Tensor<T>>& scalars, const std::vector<double>& coef) {
  if (scalars.size() != coef.size()) throw ShapeError("combine", "coefficient count mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) throw ShapeError("combine", "non-scalar term " + shape_str(scalars[i].shape()));
    acc += coef[i] * static_cast<double>(scalars[i].item());
  }
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants(scalars)) {
    tape.record("combine", scalars, out, [scalars, coef, out]() mutable {
      const T g = out.grad()[0];
      for (std::size_t i = 0; i < scalars.size(); ++i)
        if (scalars[i].requires_grad()) scalars[i].grad()[0] += static_cast<T>(coef[i]) * g;
    });
  }
  return out;
}

/// Sum of squares over a list of tensors, accumulated in double.
template <typename T>
Tensor<T> squared_norm(Tape<T>& tape, const std::vector<Tensor<T>>& xs) {
  double acc = 0;
  for (auto& x : xs)
    for (T v : x.data()) acc += static_cast<double>(v) * v;
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants(xs)) {
    tape.record("squared_norm", xs, out, [xs, out]() mutable {
      const T g = out.grad()[0];
      for (auto& x : xs) {
        if (!x.requires_grad()) continue;
        auto xd = x.data();
        auto gx = x.grad();
        for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += T{2} * xd[i] * g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense layers

/// [N,I] x [I,O] -> [N,O]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor<T> out(Shape{n, m});
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ad[i * k + p];
      const T* brow = &bd[p * m];
      T* orow = &od[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  if (tape.wants({&a, &b})) {
    tape.record("matmul", {a, b}, out, [a, b, out, n, k, m]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto bd = b.data();
        auto ga = a.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T acc{0};
            for (std::size_t j = 0; j < m; ++j) acc += go[i * m + j] * bd[p * m + j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        auto ad = a.data();
        auto gb = b.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T av = ad[i * k + p];
            for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * go[i * m + j];
          }
      }
    });
  }
  return out;
}

/// [N,O] + [O]
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0))
    throw ShapeError("add_bias", shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  const std::size_t n = x.dim(0), m = x.dim(1);
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto bd = bias.data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) od[i * m + j] = xd[i * m + j] + bd[j];
  if (tape.wants({&x, &bias})) {
    tape.record("add_bias", {x, bias}, out, [x, bias, out, n, m]() mutable {
      auto go = out.grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < n * m; ++i) gx[i] += go[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) gb[j] += go[i * m + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, stride, pad, oh, ow;
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4)
    throw ShapeError("conv2d", "expects [N,C,H,W] input and [O,C,K,K] kernel, got " + shape_str(x) + " and " +
                                   shape_str(w));
  if (w[1] != x[1])
    throw ShapeError("conv2d", "input channels " + std::to_string(x[1]) + " vs kernel channels " + std::to_string(w[1]));
  if (w[2] != w[3] || w[2] % 2 == 0)
    throw ShapeError("conv2d", "only odd square kernels are supported, got " + shape_str(w));
  if (stride == 0) throw ShapeError("conv2d", "stride must be positive");
  const std::size_t k = w[2];
  if (x[2] + 2 * pad < k || x[3] + 2 * pad < k)
    throw ShapeError("conv2d", "kernel " + std::to_string(k) + " larger than padded input " + shape_str(x));
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], k, stride, pad, 0, 0};
  g.oh = (g.h + 2 * pad - k) / stride + 1;
  g.ow = (g.w + 2 * pad - k) / stride + 1;
  return g;
}

namespace detail {

// Output column range [lo, hi) for which input column ow*stride + kx - pad is inside [0, w).
inline void valid_range(std::size_t kx, const ConvGeometry& g, std::size_t extent, std::size_t out_extent,
                        std::size_t& lo, std::size_t& hi) {
  const long pad = static_cast<long>(g.pad), s = static_cast<long>(g.stride);
  const long off = static_cast<long>(kx) - pad;
  long l = off >= 0 ? 0 : (-off + s - 1) / s;
  long h = (static_cast<long>(extent) - 1 - off);
  h = h < 0 ? 0 : h / s + 1;
  if (h > static_cast<long>(out_extent)) h = static_cast<long>(out_extent);
  if (l > h) l = h;
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

}  // namespace detail

/// Direct 2-D convolution without bias, symmetric zero padding.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
  Tensor<T> out(Shape{g.n, g.cout, g.oh, g.ow});
  auto xd = x.data();
  auto wd = w.data();
  auto od = out.data();
  const std::size_t k = g.k, s = g.stride;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t co = 0; co < g.cout; ++co) {
      T* o = &od[((n * g.cout) + co) * g.oh * g.ow];
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const T* in = &xd[((n * g.cin) + ci) * g.h * g.w];
        const T* ker = &wd[((co * g.cin) + ci) * k * k];
        for (std::size_t ky = 0; ky < k; ++ky) {
          std::size_t ylo, yhi;
          detail::valid_range(ky, g, g.h, g.oh, ylo, yhi);
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::size_t xlo, xhi;
            detail::valid_range(kx, g, g.w, g.ow, xlo, xhi);
            const T wv = ker[ky * k + kx];
            if (xlo >= xhi) continue;
            const std::size_t col0 = xlo * s + kx - g.pad;
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const T* row = in + (oy * s + ky - g.pad) * g.w + col0;
              T* orow = o + oy * g.ow + xlo;
              for (std::size_t j = 0; j < xhi - xlo; ++j) orow[j] += wv * row[j * s];
            }
          }
        }
      }
    }
  if (tape.wants({&x, &w})) {
    tape.record("conv2d", {x, w}, out, [x, w, out, g]() mutable {
      auto go = out.grad();
      auto xd = x.data();
      auto wd = w.data();
      const bool need_x = x.requires_grad(), need_w = w.requires_grad();
      std::span<T> gx = need_x ? x.grad() : std::span<T>{};
      std::span<T> gw = need_w ? w.grad() : std::span<T>{};
      const std::size_t k = g.k, s = g.stride;
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t co = 0; co < g.cout; ++co) {
          const T* o = &go[((n * g.cout) + co) * g.oh * g.ow];
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const std::size_t in_off = ((n * g.cin) + ci) * g.h * g.w;
            const std::size_t k_off = ((co * g.cin) + ci) * k * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
              std::size_t ylo, yhi;
              detail::valid_range(ky, g, g.h, g.oh, ylo, yhi);
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t xlo, xhi;
                detail::valid_range(kx, g, g.w, g.ow, xlo, xhi);
                if (xlo >= xhi) continue;
                const T wv = wd[k_off + ky * k + kx];
                const std::size_t col0 = xlo * s + kx - g.pad;
                const std::size_t len = xhi - xlo;
                T wacc{0};
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                  const std::size_t base = in_off + (oy * s + ky - g.pad) * g.w + col0;
                  const T* orow = o + oy * g.ow + xlo;
                  if (need_x) {
                    T* grow = gx.data() + base;
                    for (std::size_t j = 0; j < len; ++j) grow[j * s] += wv * orow[j];
                  }
                  if (need_w) {
                    const T* row = xd.data() + base;
                    for (std::size_t j = 0; j < len; ++j) wacc += row[j * s] * orow[j];
                  }
                }
                if (need_w) gw[k_off + ky * k + kx] += wacc;
              }
            }
          }
        }
    });
  }
  return out;
}

/// Non-overlapping average pooling with window = stride = `window`; trailing rows/cols are dropped.
template <typename T>
Tensor<T> avg_pool2d(Tape<T>& tape, const Tensor<T>& x, std::size_t window) {
  if (x.rank() != 4 || window == 0 || x.dim(2) < window || x.dim(3) < window)
    throw ShapeError("avg_pool2d", "window " + std::to_string(window) + " on " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / window, ow = w / window;
  Tensor<T> out(Shape{n, c, oh, ow});
  auto xd = x.data();
  auto od = out.data();
  const T inv = T{1} / static_cast<T>(window * window);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc{0};
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx)
            acc += xd[p * h * w + (oy * window + dy) * w + ox * window + dx];
        od[p * oh * ow + oy * ow + ox] = acc * inv;
      }
  if (tape.wants({&x})) {
    tape.record("avg_pool2d", {x}, out, [x, out, n, c, h, w, oh, ow, window, inv]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.grad();
      auto go = out.grad();
      for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T gv = go[p * oh * ow + oy * ow + ox] * inv;
            for (std::size_t dy = 0; dy < window; ++dy)
              for (std::size_t dx = 0; dx < window; ++dx) gx[p * h * w + (oy * window + dy) * w + ox * window + dx] += gv;
          }
    });
  }
  return out;
}

/// [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool", "expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{n, c});
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc{0};
    for (std::size_t i = 0; i < hw; ++i) acc += xd[p * hw + i];
    od[p] = acc / static_cast<T>(hw);
  }
  if (tape.wants({&x})) {
    tape.record("global_avg_pool", {x}, out, [x, out, n, c, hw]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.grad();
      auto go = out.grad();
      for (std::size_t p = 0; p < n * c; ++p) {
        const T gv = go[p] / static_cast<T>(hw);
        for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += gv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel operations. Channels are dimension 1 of [N,C] or [N,C,H,W].

/// Multiplies channel c of x by g[c].
template <typename T>
Tensor<T> channel_scale(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& g) {
  if (x.rank() < 2 || g.rank() != 1 || g.dim(0) != x.dim(1))
    throw ShapeError("channel_scale", shape_str(x.shape()) + " scaled by " + shape_str(g.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = detail::spatial(x.shape());
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto gd = g.data();
  auto od = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) od[off + i] = xd[off + i] * gd[ch];
    }
  if (tape.wants({&x, &g})) {
    tape.record("channel_scale", {x, g}, out, [x, g, out, n, c, hw]() mutable {
      auto go = out.grad();
      auto xd = x.data();
      auto gd = g.data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (b * c + ch) * hw;
          if (x.requires_grad()) {
            auto gx = x.grad();
            for (std::size_t i = 0; i < hw; ++i) gx[off + i] += go[off + i] * gd[ch];
          }
          if (g.requires_grad()) {
            T acc{0};
            for (std::size_t i = 0; i < hw; ++i) acc += go[off + i] * xd[off + i];
            g.grad()[ch] += acc;
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels", "no inputs");
  const Shape& ref = parts.front().shape();
  std::size_t total = 0;
  for (auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size() && s.size() >= 2 && s[0] == ref[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == ref[i];
    if (!ok) throw ShapeError("concat_channels", shape_str(s) + " incompatible with " + shape_str(ref));
    total += s[1];
  }
  if (parts.size() == 1) return parts.front();
  const std::size_t n = ref[0], hw = detail::spatial(ref);
  Shape os = ref;
  os[1] = total;
  Tensor<T> out(os);
  auto od = out.data();
  std::size_t c0 = 0;
  for (auto& p : parts) {
    auto pd = p.data();
    const std::size_t c = p.dim(1);
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(&pd[b * c * hw], c * hw, &od[(b * total + c0) * hw]);
    c0 += c;
  }
  if (tape.wants(parts)) {
    tape.record("concat_channels", parts, out, [parts, out, n, hw, total]() mutable {
      auto go = out.grad();
      std::size_t c0 = 0;
      for (auto& p : parts) {
        const std::size_t c = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < c * hw; ++i) gp[b * c * hw + i] += go[(b * total + c0) * hw + i];
        }
        c0 += c;
      }
    });
  }
  return out;
}

/// Gathers the listed channels (in order) of x.
template <typename T>
Tensor<T> select_channels(Tape<T>& tape, const Tensor<T>& x, const std::vector<int>& channels) {
  if (x.rank() < 2 || channels.empty()) throw ShapeError("select_channels", "empty selection on " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = detail::spatial(x.shape());
  for (int ch : channels)
    if (ch < 0 || static_cast<std::size_t>(ch) >= c)
      throw ShapeError("select_channels", "channel " + std::to_string(ch) + " out of range for " + shape_str(x.shape()));
  Shape os = x.shape();
  os[1] = channels.size();
  Tensor<T> out(os);
  auto xd = x.data();
  auto od = out.data();
  const std::size_t k = channels.size();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(&xd[(b * c + static_cast<std::size_t>(channels[j])) * hw], hw, &od[(b * k + j) * hw]);
  if (tape.wants({&x})) {
    tape.record("select_channels", {x}, out, [x, out, channels, n, c, hw, k]() mutable {
      if (!x.requires_grad()) return;
      auto gx = x.grad();
      auto go = out.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t i = 0; i < hw; ++i)
            gx[(b * c + static_cast<std::size_t>(channels[j])) * hw + i] += go[(b * k + j) * hw + i];
    });
  }
  return out;
}

/// Per-channel batch normalization over N (and H, W). Train mode normalizes with batch
/// statistics and folds them into the running buffers; eval mode uses the running buffers.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T> running_mean, Tensor<T> running_var, Mode mode, double momentum = 0.9,
                     double eps = 1e-5) {
  if (x.rank() < 2) throw ShapeError("batch_norm", "expects [N,C,...], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = detail::spatial(x.shape());
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var})
    if (p->rank() != 1 || p->dim(0) != c)
      throw ShapeError("batch_norm", "parameter " + shape_str(p->shape()) + " for input " + shape_str(x.shape()));
  const std::size_t m = n * hw;
  std::vector<T> mean(c), inv_std(c);
  auto xd = x.data();
  if (mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0, s2 = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xd[(b * c + ch) * hw + i];
      const double mu = s / static_cast<double>(m);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = xd[(b * c + ch) * hw + i] - mu;
          s2 += d * d;
        }
      const double var = s2 / static_cast<double>(m);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + eps));
      running_mean[ch] = static_cast<T>(momentum * running_mean[ch] + (1 - momentum) * mu);
      running_var[ch] = static_cast<T>(momentum * running_var[ch] + (1 - momentum) * var);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps));
    }
  }
  Tensor<T> out(x.shape());
  auto od = out.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) od[off + i] = (xd[off + i] - mean[ch]) * inv_std[ch] * gd[ch] + bd[ch];
    }
  if (tape.wants({&x, &gamma, &beta})) {
    tape.record("batch_norm", {x, gamma, beta}, out,
                [x, gamma, beta, out, mean, inv_std, n, c, hw, m, mode]() mutable {
                  auto go = out.grad();
                  auto xd = x.data();
                  auto gd = gamma.data();
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    T sum_g{0}, sum_gx{0};
                    for (std::size_t b = 0; b < n; ++b)
                      for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t idx = (b * c + ch) * hw + i;
                        const T xh = (xd[idx] - mean[ch]) * inv_std[ch];
                        sum_g += go[idx];
                        sum_gx += go[idx] * xh;
                      }
                    if (gamma.requires_grad()) gamma.grad()[ch] += sum_gx;
                    if (beta.requires_grad()) beta.grad()[ch] += sum_g;
                    if (!x.requires_grad()) continue;
                    auto gx = x.grad();
                    const T scale = gd[ch] * inv_std[ch];
                    const T inv_m = T{1} / static_cast<T>(m);
                    for (std::size_t b = 0; b < n; ++b)
                      for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t idx = (b * c + ch) * hw + i;
                        if (mode == Mode::train) {
                          const T xh = (xd[idx] - mean[ch]) * inv_std[ch];
                          gx[idx] += scale * (go[idx] - sum_g * inv_m - xh * sum_gx * inv_m);
                        } else {
                          gx[idx] += scale * go[idx];
                        }
                      }
                  }
                });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax with temperature

/// Row-wise softmax(logits / tau) without recording; used for constant targets.
template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& logits, double tau) {
  if (!(tau > 0)) throw Error("softmax_temperature: tau must be positive");
  if (logits.rank() != 2) throw ShapeError("softmax_temperature", "expects [batch, classes], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> p(n * k);
  auto ld = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = ld[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max<double>(mx, ld[i * k + j]);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += p[i * k + j] = std::exp((ld[i * k + j] - mx) / tau);
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= z;
  }
  return p;
}

template <typename T>
Tensor<T> softmax_temperature(Tape<T>& tape, const Tensor<T>& logits, double tau) {
  auto p = softmax_rows(logits, tau);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = static_cast<T>(p[i]);
  if (tape.wants({&logits})) {
    tape.record("softmax_temperature", {logits}, out, [logits, out, n, k, tau]() mutable {
      if (!logits.requires_grad()) return;
      auto go = out.grad();
      auto od = out.data();
      auto gl = logits.grad();
      for (std::size_t i = 0; i < n; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < k; ++j) dot += go[i * k + j] * od[i * k + j];
        for (std::size_t j = 0; j < k; ++j)
          gl[i * k + j] += od[i * k + j] * (go[i * k + j] - dot) / static_cast<T>(tau);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generic dispatch by primitive id

enum class Primitive {
  matmul,
  add_bias,
  conv2d,
  relu,
  avg_pool2d,
  global_avg_pool,
  batch_norm,
  channel_scale,
  concat_channels,
  flatten,
  select_channels,
};

inline Primitive parse_primitive(std::string_view name) {
  static const std::pair<std::string_view, Primitive> table[] = {
      {"matmul", Primitive::matmul},
      {"add_bias", Primitive::add_bias},
      {"conv2d", Primitive::conv2d},
      {"relu", Primitive::relu},
      {"avg_pool2d", Primitive::avg_pool2d},
      {"global_avg_pool", Primitive::global_avg_pool},
      {"batch_norm", Primitive::batch_norm},
      {"channel_scale", Primitive::channel_scale},
      {"concat_channels", Primitive::concat_channels},
      {"flatten", Primitive::flatten},
      {"select_channels", Primitive::select_channels},
  };
  for (auto& [n, p] : table)
    if (n == name) return p;
  throw UnknownPrimitiveError(std::string(name));
}

struct PrimitiveParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t window = 2;
  Mode mode = Mode::train;
  std::vector<int> channels;
};

/// Applies `op` to `inputs`. Input order follows the typed functions above;
/// batch_norm takes {x, gamma, beta, running_mean, running_var}.
template <typename T>
Tensor<T> primitive_apply(Tape<T>& tape, Primitive op, const std::vector<Tensor<T>>& inputs,
                          const PrimitiveParams& params = {}) {
  auto need = [&](std::size_t k, const char* name) {
    if (inputs.size() != k)
      throw ShapeError(name, "expects " + std::to_string(k) + " inputs, got " + std::to_string(inputs.size()));
  };
  switch (op) {
    case Primitive::matmul: need(2, "matmul"); return matmul(tape, inputs[0], inputs[1]);
    case Primitive::add_bias: need(2, "add_bias"); return add_bias(tape, inputs[0], inputs[1]);
    case Primitive::conv2d: need(2, "conv2d"); return conv2d(tape, inputs[0], inputs[1], params.stride, params.pad);
    case Primitive::relu: need(1, "relu"); return relu(tape, inputs[0]);
    case Primitive::avg_pool2d: need(1, "avg_pool2d"); return avg_pool2d(tape, inputs[0], params.window);
    case Primitive::global_avg_pool: need(1, "global_avg_pool"); return global_avg_pool(tape, inputs[0]);
    case Primitive::batch_norm:
      need(5, "batch_norm");
      return batch_norm(tape, inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], params.mode);
    case Primitive::channel_scale: need(2, "channel_scale"); return channel_scale(tape, inputs[0], inputs[1]);
    case Primitive::concat_channels: return concat_channels(tape, inputs);
    case Primitive::flatten: need(1, "flatten"); return flatten(tape, inputs[0]);
    case Primitive::select_channels: need(1, "select_channels"); return select_channels(tape, inputs[0], params.channels);
  }
  throw UnknownPrimitiveError(std::to_string(static_cast<int>(op)));
}

}  // namespace gsearch
