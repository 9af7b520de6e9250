#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gsearch/error.hpp"

namespace gsearch {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
/// The shape is fixed at construction. The gradient slot is allocated on demand.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) {
    check_shape(shape);
    const std::size_t n = shape_size(shape);
    impl_ = std::make_shared<Storage>(std::move(shape), std::vector<T>(n, fill));
  }

  Tensor(Shape shape, std::vector<T> values) {
    check_shape(shape);
    if (shape_size(shape) != values.size())
      throw ShapeError("tensor", shape_str(shape) + " needs " + std::to_string(shape_size(shape)) +
                                     " values, got " + std::to_string(values.size()));
    impl_ = std::make_shared<Storage>(std::move(shape), std::move(values));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const { return impl_->data.at(0); }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  void ensure_grad() {
    if (!has_grad()) impl_->grad.assign(impl_->data.size(), T{0});
  }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), T{0}); }
  void drop_grad() { impl_->grad.clear(); }
  // Handles share storage, so the gradient slot stays writable through a const handle.
  std::span<T> grad() const { return impl_->grad; }

  Tensor clone() const {
    Tensor t(impl_->shape, impl_->data);
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  /// Identity of the underlying storage; used by the tape.
  const void* id() const { return impl_.get(); }

 private:
  struct Storage {
    Storage(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {}
    const Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor", "empty shape");
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor", "zero extent in " + shape_str(shape));
  }

  std::shared_ptr<Storage> impl_;
};

}  // namespace gsearch
