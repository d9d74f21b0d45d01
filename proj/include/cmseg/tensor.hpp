#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "cmseg/common.hpp"

namespace cmseg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

namespace detail {

// One value in the computation graph. Gradients accumulate into `grad`
// during Tensor::backward(); `backward` pushes this node's grad to parents.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Whether newly created ops record the graph. Off inside NoGradGuard.
struct GradMode {
  static bool enabled();
  static void set(bool on);
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major double tensor with reverse-mode autograd.
// Copying a Tensor copies the handle, not the storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->value.size()); }

  double* data() { return impl_->value.data(); }
  const double* data() const { return impl_->value.data(); }
  std::vector<double>& values() { return impl_->value; }
  const std::vector<double>& values() const { return impl_->value; }

  double item() const;
  double at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  // Gradient of the last backward() w.r.t. this tensor. Only meaningful for
  // leaves (or any node that had requires_grad).
  const std::vector<double>& grad() const;
  void zero_grad();

  // Reverse-mode pass from a scalar.
  void backward();

  Tensor detach() const;
  Tensor clone() const;

  bool all_finite() const;

  std::shared_ptr<detail::Node> node() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : impl_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> impl_;
};

// Op helper: wires parents/backward only when grad mode is on and some
// parent requires grad.
Tensor make_op(Shape shape, std::vector<double> value,
               const std::vector<Tensor>& parents,
               std::function<void(detail::Node&)> backward);

}  // namespace cmseg
