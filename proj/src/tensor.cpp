#include "cmseg/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace cmseg {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

Tensor::Tensor(Shape shape, double fill) {
  impl_ = std::make_shared<detail::Node>();
  impl_->shape = std::move(shape);
  impl_->value.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  CMSEG_CHECK_INPUT(shape_numel(shape) == static_cast<int64_t>(values.size()),
                    "tensor data size does not match shape " + shape_str(shape));
  impl_ = std::make_shared<detail::Node>();
  impl_->shape = std::move(shape);
  impl_->value = std::move(values);
}

double Tensor::item() const {
  CMSEG_CHECK_USAGE(numel() == 1, "item() on non-scalar tensor");
  return impl_->value[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  CMSEG_CHECK_USAGE(idx.size() == impl_->shape.size(), "at(): rank mismatch");
  int64_t off = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    off = off * impl_->shape[i] + v;
    ++i;
  }
  return impl_->value[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on) impl_->ensure_grad();
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  const_cast<detail::Node*>(impl_.get())->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  Tensor t(impl_->shape, impl_->value);
  return t;
}

Tensor Tensor::clone() const { return detach(); }

bool Tensor::all_finite() const {
  for (double v : impl_->value)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::backward() {
  CMSEG_CHECK_USAGE(numel() == 1, "backward() must start from a scalar");
  CMSEG_CHECK_USAGE(impl_->requires_grad,
                    "backward() on a tensor with no graph");
  // Topological order by DFS.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.push_back({impl_.get(), 0});
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // `order` is children-after-parents reversed; walk from the end (root last
  // in DFS postorder means root is at the back).
  impl_->ensure_grad();
  impl_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

Tensor make_op(Shape shape, std::vector<double> value,
               const std::vector<Tensor>& parents,
               std::function<void(detail::Node&)> backward) {
  Tensor out(std::move(shape), std::move(value));
  if (!GradMode::enabled()) return out;
  bool needs = false;
  for (const auto& p : parents)
    if (p.defined() && p.requires_grad()) needs = true;
  if (!needs) return out;
  auto node = out.node();
  node->requires_grad = true;
  for (const auto& p : parents)
    if (p.defined()) node->parents.push_back(p.node());
  node->backward = std::move(backward);
  return out;
}

}  // namespace cmseg
