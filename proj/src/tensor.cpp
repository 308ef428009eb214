#include "stnyolo/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "stnyolo/errors.hpp"

namespace stnyolo {

namespace {
std::atomic<bool> g_finite_check{false};

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
  }
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive: " + shape_str(shape));
  }
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::vector<Real>& detail::TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, Real value, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->data.assign(shape_numel(shape), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(const Shape& shape, std::vector<Real> values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ShapeError("undefined tensor");
  return impl_->shape;
}

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis out of range for shape " + shape_str(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const Real> Tensor::data() const {
  if (!impl_) throw ShapeError("undefined tensor");
  return impl_->data;
}

std::span<Real> Tensor::mutable_data() {
  if (!impl_) throw ShapeError("undefined tensor");
  return impl_->data;
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw ShapeError("undefined tensor");
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<Real> Tensor::grad() const {
  if (!impl_) throw ShapeError("undefined tensor");
  if (impl_->grad.empty()) return std::vector<Real>(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<const Real> Tensor::grad_view() const {
  if (!impl_) throw ShapeError("undefined tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::make_result(Shape shape, std::vector<Real> values, std::initializer_list<Tensor> inputs,
                           std::function<void(const detail::TensorImpl&)> fn) {
  return make_result(std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(fn));
}

Tensor Tensor::make_result(Shape shape, std::vector<Real> values, const std::vector<Tensor>& inputs,
                           std::function<void(const detail::TensorImpl&)> fn) {
  Tensor out = from(std::move(shape), std::move(values));
  bool any = false;
  for (const Tensor& in : inputs) any = any || (in.defined() && in.impl_->requires_grad);
  if (any) {
    out.impl_->requires_grad = true;
    auto node = std::make_unique<detail::Node>();
    for (const Tensor& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.impl_);
    }
    node->backward = std::move(fn);
    out.impl_->node = std::move(node);
  }
  return out;
}

void Tensor::backward() const {
  if (!impl_) throw ShapeError("backward on undefined tensor");
  if (impl_->data.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(impl_->shape));
  }
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS; reversed it is a valid backprop order.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      detail::TensorImpl* child = t->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(t);
      stack.pop_back();
    }
  }

  impl_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = *it;
    if (t->node && !t->grad.empty()) t->node->backward(*t);
  }
  // Interior buffers are not needed once consumed.
  for (detail::TensorImpl* t : order) {
    if (t->node) t->grad.clear();
  }
}

void set_finite_check(bool enabled) { g_finite_check.store(enabled); }
bool finite_check_enabled() { return g_finite_check.load(); }

void check_finite(const Tensor& t, const char* op) {
  if (!finite_check_enabled()) return;
  for (Real v : t.data()) {
    if (!std::isfinite(v)) throw ValueError(std::string("non-finite value produced by ") + op);
  }
}

}  // namespace stnyolo
