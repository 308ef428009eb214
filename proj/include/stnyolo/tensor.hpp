#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stnyolo {

using Real = double;
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

/// Backprop record attached to a non-leaf tensor. `backward` reads the
/// gradient of the owning tensor and accumulates into the inputs.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& self)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first accumulated into
  bool requires_grad = false;
  std::unique_ptr<Node> node;

  std::vector<Real>& ensure_grad();
};

}  // namespace detail

/// Dense row-major array of rank 1..4 with reverse-mode gradient tracking.
///
/// Copies share storage (handle semantics, like framework tensors). Use
/// clone() for an independent copy and detach() to cut the graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Real value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::size_t numel() const;

  std::span<const Real> data() const;
  std::span<Real> mutable_data();
  Real item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient buffer; zeros of the value shape if nothing was accumulated.
  std::vector<Real> grad() const;
  std::span<const Real> grad_view() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  /// Reverse-mode sweep from this scalar; accumulates into every reachable
  /// tensor that requires gradients.
  void backward() const;

  /// Builds a graph node. `fn` receives the output impl (holding its grad)
  /// and must accumulate into `inputs[i]->ensure_grad()` for inputs that
  /// require gradients.
  static Tensor make_result(Shape shape, std::vector<Real> values,
                            std::initializer_list<Tensor> inputs,
                            std::function<void(const detail::TensorImpl&)> fn);
  static Tensor make_result(Shape shape, std::vector<Real> values,
                            const std::vector<Tensor>& inputs,
                            std::function<void(const detail::TensorImpl&)> fn);

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// When enabled, every op checks its output for NaN/Inf and throws ValueError.
void set_finite_check(bool enabled);
bool finite_check_enabled();
void check_finite(const Tensor& t, const char* op);

}  // namespace stnyolo
