#include "stnyolo/optim.hpp"

#include <cmath>

#include "stnyolo/errors.hpp"

namespace stnyolo {

OptimState make_optim_state(const std::vector<ParamRef>& params, const AdamWHyper& hyper) {
  OptimState state;
  state.hyper = hyper;
  for (const ParamRef& p : params) {
    state.first_moment.emplace_back(p.tensor.numel(), 0.0);
    state.second_moment.emplace_back(p.tensor.numel(), 0.0);
  }
  return state;
}

void adamw_step(const std::vector<ParamRef>& params, OptimState& state) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ShapeError("optimizer state has " + std::to_string(state.first_moment.size()) +
                     " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params[i].tensor;
    if (state.first_moment[i].size() != t.numel() || state.second_moment[i].size() != t.numel()) {
      throw ShapeError("optimizer moment buffer does not match parameter " + params[i].name);
    }
    if (t.requires_grad() && !t.has_grad()) throw ValueError("missing gradient for parameter " + params[i].name);
  }

  const AdamWHyper& h = state.hyper;
  state.step += 1;
  const Real bc1 = 1.0 - std::pow(h.beta1, static_cast<Real>(state.step));
  const Real bc2 = 1.0 - std::pow(h.beta2, static_cast<Real>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    if (!t.requires_grad()) continue;
    auto value = t.mutable_data();
    auto grad = t.grad_view();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const Real decay = params[i].decay ? h.weight_decay : 0.0;
    for (std::size_t k = 0; k < value.size(); ++k) {
      value[k] -= h.lr * decay * value[k];
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * grad[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * grad[k] * grad[k];
      const Real m_hat = m[k] / bc1;
      const Real v_hat = v[k] / bc2;
      value[k] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

void zero_grads(const std::vector<ParamRef>& params) {
  for (const ParamRef& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace stnyolo
