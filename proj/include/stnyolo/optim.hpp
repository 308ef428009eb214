#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stnyolo/tensor.hpp"

namespace stnyolo {

/// A trainable tensor plus its parameter-group membership.
struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = true;  // false for biases
};

struct AdamWHyper {
  Real lr = 0.002;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 5e-4;
};

/// Per-parameter moments and the shared step counter.
struct OptimState {
  AdamWHyper hyper;
  std::int64_t step = 0;
  std::vector<std::vector<Real>> first_moment;
  std::vector<std::vector<Real>> second_moment;
};

/// Allocates zeroed moment buffers matching `params`.
OptimState make_optim_state(const std::vector<ParamRef>& params, const AdamWHyper& hyper);

/// One AdamW update with bias correction and decoupled weight decay.
/// Gradients are read, never modified. Throws ValueError when a parameter that
/// requires gradients has none, ShapeError when state and params disagree.
void adamw_step(const std::vector<ParamRef>& params, OptimState& state);

void zero_grads(const std::vector<ParamRef>& params);

}  // namespace stnyolo
