#pragma once

#include "stnyolo/tensor.hpp"

namespace stnyolo::ops {

// Elementwise / reductions. Shapes must match exactly; there is no
// broadcasting outside of bias addition inside conv2d and linear.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
/// (N, ...) -> (N, prod(...)).
Tensor flatten(const Tensor& a);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// x * sigmoid(x)
Tensor silu(const Tensor& x);
/// Softmax along `axis`; every slice along the axis sums to one.
Tensor softmax(const Tensor& x, int axis);

/// x: (N, in), weight: (out, in), bias: (out) or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// input (N, Cin, H, W), weight (Cout, Cin, kh, kw), bias (Cout) or undefined.
/// Output dims floor((H + 2p - kh) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// k x k windows; the gradient goes to the first (row-major) maximum.
Tensor max_pool2d(const Tensor& input, int k, int stride);

/// Cell (i, j) averages rows [floor(i*H/oh), ceil((i+1)*H/oh)) and the
/// analogous column range.
Tensor adaptive_avg_pool2d(const Tensor& input, int out_h, int out_w);

}  // namespace stnyolo::ops
