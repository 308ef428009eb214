#pragma once

#include <array>
#include <string>
#include <vector>

#include "stnyolo/tensor.hpp"

namespace stnyolo {

struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<Real> values;  // row-major, in [0, 1]
  std::string layer;
  bool degenerate = false;   // all-zero or constant projection

  Real at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
};

struct PrincipalComponent {
  std::vector<Real> direction;  // unit vector over the HW pixel columns
  std::vector<Real> scores;     // same direction before normalization (M^T u on the C x C path)
  Real eigenvalue = 0.0;        // of M^T M
  int iterations = 0;
  Real residual = 0.0;          // |M^T M v - lambda v| / lambda
};

/// Leading right singular vector of the C x N matrix `m` (row-major) by power
/// iteration on the smaller Gram matrix. Sign is fixed so the entry of largest
/// magnitude is positive.
PrincipalComponent principal_direction(const std::vector<Real>& m, int rows, int cols, int max_iter = 500,
                                       Real tol = 1e-10);

/// EigenCAM of one image's activations (1, C, H, W): the first principal
/// component over pixel columns, min-max normalized to [0, 1]. All-zero input
/// gives an all-zero map flagged as degenerate.
Heatmap eigencam(const Tensor& activations, const std::string& layer = "");

/// Bilinear (align-corners) resize of a heatmap.
Heatmap upsample(const Heatmap& h, int out_h, int out_w);

/// Piecewise-linear jet colormap, v in [0, 1] -> RGB in [0, 1].
std::array<Real, 3> jet(Real v);

/// Blends the colorized heatmap over the grayscale version of `image`
/// (1, 3, H, W): out = gray * (1 - a h) + a h jet(h), a = alpha.
Tensor overlay(const Heatmap& h, const Tensor& image, Real alpha = 0.5);

}  // namespace stnyolo
