#pragma once

#include <random>
#include <string>
#include <vector>

#include "stnyolo/affine.hpp"
#include "stnyolo/optim.hpp"
#include "stnyolo/tensor.hpp"

namespace stnyolo {

/// Six affine coefficients per batch item, tensor shape (N, 6), ordered
/// (t11, t12, t13, t21, t22, t23). Source = A * (target_x, target_y, 1).
struct AffineParams {
  Tensor theta;

  int batch() const { return theta.dim(0); }
  Affine2x3 item(int n) const;

  /// Constant (non-trainable) parameters, one matrix per batch item.
  static AffineParams constant(const std::vector<Affine2x3>& matrices);
  static AffineParams identity(int batch);
};

/// Normalized target coordinate of lattice index `i` along an axis of `size`
/// samples: -1 and +1 are the centres of the first and last pixels. A single
/// sample sits at 0.
Real lattice_coord(int i, int size);

/// Per-output-pixel source coordinates, tensor shape (N, H', W', 2) holding
/// (x_s, y_s) in the normalized [-1, 1] frame.
struct SamplingGrid {
  Tensor coords;
  int out_h = 0;
  int out_w = 0;

  int batch() const { return coords.dim(0); }
  Real target_x(int col) const { return lattice_coord(col, out_w); }
  Real target_y(int row) const { return lattice_coord(row, out_h); }
};

/// Applies the affine map to the regular target lattice. Differentiable in theta.
SamplingGrid generate_grid(const AffineParams& theta, int out_h, int out_w);

/// Bilinear read of `input` (N, C, H, W) at every grid location, identical for
/// all channels. Neighbours outside the image contribute zero. Differentiable
/// in both the input values and the grid coordinates.
Tensor sample(const Tensor& input, const SamplingGrid& grid);

struct LocalizationConfig {
  int in_channels = 3;
  int conv_channels = 8;
  int kernel = 7;
  int pool_size = 28;  // adaptive average pool output S x S

  bool operator==(const LocalizationConfig&) const = default;
};

/// Shallow localization network: conv(kxk, pad k/2) -> maxpool 2x2 -> ReLU ->
/// adaptive avg pool SxS -> flatten -> linear(C*S*S -> 6).
///
/// The regression layer starts at weight 0 and bias = identity, so a fresh net
/// returns the identity transform for every input.
class LocalizationNet {
 public:
  LocalizationNet(const LocalizationConfig& config, std::mt19937_64& rng);

  const LocalizationConfig& config() const { return config_; }
  AffineParams forward(const Tensor& image) const;
  std::vector<ParamRef> parameters(const std::string& prefix = "stn") const;

  /// Pins the output to `theta` regardless of input and stops all gradients.
  void freeze_to(const Affine2x3& theta);

  Tensor conv_weight, conv_bias, fc_weight, fc_bias;

 private:
  LocalizationConfig config_;
};

AffineParams localize(const LocalizationNet& net, const Tensor& image);

/// sample(image, generate_grid(localize(net, image), H, W)).
Tensor stn_forward(const LocalizationNet& net, const Tensor& image);

/// Same as stn_forward but also returns the predicted transform.
Tensor stn_forward(const LocalizationNet& net, const Tensor& image, AffineParams* theta_out);

/// He-style (fan-in) normal initialization shared by every conv/linear layer.
Tensor he_normal(const Shape& shape, int fan_in, std::mt19937_64& rng);

}  // namespace stnyolo
