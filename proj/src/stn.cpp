#include "stnyolo/stn.hpp"

#include <cmath>
#include <limits>

#include "stnyolo/errors.hpp"
#include "stnyolo/ops.hpp"

namespace stnyolo {

namespace {

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

// Maps a normalized coordinate to pixel-index space (align-corners). Values
// within rounding distance of an integer snap to it so that lattice-aligned
// grids read pixels exactly instead of blending in a 1e-16 share of a
// neighbour. The rounding error of coord is amplified by (size - 1) / 2.
Real unnormalize(Real coord, int size) {
  const Real span = static_cast<Real>(size - 1);
  const Real x = (coord + 1.0) * 0.5 * span;
  const Real r = std::nearbyint(x);
  if (std::abs(x - r) <= 8.0 * std::numeric_limits<Real>::epsilon() * std::max<Real>(1.0, span)) return r;
  return x;
}

struct Corners {
  int x0, y0;
  Real wx, wy;  // weight of the x0+1 / y0+1 neighbour
};

Corners locate(Real xs, Real ys, int w, int h) {
  const Real x = unnormalize(xs, w);
  const Real y = unnormalize(ys, h);
  if (!(x > -2.0 && x < w + 1.0 && y > -2.0 && y < h + 1.0)) return {-4, -4, 0.0, 0.0};
  const Real fx = std::floor(x), fy = std::floor(y);
  return {static_cast<int>(fx), static_cast<int>(fy), x - fx, y - fy};
}

bool inside(int x, int y, int w, int h) { return x >= 0 && x < w && y >= 0 && y < h; }

}  // namespace

Real lattice_coord(int i, int size) {
  if (size == 1) return 0.0;
  const Real span = static_cast<Real>(size - 1);
  return (2.0 * static_cast<Real>(i) - span) / span;
}

Affine2x3 AffineParams::item(int n) const {
  auto d = theta.data();
  Affine2x3 m;
  for (int k = 0; k < 6; ++k) m[k] = d[static_cast<std::size_t>(n) * 6 + k];
  return m;
}

AffineParams AffineParams::constant(const std::vector<Affine2x3>& matrices) {
  if (matrices.empty()) throw ShapeError("AffineParams needs at least one matrix");
  std::vector<Real> values;
  values.reserve(matrices.size() * 6);
  for (const auto& m : matrices) values.insert(values.end(), m.begin(), m.end());
  return {Tensor::from({static_cast<int>(matrices.size()), 6}, std::move(values))};
}

AffineParams AffineParams::identity(int batch) {
  return constant(std::vector<Affine2x3>(static_cast<std::size_t>(batch), kIdentityAffine));
}

SamplingGrid generate_grid(const AffineParams& params, int out_h, int out_w) {
  const Tensor& theta = params.theta;
  if (theta.rank() != 2 || theta.dim(1) != 6) {
    throw ShapeError("theta must have shape (N, 6), got " + shape_str(theta.shape()));
  }
  if (out_h <= 0 || out_w <= 0) throw ShapeError("grid dims must be positive");
  for (Real v : theta.data()) {
    if (!std::isfinite(v)) throw ValueError("non-finite affine parameter");
  }
  const int n = theta.dim(0);
  std::vector<Real> coords(static_cast<std::size_t>(n) * out_h * out_w * 2);
  auto td = theta.data();
  std::size_t o = 0;
  for (int b = 0; b < n; ++b) {
    const Real* t = td.data() + b * 6;
    for (int i = 0; i < out_h; ++i) {
      const Real yt = lattice_coord(i, out_h);
      for (int j = 0; j < out_w; ++j) {
        const Real xt = lattice_coord(j, out_w);
        coords[o++] = t[0] * xt + t[1] * yt + t[2];
        coords[o++] = t[3] * xt + t[4] * yt + t[5];
      }
    }
  }
  ImplPtr ti = theta.impl();
  Tensor grid = Tensor::make_result({n, out_h, out_w, 2}, std::move(coords), {theta},
                                    [ti, n, out_h, out_w](const detail::TensorImpl& self) {
                                      auto& g = ti->ensure_grad();
                                      std::size_t o = 0;
                                      for (int b = 0; b < n; ++b) {
                                        Real* dt = g.data() + b * 6;
                                        for (int i = 0; i < out_h; ++i) {
                                          const Real yt = lattice_coord(i, out_h);
                                          for (int j = 0; j < out_w; ++j) {
                                            const Real xt = lattice_coord(j, out_w);
                                            const Real gx = self.grad[o++];
                                            const Real gy = self.grad[o++];
                                            dt[0] += gx * xt;
                                            dt[1] += gx * yt;
                                            dt[2] += gx;
                                            dt[3] += gy * xt;
                                            dt[4] += gy * yt;
                                            dt[5] += gy;
                                          }
                                        }
                                      }
                                    });
  return {grid, out_h, out_w};
}

Tensor sample(const Tensor& input, const SamplingGrid& grid) {
  if (input.rank() != 4) throw ShapeError("sample: input must be (N, C, H, W), got " + shape_str(input.shape()));
  const Tensor& coords = grid.coords;
  if (coords.rank() != 4 || coords.dim(3) != 2 || coords.dim(1) != grid.out_h || coords.dim(2) != grid.out_w) {
    throw ShapeError("sample: malformed grid " + shape_str(coords.shape()));
  }
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (coords.dim(0) != n) {
    throw ShapeError("sample: grid batch " + std::to_string(coords.dim(0)) + " != input batch " + std::to_string(n));
  }
  const int oh = grid.out_h, ow = grid.out_w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t oplane = static_cast<std::size_t>(oh) * ow;

  std::vector<Real> out(static_cast<std::size_t>(n) * c * oplane, 0.0);
  auto xd = input.data();
  auto gd = coords.data();
  for (int b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < oplane; ++p) {
      const std::size_t gi = (b * oplane + p) * 2;
      const Corners k = locate(gd[gi], gd[gi + 1], w, h);
      const Real w00 = (1 - k.wx) * (1 - k.wy), w01 = k.wx * (1 - k.wy);
      const Real w10 = (1 - k.wx) * k.wy, w11 = k.wx * k.wy;
      const bool in00 = inside(k.x0, k.y0, w, h), in01 = inside(k.x0 + 1, k.y0, w, h);
      const bool in10 = inside(k.x0, k.y0 + 1, w, h), in11 = inside(k.x0 + 1, k.y0 + 1, w, h);
      for (int ch = 0; ch < c; ++ch) {
        const Real* src = xd.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
        Real v = 0.0;
        // Zero-weight corners are skipped so exact lattice reads stay exact.
        if (in00 && w00 != 0.0) v += w00 * src[k.y0 * w + k.x0];
        if (in01 && w01 != 0.0) v += w01 * src[k.y0 * w + k.x0 + 1];
        if (in10 && w10 != 0.0) v += w10 * src[(k.y0 + 1) * w + k.x0];
        if (in11 && w11 != 0.0) v += w11 * src[(k.y0 + 1) * w + k.x0 + 1];
        out[(static_cast<std::size_t>(b) * c + ch) * oplane + p] = v;
      }
    }
  }

  ImplPtr xi = input.impl(), gi_impl = coords.impl();
  Tensor result = Tensor::make_result(
      {n, c, oh, ow}, std::move(out), {input, coords},
      [xi, gi_impl, n, c, h, w, plane, oplane](const detail::TensorImpl& self) {
        const auto& gd = gi_impl->data;
        const auto& xd = xi->data;
        Real* dx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
        Real* dg = gi_impl->requires_grad ? gi_impl->ensure_grad().data() : nullptr;
        const Real sx = 0.5 * static_cast<Real>(w - 1);
        const Real sy = 0.5 * static_cast<Real>(h - 1);
        for (int b = 0; b < n; ++b) {
          for (std::size_t p = 0; p < oplane; ++p) {
            const std::size_t gi = (b * oplane + p) * 2;
            const Corners k = locate(gd[gi], gd[gi + 1], w, h);
            const bool in00 = inside(k.x0, k.y0, w, h), in01 = inside(k.x0 + 1, k.y0, w, h);
            const bool in10 = inside(k.x0, k.y0 + 1, w, h), in11 = inside(k.x0 + 1, k.y0 + 1, w, h);
            Real gx = 0.0, gy = 0.0;
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
              const Real go = self.grad[(static_cast<std::size_t>(b) * c + ch) * oplane + p];
              if (go == 0.0) continue;
              const Real v00 = in00 ? xd[base + k.y0 * w + k.x0] : 0.0;
              const Real v01 = in01 ? xd[base + k.y0 * w + k.x0 + 1] : 0.0;
              const Real v10 = in10 ? xd[base + (k.y0 + 1) * w + k.x0] : 0.0;
              const Real v11 = in11 ? xd[base + (k.y0 + 1) * w + k.x0 + 1] : 0.0;
              if (dx) {
                if (in00) dx[base + k.y0 * w + k.x0] += go * (1 - k.wx) * (1 - k.wy);
                if (in01) dx[base + k.y0 * w + k.x0 + 1] += go * k.wx * (1 - k.wy);
                if (in10) dx[base + (k.y0 + 1) * w + k.x0] += go * (1 - k.wx) * k.wy;
                if (in11) dx[base + (k.y0 + 1) * w + k.x0 + 1] += go * k.wx * k.wy;
              }
              gx += go * ((v01 - v00) * (1 - k.wy) + (v11 - v10) * k.wy);
              gy += go * ((v10 - v00) * (1 - k.wx) + (v11 - v01) * k.wx);
            }
            if (dg) {
              dg[gi] += gx * sx;
              dg[gi + 1] += gy * sy;
            }
          }
        }
      });
  check_finite(result, "sample");
  return result;
}

Tensor he_normal(const Shape& shape, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<Real> dist(0.0, std::sqrt(2.0 / static_cast<Real>(fan_in)));
  std::vector<Real> values(shape_numel(shape));
  for (Real& v : values) v = dist(rng);
  return Tensor::from(shape, std::move(values), true);
}

LocalizationNet::LocalizationNet(const LocalizationConfig& config, std::mt19937_64& rng) : config_(config) {
  if (config.in_channels <= 0 || config.conv_channels <= 0 || config.kernel <= 0 || config.pool_size <= 0) {
    throw ValueError("localization config values must be positive");
  }
  const int fan_in = config.in_channels * config.kernel * config.kernel;
  conv_weight = he_normal({config.conv_channels, config.in_channels, config.kernel, config.kernel}, fan_in, rng);
  conv_bias = Tensor::zeros({config.conv_channels}, true);
  const int features = config.conv_channels * config.pool_size * config.pool_size;
  fc_weight = Tensor::zeros({6, features}, true);
  fc_bias = Tensor::from({6}, {kIdentityAffine.begin(), kIdentityAffine.end()}, true);
}

AffineParams LocalizationNet::forward(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != config_.in_channels) {
    throw ShapeError("localization expects (N, " + std::to_string(config_.in_channels) + ", H, W), got " +
                     shape_str(image.shape()));
  }
  Tensor x = ops::conv2d(image, conv_weight, conv_bias, 1, config_.kernel / 2);
  x = ops::max_pool2d(x, 2, 2);
  x = ops::relu(x);
  x = ops::adaptive_avg_pool2d(x, config_.pool_size, config_.pool_size);
  return {ops::linear(ops::flatten(x), fc_weight, fc_bias)};
}

std::vector<ParamRef> LocalizationNet::parameters(const std::string& prefix) const {
  return {{prefix + ".conv.weight", conv_weight, true},
          {prefix + ".conv.bias", conv_bias, false},
          {prefix + ".fc.weight", fc_weight, true},
          {prefix + ".fc.bias", fc_bias, false}};
}

void LocalizationNet::freeze_to(const Affine2x3& theta) {
  for (Tensor* t : {&conv_weight, &conv_bias, &fc_weight, &fc_bias}) {
    t->set_requires_grad(false);
    t->zero_grad();
  }
  for (Real& v : fc_weight.mutable_data()) v = 0.0;
  auto b = fc_bias.mutable_data();
  for (int k = 0; k < 6; ++k) b[k] = theta[k];
}

AffineParams localize(const LocalizationNet& net, const Tensor& image) { return net.forward(image); }

Tensor stn_forward(const LocalizationNet& net, const Tensor& image) { return stn_forward(net, image, nullptr); }

Tensor stn_forward(const LocalizationNet& net, const Tensor& image, AffineParams* theta_out) {
  AffineParams theta = localize(net, image);
  Tensor out = sample(image, generate_grid(theta, image.dim(2), image.dim(3)));
  if (theta_out) *theta_out = theta;
  return out;
}

}  // namespace stnyolo
