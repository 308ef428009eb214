#include "stnyolo/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "stnyolo/errors.hpp"

namespace stnyolo::ops {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

Tensor finish(Tensor t, const char* op) {
  check_finite(t, op);
  return t;
}

struct ConvGeom {
  int c_in, h, w, kh, kw, stride, pad, h_out, w_out;
  int k() const { return c_in * kh * kw; }
  int hw_out() const { return h_out * w_out; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

void im2col(const Real* x, const ConvGeom& g, Real* cols) {
  const int hw = g.hw_out();
  for (int c = 0; c < g.c_in; ++c) {
    const Real* xc = x + static_cast<std::ptrdiff_t>(c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        Real* row = cols + static_cast<std::ptrdiff_t>((c * g.kh + i) * g.kw + j) * hw;
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          Real* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.w_out, 0.0);
            continue;
          }
          const Real* src = xc + static_cast<std::ptrdiff_t>(iy) * g.w;
          for (int ox = 0; ox < g.w_out; ++ox) {
            const int ix = ox * g.stride - g.pad + j;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const Real* cols, const ConvGeom& g, Real* dx) {
  const int hw = g.hw_out();
  for (int c = 0; c < g.c_in; ++c) {
    Real* dxc = dx + static_cast<std::ptrdiff_t>(c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const Real* row = cols + static_cast<std::ptrdiff_t>((c * g.kh + i) * g.kw + j) * hw;
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          if (iy < 0 || iy >= g.h) continue;
          Real* dst = dxc + static_cast<std::ptrdiff_t>(iy) * g.w;
          const Real* src = row + oy * g.w_out;
          for (int ox = 0; ox < g.w_out; ++ox) {
            const int ix = ox * g.stride - g.pad + j;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(Tensor::make_result(a.shape(), std::move(out), {a, b},
                                    [ai, bi](const detail::TensorImpl& self) {
                                      for (const ImplPtr& p : {ai, bi}) {
                                        if (!p->requires_grad) continue;
                                        auto& g = p->ensure_grad();
                                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                      }
                                    }),
                "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(Tensor::make_result(a.shape(), std::move(out), {a, b},
                                    [ai, bi](const detail::TensorImpl& self) {
                                      if (ai->requires_grad) {
                                        auto& g = ai->ensure_grad();
                                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                      }
                                      if (bi->requires_grad) {
                                        auto& g = bi->ensure_grad();
                                        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                      }
                                    }),
                "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return finish(Tensor::make_result(a.shape(), std::move(out), {a, b},
                                    [ai, bi](const detail::TensorImpl& self) {
                                      if (ai->requires_grad) {
                                        auto& g = ai->ensure_grad();
                                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bi->data[i];
                                      }
                                      if (bi->requires_grad) {
                                        auto& g = bi->ensure_grad();
                                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ai->data[i];
                                      }
                                    }),
                "mul");
}

Tensor scale(const Tensor& a, Real factor) {
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (Real& v : out) v *= factor;
  ImplPtr ai = a.impl();
  return finish(Tensor::make_result(a.shape(), std::move(out), {a},
                                    [ai, factor](const detail::TensorImpl& self) {
                                      auto& g = ai->ensure_grad();
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
                                    }),
                "scale");
}

Tensor sum(const Tensor& a) {
  Real total = 0.0;
  for (Real v : a.data()) total += v;
  ImplPtr ai = a.impl();
  return finish(Tensor::make_result({1}, {total}, {a},
                                    [ai](const detail::TensorImpl& self) {
                                      auto& g = ai->ensure_grad();
                                      for (Real& v : g) v += self.grad[0];
                                    }),
                "sum");
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<Real>(a.numel())); }

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<Real> out(a.data().begin(), a.data().end());
  ImplPtr ai = a.impl();
  return Tensor::make_result(shape, std::move(out), {a}, [ai](const detail::TensorImpl& self) {
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor flatten(const Tensor& a) {
  const int n = a.dim(0);
  return reshape(a, {n, static_cast<int>(a.numel() / static_cast<std::size_t>(n))});
}

Tensor relu(const Tensor& x) {
  std::vector<Real> out(x.data().begin(), x.data().end());
  for (Real& v : out) v = v > 0.0 ? v : 0.0;
  ImplPtr xi = x.impl();
  return finish(Tensor::make_result(x.shape(), std::move(out), {x},
                                    [xi](const detail::TensorImpl& self) {
                                      auto& g = xi->ensure_grad();
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                        if (xi->data[i] > 0.0) g[i] += self.grad[i];
                                      }
                                    }),
                "relu");
}

Tensor silu(const Tensor& x) {
  std::vector<Real> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] / (1.0 + std::exp(-xd[i]));
  ImplPtr xi = x.impl();
  return finish(Tensor::make_result(x.shape(), std::move(out), {x},
                                    [xi](const detail::TensorImpl& self) {
                                      auto& g = xi->ensure_grad();
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                        const Real v = xi->data[i];
                                        const Real s = 1.0 / (1.0 + std::exp(-v));
                                        g[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
                                      }
                                    }),
                "silu");
}

Tensor sigmoid(const Tensor& x) {
  std::vector<Real> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xd[i]));
  ImplPtr xi = x.impl();
  return finish(Tensor::make_result(x.shape(), std::move(out), {x},
                                    [xi](const detail::TensorImpl& self) {
                                      auto& g = xi->ensure_grad();
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                        const Real s = self.data[i];
                                        g[i] += self.grad[i] * s * (1.0 - s);
                                      }
                                    }),
                "sigmoid");
}

Tensor softmax(const Tensor& x, int axis) {
  const Shape& shape = x.shape();
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[i]);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(shape[i]);
  const std::size_t len = static_cast<std::size_t>(shape[axis]);

  std::vector<Real> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      Real mx = xd[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      Real z = 0.0;
      for (std::size_t k = 0; k < len; ++k) z += (out[base + k * inner] = std::exp(xd[base + k * inner] - mx));
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  ImplPtr xi = x.impl();
  return finish(Tensor::make_result(shape, std::move(out), {x},
                                    [xi, outer, inner, len](const detail::TensorImpl& self) {
                                      auto& g = xi->ensure_grad();
                                      for (std::size_t o = 0; o < outer; ++o) {
                                        for (std::size_t in = 0; in < inner; ++in) {
                                          const std::size_t base = o * len * inner + in;
                                          Real dot = 0.0;
                                          for (std::size_t k = 0; k < len; ++k) {
                                            dot += self.grad[base + k * inner] * self.data[base + k * inner];
                                          }
                                          for (std::size_t k = 0; k < len; ++k) {
                                            const std::size_t idx = base + k * inner;
                                            g[idx] += self.data[idx] * (self.grad[idx] - dot);
                                          }
                                        }
                                      }
                                    }),
                "softmax");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const int n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: in_features mismatch, input " + shape_str(x.shape()) + " weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
  }
  std::vector<Real> out(static_cast<std::size_t>(n) * out_f);
  MatMap y(out.data(), n, out_f);
  ConstMatMap xm(x.data().data(), n, in);
  ConstMatMap wm(weight.data().data(), out_f, in);
  y.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    auto bd = bias.data();
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < out_f; ++c) y(r, c) += bd[c];
  }
  ImplPtr xi = x.impl(), wi = weight.impl();
  ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return finish(
      Tensor::make_result({n, out_f}, std::move(out), inputs,
                          [xi, wi, bi, n, in, out_f](const detail::TensorImpl& self) {
                            ConstMatMap dy(self.grad.data(), n, out_f);
                            if (xi->requires_grad) {
                              MatMap dx(xi->ensure_grad().data(), n, in);
                              dx.noalias() += dy * ConstMatMap(wi->data.data(), out_f, in);
                            }
                            if (wi->requires_grad) {
                              MatMap dw(wi->ensure_grad().data(), out_f, in);
                              dw.noalias() += dy.transpose() * ConstMatMap(xi->data.data(), n, in);
                            }
                            if (bi && bi->requires_grad) {
                              auto& db = bi->ensure_grad();
                              for (int r = 0; r < n; ++r)
                                for (int c = 0; c < out_f; ++c) db[c] += dy(r, c);
                            }
                          }),
      "linear");
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  if (stride <= 0 || padding < 0) throw ValueError("conv2d: stride must be positive and padding non-negative");
  const int n = input.dim(0);
  const int c_out = weight.dim(0);
  ConvGeom g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
  if (weight.dim(1) != g.c_in) {
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(input.shape()) + " weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != c_out)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  const int num_h = g.h + 2 * padding - g.kh;
  const int num_w = g.w + 2 * padding - g.kw;
  if (num_h < 0 || num_w < 0) {
    throw ShapeError("conv2d: non-positive output dims for input " + shape_str(input.shape()));
  }
  g.h_out = num_h / stride + 1;
  g.w_out = num_w / stride + 1;

  const int hw = g.hw_out();
  const int k = g.k();
  const std::size_t in_stride = static_cast<std::size_t>(g.c_in) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(c_out) * hw;
  std::vector<Real> out(static_cast<std::size_t>(n) * out_stride);
  std::vector<Real> cols(g.is_pointwise() ? 0 : static_cast<std::size_t>(k) * hw);
  ConstMatMap wm(weight.data().data(), c_out, k);
  auto bd = bias.defined() ? bias.data() : std::span<const Real>{};
  for (int b = 0; b < n; ++b) {
    const Real* x = input.data().data() + b * in_stride;
    const Real* colp = x;
    if (!g.is_pointwise()) {
      im2col(x, g, cols.data());
      colp = cols.data();
    }
    MatMap y(out.data() + b * out_stride, c_out, hw);
    y.noalias() = wm * ConstMatMap(colp, k, hw);
    if (!bd.empty()) {
      for (int c = 0; c < c_out; ++c) y.row(c).array() += bd[c];
    }
  }

  ImplPtr xi = input.impl(), wi = weight.impl();
  ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return finish(
      Tensor::make_result(
          {n, c_out, g.h_out, g.w_out}, std::move(out), inputs,
          [xi, wi, bi, g, n, c_out, in_stride, out_stride](const detail::TensorImpl& self) {
            const int hw = g.hw_out();
            const int k = g.k();
            std::vector<Real> cols(g.is_pointwise() ? 0 : static_cast<std::size_t>(k) * hw);
            std::vector<Real> dcols(static_cast<std::size_t>(k) * hw);
            ConstMatMap wm(wi->data.data(), c_out, k);
            for (int b = 0; b < n; ++b) {
              ConstMatMap dy(self.grad.data() + b * out_stride, c_out, hw);
              if (wi->requires_grad) {
                const Real* colp = xi->data.data() + b * in_stride;
                if (!g.is_pointwise()) {
                  im2col(colp, g, cols.data());
                  colp = cols.data();
                }
                MatMap dw(wi->ensure_grad().data(), c_out, k);
                dw.noalias() += dy * ConstMatMap(colp, k, hw).transpose();
              }
              if (bi && bi->requires_grad) {
                auto& db = bi->ensure_grad();
                for (int c = 0; c < c_out; ++c) db[c] += dy.row(c).sum();
              }
              if (xi->requires_grad) {
                Real* dx = xi->ensure_grad().data() + b * in_stride;
                if (g.is_pointwise()) {
                  MatMap(dx, k, hw).noalias() += wm.transpose() * dy;
                } else {
                  MatMap dc(dcols.data(), k, hw);
                  dc.noalias() = wm.transpose() * dy;
                  col2im_add(dcols.data(), g, dx);
                }
              }
            }
          }),
      "conv2d");
}

Tensor max_pool2d(const Tensor& input, int k, int stride) {
  require_rank(input, 4, "max_pool2d");
  if (k <= 0 || stride <= 0) throw ValueError("max_pool2d: window and stride must be positive");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < k || w < k) {
    throw ShapeError("max_pool2d: window " + std::to_string(k) + " larger than input " + shape_str(input.shape()));
  }
  const int ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  std::vector<Real> out(static_cast<std::size_t>(n) * c * ho * wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  auto xd = input.data();
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const std::size_t plane = static_cast<std::size_t>(p) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        std::size_t best = plane + static_cast<std::size_t>(oy * stride) * w + ox * stride;
        for (int i = 0; i < k; ++i) {
          for (int j = 0; j < k; ++j) {
            const std::size_t idx = plane + static_cast<std::size_t>(oy * stride + i) * w + ox * stride + j;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        out[o] = xd[best];
        (*argmax)[o] = best;
      }
    }
  }
  ImplPtr xi = input.impl();
  return finish(Tensor::make_result({n, c, ho, wo}, std::move(out), {input},
                                    [xi, argmax](const detail::TensorImpl& self) {
                                      auto& g = xi->ensure_grad();
                                      for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += self.grad[i];
                                    }),
                "max_pool2d");
}

Tensor adaptive_avg_pool2d(const Tensor& input, int out_h, int out_w) {
  require_rank(input, 4, "adaptive_avg_pool2d");
  if (out_h <= 0 || out_w <= 0) throw ShapeError("adaptive_avg_pool2d: zero output dims");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h > h || out_w > w) {
    throw ShapeError("adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " exceeds input " + shape_str(input.shape()));
  }
  auto row_lo = [=](int i) { return (i * h) / out_h; };
  auto row_hi = [=](int i) { return ((i + 1) * h + out_h - 1) / out_h; };
  auto col_lo = [=](int j) { return (j * w) / out_w; };
  auto col_hi = [=](int j) { return ((j + 1) * w + out_w - 1) / out_w; };

  std::vector<Real> out(static_cast<std::size_t>(n) * c * out_h * out_w);
  auto xd = input.data();
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const Real* plane = xd.data() + static_cast<std::size_t>(p) * h * w;
    for (int i = 0; i < out_h; ++i) {
      for (int j = 0; j < out_w; ++j, ++o) {
        Real s = 0.0;
        for (int y = row_lo(i); y < row_hi(i); ++y)
          for (int x = col_lo(j); x < col_hi(j); ++x) s += plane[y * w + x];
        out[o] = s / static_cast<Real>((row_hi(i) - row_lo(i)) * (col_hi(j) - col_lo(j)));
      }
    }
  }
  ImplPtr xi = input.impl();
  return finish(Tensor::make_result({n, c, out_h, out_w}, std::move(out), {input},
                                    [=](const detail::TensorImpl& self) {
                                      auto& g = xi->ensure_grad();
                                      std::size_t o = 0;
                                      for (int p = 0; p < n * c; ++p) {
                                        Real* plane = g.data() + static_cast<std::size_t>(p) * h * w;
                                        for (int i = 0; i < out_h; ++i) {
                                          for (int j = 0; j < out_w; ++j, ++o) {
                                            const Real share =
                                                self.grad[o] /
                                                static_cast<Real>((row_hi(i) - row_lo(i)) * (col_hi(j) - col_lo(j)));
                                            for (int y = row_lo(i); y < row_hi(i); ++y)
                                              for (int x = col_lo(j); x < col_hi(j); ++x) plane[y * w + x] += share;
                                          }
                                        }
                                      }
                                    }),
                "adaptive_avg_pool2d");
}

}  // namespace stnyolo::ops
