#include "stnyolo/explain.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "stnyolo/errors.hpp"

namespace stnyolo {

namespace {

using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

// Dominant eigenvector of a symmetric PSD matrix. Each step applies g^64
// (six rescaled squarings) so close leading eigenvalues still separate
// within the iteration budget.
Vec power_iterate(const Mat& g0, int max_iter, Real tol, int& iters) {
  const Eigen::Index n = g0.rows();
  Mat g = g0;
  for (int k = 0; k < 6; ++k) {
    const Real t = g.trace();
    if (!(t > 0.0)) break;
    g = (g / t) * (g / t);
  }
  Vec v = Vec::Ones(n) / std::sqrt(static_cast<Real>(n));
  Vec w = g * v;
  if (w.norm() == 0.0) {
    // The all-ones start is orthogonal to the range; fall back to the
    // column with the largest diagonal entry.
    Eigen::Index k;
    g.diagonal().maxCoeff(&k);
    v = g.col(k).normalized();
    w = g * v;
  }
  iters = 0;
  for (int it = 0; it < max_iter; ++it) {
    iters = it + 1;
    const Real norm = w.norm();
    if (norm == 0.0) break;
    Vec next = w / norm;
    if (next.dot(v) < 0.0) next = -next;
    const Real change = (next - v).norm();
    v = next;
    w = g * v;
    if (change < tol) break;
  }
  return v;
}

}  // namespace

PrincipalComponent principal_direction(const std::vector<Real>& m, int rows, int cols, int max_iter, Real tol) {
  if (rows <= 0 || cols <= 0 || m.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("principal_direction: matrix size mismatch");
  }
  const Eigen::Map<const Mat> a(m.data(), rows, cols);
  PrincipalComponent pc;
  Vec v;
  if (rows < cols) {
    // Work with the C x C Gram matrix and lift back: v = M^T u / |M^T u|.
    const Mat g = a * a.transpose();
    const Vec u = power_iterate(g, max_iter, tol, pc.iterations);
    v = a.transpose() * u;
  } else {
    const Mat g = a.transpose() * a;
    v = power_iterate(g, max_iter, tol, pc.iterations);
  }
  const Real norm = v.norm();
  pc.direction.assign(static_cast<std::size_t>(cols), 0.0);
  pc.scores.assign(static_cast<std::size_t>(cols), 0.0);
  if (norm == 0.0) return pc;
  Eigen::Index k;
  v.cwiseAbs().maxCoeff(&k);
  if (v[k] < 0.0) v = -v;
  std::copy(v.data(), v.data() + cols, pc.scores.begin());
  v /= norm;
  const Vec av = a * v;
  const Vec gv = a.transpose() * av;
  pc.eigenvalue = av.squaredNorm();
  pc.residual = pc.eigenvalue > 0.0 ? (gv - pc.eigenvalue * v).norm() / pc.eigenvalue : 0.0;
  std::copy(v.data(), v.data() + cols, pc.direction.begin());
  return pc;
}

Heatmap eigencam(const Tensor& activations, const std::string& layer) {
  if (activations.rank() != 4 || activations.dim(0) != 1) {
    throw ShapeError("eigencam expects (1, C, H, W) activations, got " + shape_str(activations.shape()));
  }
  const int c = activations.dim(1), h = activations.dim(2), w = activations.dim(3);
  auto d = activations.data();
  const std::vector<Real> m(d.begin(), d.end());
  Heatmap out;
  out.height = h;
  out.width = w;
  out.layer = layer;
  out.values.assign(static_cast<std::size_t>(h) * w, 0.0);

  const PrincipalComponent pc = principal_direction(m, c, h * w);
  const auto [lo, hi] = std::minmax_element(pc.scores.begin(), pc.scores.end());
  const Real range = *hi - *lo;
  if (pc.eigenvalue == 0.0 || range <= 0.0) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = (pc.scores[i] - *lo) / range;
  return out;
}

Heatmap upsample(const Heatmap& h, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ShapeError("upsample target must be positive");
  Heatmap o = h;
  o.height = out_h;
  o.width = out_w;
  o.values.assign(static_cast<std::size_t>(out_h) * out_w, 0.0);
  auto src = [&](int i, int out, int in) {
    return out == 1 ? 0.5 * (in - 1) : static_cast<Real>(i) * (in - 1) / (out - 1);
  };
  for (int r = 0; r < out_h; ++r) {
    const Real y = src(r, out_h, h.height);
    const int y0 = std::min(static_cast<int>(std::floor(y)), h.height - 1);
    const int y1 = std::min(y0 + 1, h.height - 1);
    const Real fy = y - y0;
    for (int col = 0; col < out_w; ++col) {
      const Real x = src(col, out_w, h.width);
      const int x0 = std::min(static_cast<int>(std::floor(x)), h.width - 1);
      const int x1 = std::min(x0 + 1, h.width - 1);
      const Real fx = x - x0;
      const Real top = (1.0 - fx) * h.at(y0, x0) + fx * h.at(y0, x1);
      const Real bot = (1.0 - fx) * h.at(y1, x0) + fx * h.at(y1, x1);
      o.values[static_cast<std::size_t>(r) * out_w + col] = (1.0 - fy) * top + fy * bot;
    }
  }
  return o;
}

std::array<Real, 3> jet(Real v) {
  v = std::clamp<Real>(v, 0.0, 1.0);
  auto ramp = [&](Real centre) { return std::clamp<Real>(1.5 - std::abs(4.0 * v - centre), 0.0, 1.0); };
  return {ramp(3.0), ramp(2.0), ramp(1.0)};
}

Tensor overlay(const Heatmap& h, const Tensor& image, Real alpha) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) throw ShapeError("overlay expects a (1, 3, H, W) image");
  const int H = image.dim(2), W = image.dim(3);
  const Heatmap up = (h.height == H && h.width == W) ? h : upsample(h, H, W);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  auto d = image.data();
  std::vector<Real> out(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    const Real gray = 0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p];
    const Real a = alpha * up.values[p];
    const auto color = jet(up.values[p]);
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + p] = gray * (1.0 - a) + a * color[c];
  }
  return Tensor::from({1, 3, H, W}, std::move(out));
}

}  // namespace stnyolo
