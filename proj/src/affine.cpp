#include "stnyolo/affine.hpp"

#include <cmath>
#include <numbers>

#include "stnyolo/errors.hpp"

namespace stnyolo {

std::pair<Real, Real> apply_affine(const Affine2x3& m, Real x, Real y) {
  return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
}

Affine2x3 compose_affine(const Affine2x3& outer, const Affine2x3& inner) {
  const Affine2x3& a = outer;
  const Affine2x3& b = inner;
  return {a[0] * b[0] + a[1] * b[3], a[0] * b[1] + a[1] * b[4], a[0] * b[2] + a[1] * b[5] + a[2],
          a[3] * b[0] + a[4] * b[3], a[3] * b[1] + a[4] * b[4], a[3] * b[2] + a[4] * b[5] + a[5]};
}

Real affine_determinant(const Affine2x3& m) { return m[0] * m[4] - m[1] * m[3]; }

Affine2x3 invert_affine(const Affine2x3& m) {
  const Real det = affine_determinant(m);
  if (!std::isfinite(det) || std::abs(det) < 1e-12) throw ValueError("singular affine transform");
  const Real i00 = m[4] / det, i01 = -m[1] / det;
  const Real i10 = -m[3] / det, i11 = m[0] / det;
  return {i00, i01, -(i00 * m[2] + i01 * m[5]), i10, i11, -(i10 * m[2] + i11 * m[5])};
}

Affine2x3 rotation_affine(Real degrees) {
  const Real rad = degrees * std::numbers::pi / 180.0;
  const Real c = std::cos(rad), s = std::sin(rad);
  // With y pointing down, a visually counter-clockwise turn is x' = c x + s y, y' = -s x + c y.
  return {c, s, 0.0, -s, c, 0.0};
}

}  // namespace stnyolo
