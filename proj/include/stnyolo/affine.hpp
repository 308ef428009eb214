#pragma once

#include <array>
#include <utility>

#include "stnyolo/tensor.hpp"

namespace stnyolo {

/// Row-major 2x3 affine matrix [a11 a12 a13; a21 a22 a23].
using Affine2x3 = std::array<Real, 6>;

constexpr Affine2x3 kIdentityAffine{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

std::pair<Real, Real> apply_affine(const Affine2x3& m, Real x, Real y);

/// (outer ∘ inner)(p) = outer(inner(p)).
Affine2x3 compose_affine(const Affine2x3& outer, const Affine2x3& inner);

/// Throws ValueError for a singular linear part.
Affine2x3 invert_affine(const Affine2x3& m);

Real affine_determinant(const Affine2x3& m);

/// Counter-clockwise rotation (as displayed, y axis pointing down) about the
/// origin of a centered frame.
Affine2x3 rotation_affine(Real degrees);

}  // namespace stnyolo
