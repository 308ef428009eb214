#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "stnyolo/tensor.hpp"

namespace stnyolo {

/// Class-labelled box in normalized image fractions (centre / size form).
struct BBox {
  int class_id = 0;
  Real cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

  Real x1() const { return cx - 0.5 * w; }
  Real y1() const { return cy - 0.5 * h; }
  Real x2() const { return cx + 0.5 * w; }
  Real y2() const { return cy + 0.5 * h; }
  Real area() const { return w * h; }

  static BBox from_corners(int class_id, Real x1, Real y1, Real x2, Real y2);

  bool operator==(const BBox&) const = default;
};

struct Detection {
  BBox bbox;
  Real score = 0.0;

  bool operator==(const Detection&) const = default;
};

/// Throws ValueError unless w, h > 0 and cx, cy, w, h lie in [0, 1].
void validate_box(const BBox& box);

/// Corners clipped into the unit square; width/height may become zero.
BBox clip_box(const BBox& box);

/// Intersection over union; 0 for disjoint boxes. Throws ValueError for a
/// box with non-positive width or height.
Real iou(const BBox& a, const BBox& b);

/// Complete IoU in centre/size form:
///   IoU - rho^2 / c^2 - alpha * v
///   v = 4/pi^2 (atan(wg/hg) - atan(wp/hp))^2,  alpha = v / ((1 - IoU) + v + eps)
/// with rho the centre distance and c the diagonal of the enclosing box.
/// Templated so the loss can differentiate it with forward-mode jets.
template <class T>
T ciou_cxcywh(const T& pcx, const T& pcy, const T& pw, const T& ph, Real gcx, Real gcy, Real gw, Real gh,
              Real eps = 1e-9) {
  using std::atan;
  auto max = [](const T& a, const T& b) { return a < b ? b : a; };
  auto min = [](const T& a, const T& b) { return b < a ? b : a; };
  const T px1 = pcx - 0.5 * pw, px2 = pcx + 0.5 * pw;
  const T py1 = pcy - 0.5 * ph, py2 = pcy + 0.5 * ph;
  const Real gx1 = gcx - 0.5 * gw, gx2 = gcx + 0.5 * gw;
  const Real gy1 = gcy - 0.5 * gh, gy2 = gcy + 0.5 * gh;

  const T iw = max(min(px2, T(gx2)) - max(px1, T(gx1)), T(0.0));
  const T ih = max(min(py2, T(gy2)) - max(py1, T(gy1)), T(0.0));
  const T inter = iw * ih;
  // Areas from corner extents so identical boxes give IoU of exactly 1.
  const T uni = (px2 - px1) * (py2 - py1) + T((gx2 - gx1) * (gy2 - gy1)) - inter;
  const T iou_v = inter / uni;

  const T cw = max(px2, T(gx2)) - min(px1, T(gx1));
  const T ch = max(py2, T(gy2)) - min(py1, T(gy1));
  const T c2 = cw * cw + ch * ch;
  const T dx = pcx - gcx, dy = pcy - gcy;
  const T rho2 = dx * dx + dy * dy;

  const T da = T(atan(gw / gh)) - atan(pw / ph);
  const T v = (4.0 / (std::numbers::pi * std::numbers::pi)) * da * da;
  const T alpha = v / ((T(1.0) - iou_v) + v + T(eps));
  return iou_v - rho2 / c2 - alpha * v;
}

/// CIOU between two boxes (class ids ignored). Throws ValueError for
/// degenerate boxes.
Real ciou(const BBox& pred, const BBox& gt);

}  // namespace stnyolo
