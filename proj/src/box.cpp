#include "stnyolo/box.hpp"

#include "stnyolo/errors.hpp"

namespace stnyolo {

namespace {
void require_positive(const BBox& b, const char* what) {
  if (!(b.w > 0.0) || !(b.h > 0.0) || !std::isfinite(b.w * b.h)) {
    throw ValueError(std::string(what) + ": degenerate box (non-positive width or height)");
  }
}
}  // namespace

BBox BBox::from_corners(int class_id, Real x1, Real y1, Real x2, Real y2) {
  return {class_id, 0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
}

void validate_box(const BBox& box) {
  auto in_unit = [](Real v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  if (box.class_id < 0) throw ValueError("negative class id");
  if (!in_unit(box.cx) || !in_unit(box.cy) || !in_unit(box.w) || !in_unit(box.h)) {
    throw ValueError("box coordinates must lie in [0, 1]");
  }
  if (box.w <= 0.0 || box.h <= 0.0) throw ValueError("box width and height must be positive");
}

BBox clip_box(const BBox& box) {
  const Real x1 = std::clamp(box.x1(), 0.0, 1.0), x2 = std::clamp(box.x2(), 0.0, 1.0);
  const Real y1 = std::clamp(box.y1(), 0.0, 1.0), y2 = std::clamp(box.y2(), 0.0, 1.0);
  return BBox::from_corners(box.class_id, x1, y1, x2, y2);
}

Real iou(const BBox& a, const BBox& b) {
  require_positive(a, "iou");
  require_positive(b, "iou");
  const Real iw = std::max(std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()), 0.0);
  const Real ih = std::max(std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()), 0.0);
  const Real inter = iw * ih;
  if (inter <= 0.0) return 0.0;
  const Real area_a = (a.x2() - a.x1()) * (a.y2() - a.y1());
  const Real area_b = (b.x2() - b.x1()) * (b.y2() - b.y1());
  return inter / (area_a + area_b - inter);
}

Real ciou(const BBox& pred, const BBox& gt) {
  require_positive(pred, "ciou");
  require_positive(gt, "ciou");
  return ciou_cxcywh<Real>(pred.cx, pred.cy, pred.w, pred.h, gt.cx, gt.cy, gt.w, gt.h);
}

}  // namespace stnyolo
