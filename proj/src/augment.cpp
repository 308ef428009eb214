#include "stnyolo/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "stnyolo/errors.hpp"
#include "stnyolo/stn.hpp"

namespace stnyolo {

namespace {

Real deg2rad(Real d) { return d * std::numbers::pi / 180.0; }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

struct Hull {
  Real x1, y1, x2, y2;
  Real area() const { return std::max<Real>(0.0, x2 - x1) * std::max<Real>(0.0, y2 - y1); }
};

// Corner hull of a normalized box under `content`, in normalized coordinates.
Hull map_hull(const BBox& b, const Affine2x3& content, int width, int height) {
  const Real W = width, H = height;
  Hull h{INFINITY, INFINITY, -INFINITY, -INFINITY};
  for (Real x : {b.x1(), b.x2()}) {
    for (Real y : {b.y1(), b.y2()}) {
      const auto [u, v] = apply_affine(content, x * W - 0.5 * W, y * H - 0.5 * H);
      const Real nx = (u + 0.5 * W) / W, ny = (v + 0.5 * H) / H;
      h.x1 = std::min(h.x1, nx);
      h.y1 = std::min(h.y1, ny);
      h.x2 = std::max(h.x2, nx);
      h.y2 = std::max(h.y2, ny);
    }
  }
  return h;
}

Hull clip(Hull h) {
  return {std::clamp<Real>(h.x1, 0.0, 1.0), std::clamp<Real>(h.y1, 0.0, 1.0), std::clamp<Real>(h.x2, 0.0, 1.0),
          std::clamp<Real>(h.y2, 0.0, 1.0)};
}

void check_finite(std::initializer_list<Real> values) {
  for (Real v : values)
    if (!std::isfinite(v)) throw ValueError("augmentation parameters must be finite");
}

}  // namespace

std::string AugmentSpec::label() const {
  std::string s;
  auto add = [&](bool on, const char* tag) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += tag;
  };
  add(rotation, "R");
  add(shear, "S");
  add(crop, "C");
  return s.empty() ? "none" : s;
}

void AugmentSpec::validate() const {
  check_finite({rotation_deg, shear_deg, crop_zoom, min_area_fraction});
  if (rotation_deg < 0.0 || rotation_deg > 180.0) throw ValueError("rotation range must lie in [0, 180] degrees");
  if (shear_deg < 0.0 || shear_deg > 40.0) throw ValueError("shear range must lie in [0, 40] degrees");
  if (crop_zoom < 0.0 || crop_zoom > 1.0) throw ValueError("crop zoom must lie in [0, 1]");
  if (min_area_fraction < 0.0 || min_area_fraction >= 1.0) throw ValueError("min_area_fraction must lie in [0, 1)");
}

nlohmann::json augment_to_json(const AugmentSpec& s) {
  return {{"rotation", s.rotation},   {"shear", s.shear},         {"crop", s.crop},
          {"rotation_deg", s.rotation_deg}, {"shear_deg", s.shear_deg}, {"crop_zoom", s.crop_zoom},
          {"seed", s.seed},           {"min_area_fraction", s.min_area_fraction}};
}

AugmentSpec augment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValueError("augment block must be an object");
  AugmentSpec s;
  for (const auto& [key, value] : j.items()) {
    if (key == "rotation") s.rotation = value.get<bool>();
    else if (key == "shear") s.shear = value.get<bool>();
    else if (key == "crop") s.crop = value.get<bool>();
    else if (key == "rotation_deg") s.rotation_deg = value.get<Real>();
    else if (key == "shear_deg") s.shear_deg = value.get<Real>();
    else if (key == "crop_zoom") s.crop_zoom = value.get<Real>();
    else if (key == "seed") s.seed = value.get<std::uint64_t>();
    else if (key == "min_area_fraction") s.min_area_fraction = value.get<Real>();
    else throw ValueError("unknown augment key '" + key + "'");
  }
  s.validate();
  return s;
}

AugmentSpec parse_augment_list(const std::string& text, AugmentSpec base) {
  base.rotation = base.shear = base.crop = false;
  if (text.empty() || text == "none") return base;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find_first_of("+,", pos);
    if (end == std::string::npos) end = text.size();
    const std::string tok = text.substr(pos, end - pos);
    if (tok == "rotation" || tok == "R") base.rotation = true;
    else if (tok == "shear" || tok == "S") base.shear = true;
    else if (tok == "crop" || tok == "C") base.crop = true;
    else throw ValueError("unknown augmentation '" + tok + "' (expected rotation, shear, crop or none)");
    pos = end + 1;
  }
  return base;
}

AugmentDraw draw_augment(const AugmentSpec& spec, std::size_t index) {
  std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(index))));
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  const Real r = unit(rng), sh = unit(rng), sv = unit(rng), z = unit(rng);
  AugmentDraw d;
  if (spec.rotation) d.rotation_deg = (2.0 * r - 1.0) * spec.rotation_deg;
  if (spec.shear) {
    d.shear_h_deg = (2.0 * sh - 1.0) * spec.shear_deg;
    d.shear_v_deg = (2.0 * sv - 1.0) * spec.shear_deg;
  }
  if (spec.crop) d.zoom = 1.0 + z * spec.crop_zoom;
  return d;
}

Affine2x3 content_affine(Real rot_deg, Real shear_h_deg, Real shear_v_deg, Real zoom) {
  check_finite({rot_deg, shear_h_deg, shear_v_deg, zoom});
  if (zoom <= 0.0) throw ValueError("zoom must be positive");
  const Affine2x3 shear{1.0, std::tan(deg2rad(shear_h_deg)), 0.0, std::tan(deg2rad(shear_v_deg)), 1.0, 0.0};
  const Affine2x3 scale{zoom, 0.0, 0.0, 0.0, zoom, 0.0};
  const Affine2x3 rot = rot_deg == 0.0 ? kIdentityAffine : rotation_affine(rot_deg);
  return compose_affine(scale, compose_affine(shear, rot));
}

Affine2x3 content_affine(const AugmentDraw& d) {
  return content_affine(d.rotation_deg, d.shear_h_deg, d.shear_v_deg, d.zoom);
}

Affine2x3 sampler_theta(const Affine2x3& content, int width, int height) {
  const Affine2x3 inv = invert_affine(content);
  const Real dx = 0.5 * (width - 1), dy = 0.5 * (height - 1);
  // Degenerate axes (a single pixel) keep the unit scale.
  const Real sx = dx > 0.0 ? dx : 1.0, sy = dy > 0.0 ? dy : 1.0;
  const Affine2x3 d{sx, 0.0, 0.0, 0.0, sy, 0.0};
  const Affine2x3 d_inv{1.0 / sx, 0.0, 0.0, 0.0, 1.0 / sy, 0.0};
  return compose_affine(d_inv, compose_affine(inv, d));
}

Affine2x3 theta_to_pixel(const Affine2x3& theta, int width, int height) {
  const Real dx = 0.5 * (width - 1), dy = 0.5 * (height - 1);
  const Real sx = dx > 0.0 ? dx : 1.0, sy = dy > 0.0 ? dy : 1.0;
  const Affine2x3 d{sx, 0.0, 0.0, 0.0, sy, 0.0};
  const Affine2x3 d_inv{1.0 / sx, 0.0, 0.0, 0.0, 1.0 / sy, 0.0};
  return compose_affine(d, compose_affine(theta, d_inv));
}

Tensor warp_image(const Tensor& image, const Affine2x3& content) {
  if (image.rank() != 4) throw ShapeError("warp_image expects (N, C, H, W)");
  const int h = image.dim(2), w = image.dim(3);
  const Affine2x3 theta = sampler_theta(content, w, h);
  const std::vector<Affine2x3> thetas(static_cast<std::size_t>(image.dim(0)), theta);
  return sample(image.detach(), generate_grid(AffineParams::constant(thetas), h, w)).detach();
}

Tensor affine_image(const Tensor& image, Real rot_deg, Real shear_h_deg, Real shear_v_deg, Real zoom) {
  return warp_image(image, content_affine(rot_deg, shear_h_deg, shear_v_deg, zoom));
}

std::vector<BBox> transform_boxes(const std::vector<BBox>& boxes, const Affine2x3& content, int width, int height,
                                  Real min_area_fraction) {
  const Real det = affine_determinant(content);
  if (!std::isfinite(det) || std::abs(det) < 1e-12) throw ValueError("singular affine transform");
  std::vector<BBox> out;
  for (const BBox& b : boxes) {
    validate_box(b);
    const Hull full = map_hull(b, content, width, height);
    const Hull kept = clip(full);
    if (kept.area() <= 0.0 || kept.area() < min_area_fraction * full.area()) continue;
    out.push_back(BBox::from_corners(b.class_id, kept.x1, kept.y1, kept.x2, kept.y2));
  }
  return out;
}

std::vector<Detection> transform_detections(const std::vector<Detection>& dets, const Affine2x3& content, int width,
                                            int height) {
  std::vector<Detection> out;
  for (const Detection& d : dets) {
    const Hull kept = clip(map_hull(d.bbox, content, width, height));
    if (kept.area() <= 0.0) continue;
    out.push_back({BBox::from_corners(d.bbox.class_id, kept.x1, kept.y1, kept.x2, kept.y2), d.score});
  }
  return out;
}

Dataset augment_testset(const Dataset& dataset, const AugmentSpec& spec) {
  spec.validate();
  if (!spec.any()) return dataset;
  Dataset out;
  out.classes = dataset.classes;
  out.samples.reserve(dataset.samples.size());
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    const Affine2x3 m = content_affine(draw_augment(spec, i));
    const int h = s.image.dim(2), w = s.image.dim(3);
    out.samples.push_back({s.name, warp_image(s.image, m), transform_boxes(s.boxes, m, w, h, spec.min_area_fraction)});
  }
  return out;
}

std::vector<AugmentSpec> augment_grid(const AugmentSpec& base) {
  std::vector<AugmentSpec> rows;
  for (int mask = 0; mask < 8; ++mask) {
    AugmentSpec s = base;
    s.rotation = (mask & 4) != 0;
    s.shear = (mask & 2) != 0;
    s.crop = (mask & 1) != 0;
    rows.push_back(s);
  }
  return rows;
}

}  // namespace stnyolo
