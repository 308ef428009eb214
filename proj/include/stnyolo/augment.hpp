#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "stnyolo/affine.hpp"
#include "stnyolo/box.hpp"
#include "stnyolo/data_io.hpp"
#include "stnyolo/tensor.hpp"

namespace stnyolo {

/// Test-time geometric augmentation. Each enabled component draws per image:
/// rotation ~ U[-rotation_deg, rotation_deg], horizontal and vertical shear
/// ~ U[-shear_deg, shear_deg] each, zoom ~ U[1, 1 + crop_zoom].
struct AugmentSpec {
  bool rotation = false;
  bool shear = false;
  bool crop = false;
  Real rotation_deg = 10.0;
  Real shear_deg = 10.0;
  Real crop_zoom = 0.15;
  std::uint64_t seed = 0;
  Real min_area_fraction = 0.10;  // drop boxes that keep less than this share after clipping

  bool any() const { return rotation || shear || crop; }
  /// "none", "R", "S", "C", "R+S", ... in rotation/shear/crop order.
  std::string label() const;
  /// Throws ValueError for ranges outside rotation [0,180], shear [0,40],
  /// zoom [0,1] or a drop fraction outside [0,1).
  void validate() const;

  bool operator==(const AugmentSpec&) const = default;
};

nlohmann::json augment_to_json(const AugmentSpec& spec);
/// Missing keys keep their defaults; unknown keys are rejected.
AugmentSpec augment_from_json(const nlohmann::json& j);

/// Parses "none" or a '+' / ',' separated subset of {rotation, shear, crop}
/// (also R, S, C) into the on/off flags of `base`.
AugmentSpec parse_augment_list(const std::string& text, AugmentSpec base = {});

struct AugmentDraw {
  Real rotation_deg = 0.0;
  Real shear_h_deg = 0.0;
  Real shear_v_deg = 0.0;
  Real zoom = 1.0;
};

/// Parameters for image `index`. All four values are drawn from a stream keyed
/// by (seed, index) regardless of which components are on, then disabled ones
/// are reset, so e.g. the R and R+S rows share their rotations.
AugmentDraw draw_augment(const AugmentSpec& spec, std::size_t index);

/// Forward content map in centred pixel coordinates: zoom * shear * rotation.
/// A feature at p (relative to the image centre) ends up at M p.
Affine2x3 content_affine(Real rot_deg, Real shear_h_deg, Real shear_v_deg, Real zoom);
Affine2x3 content_affine(const AugmentDraw& d);

/// Normalized sampler matrix D^-1 M^-1 D that realizes content map M, with
/// D = diag((W-1)/2, (H-1)/2).
Affine2x3 sampler_theta(const Affine2x3& content, int width, int height);

/// Content map D theta D^-1 of a sampler matrix: the inverse of the map a
/// sampler with `theta` applies to image content.
Affine2x3 theta_to_pixel(const Affine2x3& theta, int width, int height);

/// Warps (N, C, H, W) images by content map M (bilinear, zero fill, same size).
Tensor warp_image(const Tensor& image, const Affine2x3& content);
Tensor affine_image(const Tensor& image, Real rot_deg, Real shear_h_deg, Real shear_v_deg, Real zoom);

/// Maps each box's corners by `content` (centred pixel frame of a width x
/// height image), takes the axis-aligned hull and clips it to the image. A box
/// is dropped when the clipped area is below `min_area_fraction` of the
/// unclipped hull. Throws ValueError for a singular map.
std::vector<BBox> transform_boxes(const std::vector<BBox>& boxes, const Affine2x3& content, int width, int height,
                                  Real min_area_fraction = 0.10);

/// Same hull mapping for scored detections (no drop rule; empty hulls vanish).
std::vector<Detection> transform_detections(const std::vector<Detection>& dets, const Affine2x3& content, int width,
                                            int height);

/// Applies per-image draws to every sample. An all-off spec returns an exact copy.
Dataset augment_testset(const Dataset& dataset, const AugmentSpec& spec);

/// The eight on/off combinations of (rotation, shear, crop) in table order:
/// none, C, S, S+C, R, R+C, R+S, R+S+C. Ranges and seed come from `base`.
std::vector<AugmentSpec> augment_grid(const AugmentSpec& base);

}  // namespace stnyolo
