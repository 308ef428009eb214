#pragma once

#include <array>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stnyolo/box.hpp"
#include "stnyolo/optim.hpp"
#include "stnyolo/tensor.hpp"

namespace stnyolo {

struct DetectorConfig {
  int n_classes = 1;
  int reg_max = 8;
  std::array<int, 5> widths{16, 32, 64, 128, 128};
  int head_width = 32;
  Real prior_prob = 0.01;  // initial foreground probability of the class bias

  bool operator==(const DetectorConfig&) const = default;
};

inline constexpr std::array<int, 3> kPyramidStrides{8, 16, 32};

/// All five backbone stage outputs (strides 2..32); the last three feed the head.
struct PyramidFeatures {
  std::array<Tensor, 5> stages;

  const Tensor& level(int i) const { return stages[static_cast<std::size_t>(i) + 2]; }
  /// Stage by name: "p1".."p5" or "stride8" / "stride16" / "stride32".
  const Tensor& by_name(const std::string& name) const;
};

struct LevelGeometry {
  int stride = 0;
  int h = 0;
  int w = 0;

  bool operator==(const LevelGeometry&) const = default;
};

struct PyramidGeometry {
  int image_h = 0;
  int image_w = 0;
  std::array<LevelGeometry, 3> levels;

  /// Throws ShapeError unless both dims are positive multiples of 32.
  static PyramidGeometry for_image(int image_h, int image_w);
  bool operator==(const PyramidGeometry&) const = default;
};

/// Raw head logits for one pyramid level.
///   cls_logits (N, n_classes, h, w)
///   box_logits (N, 4 * (reg_max + 1), h, w); channel = side * (reg_max + 1) + bin,
///   sides ordered left, top, right, bottom.
struct LevelOutput {
  int stride = 0;
  Tensor cls_logits;
  Tensor box_logits;
};

struct HeadOutput {
  std::vector<LevelOutput> levels;
  int n_classes = 1;
  int reg_max = 8;
  int image_h = 0;
  int image_w = 0;

  int batch() const { return levels.at(0).cls_logits.dim(0); }
  PyramidGeometry geometry() const;
  /// Per-cell output width: n_classes + 4 * (reg_max + 1).
  int cell_width() const { return n_classes + 4 * (reg_max + 1); }
};

/// Strided conv-ReLU backbone plus unshared two-layer class and box branches
/// (conv3x3-SiLU-conv1x1) on the stride 8/16/32 levels.
class Detector {
 public:
  Detector(const DetectorConfig& config, std::mt19937_64& rng);

  const DetectorConfig& config() const { return config_; }
  PyramidFeatures backbone_forward(const Tensor& image) const;
  HeadOutput head_forward(const PyramidFeatures& feats, int image_h, int image_w) const;
  HeadOutput forward(const Tensor& image) const;
  std::vector<ParamRef> parameters(const std::string& prefix = "det") const;

  struct Conv {
    Tensor weight;
    Tensor bias;
    int stride = 1;
    int pad = 0;
    Tensor operator()(const Tensor& x) const;
  };
  struct Head {
    Conv cls_hidden, cls_out, box_hidden, box_out;
  };

  std::array<Conv, 5> backbone;
  std::array<Head, 3> heads;

 private:
  DetectorConfig config_;
};

/// Pyramid level (0: stride 8, 1: stride 16, 2: stride 32) for a box, from
/// max(w, h) at a 256-px reference: < 64 -> 0, < 128 -> 1, else 2.
int select_level(const BBox& box);

struct CellTarget {
  int batch = 0;
  int level = 0;
  int row = 0;
  int col = 0;
  int class_id = 0;
  std::array<Real, 4> ltrb{};  // side distances from the cell centre, stride units
  BBox gt;
  int gt_index = 0;
};

struct TargetSet {
  PyramidGeometry geometry;
  int batch = 0;
  int n_classes = 1;
  int reg_max = 8;
  std::vector<CellTarget> cells;
  int collisions = 0;  // boxes dropped because their cell was already taken
};

/// Centre-cell assignment: each box goes to the cell containing its centre on
/// the level chosen by select_level. When two boxes land on the same cell the
/// earlier one keeps it. Distances are clamped into [0, reg_max].
TargetSet assign_targets(const std::vector<std::vector<BBox>>& gts, const PyramidGeometry& geometry, int n_classes,
                         int reg_max);

/// Distribution focal loss for one side: proximity-weighted cross-entropy on
/// the two bins bracketing `target`. `grad`, when non-empty, receives
/// d loss / d logits.
Real dfl_loss(std::span<const Real> logits, Real target, std::span<Real> grad = {});

struct LossWeights {
  Real cls = 0.5;
  Real box = 7.5;
  Real dfl = 1.5;
};

struct LossBreakdown {
  Tensor total;  // differentiable scalar
  Real cls = 0.0;
  Real box = 0.0;
  Real dfl = 0.0;
  int assigned = 0;
};

/// cls: BCE summed over every cell and class, divided by max(#assigned, 1).
/// box: mean over assigned cells of (1 - CIOU) on the decoded DFL expectations.
/// dfl: mean over assigned cells of the mean side DFL.
LossBreakdown detection_loss(const HeadOutput& head, const TargetSet& targets, const LossWeights& weights = {});

/// Box for one cell from its DFL expectations (normalized, clipped).
BBox decode_cell(const HeadOutput& head, int level, int batch, int row, int col, int class_id);

/// Per-cell decode (argmax class, sigmoid score), greedy per-class NMS that
/// suppresses IoU > iou_thresh, sorted by descending score.
std::vector<Detection> decode_and_nms(const HeadOutput& head, Real conf_thresh, Real iou_thresh, int batch = 0,
                                      std::size_t max_det = 300);

/// Greedy NMS on arbitrary detections (same rules as above).
std::vector<Detection> nms(std::vector<Detection> dets, Real iou_thresh, std::size_t max_det = 300);

}  // namespace stnyolo
