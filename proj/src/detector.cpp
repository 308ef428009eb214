#include "stnyolo/detector.hpp"

#include <ceres/jet.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stnyolo/errors.hpp"
#include "stnyolo/ops.hpp"
#include "stnyolo/stn.hpp"

namespace stnyolo {

namespace {

Detector::Conv make_conv(int c_in, int c_out, int k, int stride, std::mt19937_64& rng, Real std_override = 0.0,
                         Real bias_value = 0.0) {
  Detector::Conv conv;
  const int fan_in = c_in * k * k;
  if (std_override > 0.0) {
    std::normal_distribution<Real> dist(0.0, std_override);
    std::vector<Real> w(static_cast<std::size_t>(c_out) * fan_in);
    for (Real& v : w) v = dist(rng);
    conv.weight = Tensor::from({c_out, c_in, k, k}, std::move(w), true);
  } else {
    conv.weight = he_normal({c_out, c_in, k, k}, fan_in, rng);
  }
  conv.bias = Tensor::full({c_out}, bias_value, true);
  conv.stride = stride;
  conv.pad = k / 2;
  return conv;
}

// log-softmax of a strided slice, written into `out`.
void log_softmax(const Real* z, std::size_t len, std::size_t step, std::vector<Real>& out) {
  out.resize(len);
  Real mx = z[0];
  for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, z[k * step]);
  Real s = 0.0;
  for (std::size_t k = 0; k < len; ++k) s += std::exp(z[k * step] - mx);
  const Real lse = mx + std::log(s);
  for (std::size_t k = 0; k < len; ++k) out[k] = z[k * step] - lse;
}

Real bce_with_logits(Real z, Real y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

Real sigmoid(Real z) { return 1.0 / (1.0 + std::exp(-z)); }

std::size_t index4(const Tensor& t, int b, int c, int i, int j) {
  const Shape& s = t.shape();
  return ((static_cast<std::size_t>(b) * s[1] + c) * s[2] + i) * s[3] + j;
}

}  // namespace

const Tensor& PyramidFeatures::by_name(const std::string& name) const {
  static const std::array<const char*, 5> stage_names{"p1", "p2", "p3", "p4", "p5"};
  for (std::size_t i = 0; i < stage_names.size(); ++i) {
    if (name == stage_names[i]) return stages[i];
  }
  if (name == "stride8") return level(0);
  if (name == "stride16") return level(1);
  if (name == "stride32") return level(2);
  throw ValueError("unknown feature layer '" + name + "' (expected p1..p5 or stride8/16/32)");
}

PyramidGeometry PyramidGeometry::for_image(int image_h, int image_w) {
  if (image_h <= 0 || image_w <= 0 || image_h % 32 != 0 || image_w % 32 != 0) {
    throw ShapeError("image dims must be positive multiples of 32, got " + std::to_string(image_h) + "x" +
                     std::to_string(image_w));
  }
  PyramidGeometry g;
  g.image_h = image_h;
  g.image_w = image_w;
  for (std::size_t i = 0; i < 3; ++i) {
    const int s = kPyramidStrides[i];
    g.levels[i] = {s, image_h / s, image_w / s};
  }
  return g;
}

PyramidGeometry HeadOutput::geometry() const {
  PyramidGeometry g;
  g.image_h = image_h;
  g.image_w = image_w;
  for (std::size_t i = 0; i < 3 && i < levels.size(); ++i) {
    g.levels[i] = {levels[i].stride, levels[i].cls_logits.dim(2), levels[i].cls_logits.dim(3)};
  }
  return g;
}

Tensor Detector::Conv::operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

Detector::Detector(const DetectorConfig& config, std::mt19937_64& rng) : config_(config) {
  if (config.n_classes <= 0 || config.reg_max <= 0 || config.head_width <= 0) {
    throw ValueError("detector config values must be positive");
  }
  if (!(config.prior_prob > 0.0 && config.prior_prob < 1.0)) throw ValueError("prior_prob must be in (0, 1)");
  int c_in = 3;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    backbone[i] = make_conv(c_in, config.widths[i], 3, 2, rng);
    c_in = config.widths[i];
  }
  const Real cls_bias = -std::log((1.0 - config.prior_prob) / config.prior_prob);
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const int c = config.widths[l + 2];
    Head& h = heads[l];
    h.cls_hidden = make_conv(c, config.head_width, 3, 1, rng);
    h.cls_out = make_conv(config.head_width, config.n_classes, 1, 1, rng, 0.01, cls_bias);
    h.box_hidden = make_conv(c, config.head_width, 3, 1, rng);
    h.box_out = make_conv(config.head_width, 4 * (config.reg_max + 1), 1, 1, rng, 0.01);
  }
}

PyramidFeatures Detector::backbone_forward(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("detector expects (N, 3, H, W), got " + shape_str(image.shape()));
  }
  PyramidGeometry::for_image(image.dim(2), image.dim(3));
  PyramidFeatures feats;
  Tensor x = image;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    x = ops::relu(backbone[i](x));
    feats.stages[i] = x;
  }
  return feats;
}

HeadOutput Detector::head_forward(const PyramidFeatures& feats, int image_h, int image_w) const {
  const PyramidGeometry geom = PyramidGeometry::for_image(image_h, image_w);
  HeadOutput out;
  out.n_classes = config_.n_classes;
  out.reg_max = config_.reg_max;
  out.image_h = image_h;
  out.image_w = image_w;
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const Tensor& f = feats.level(static_cast<int>(l));
    if (f.rank() != 4 || f.dim(2) != geom.levels[l].h || f.dim(3) != geom.levels[l].w ||
        f.dim(1) != config_.widths[l + 2]) {
      throw ShapeError("pyramid level " + std::to_string(l) + " has unexpected shape " + shape_str(f.shape()));
    }
    const Head& h = heads[l];
    LevelOutput lo;
    lo.stride = kPyramidStrides[l];
    lo.cls_logits = h.cls_out(ops::silu(h.cls_hidden(f)));
    lo.box_logits = h.box_out(ops::silu(h.box_hidden(f)));
    out.levels.push_back(std::move(lo));
  }
  return out;
}

HeadOutput Detector::forward(const Tensor& image) const {
  return head_forward(backbone_forward(image), image.dim(2), image.dim(3));
}

std::vector<ParamRef> Detector::parameters(const std::string& prefix) const {
  std::vector<ParamRef> params;
  auto add = [&](const std::string& name, const Conv& c) {
    params.push_back({prefix + "." + name + ".weight", c.weight, true});
    params.push_back({prefix + "." + name + ".bias", c.bias, false});
  };
  for (std::size_t i = 0; i < backbone.size(); ++i) add("backbone.p" + std::to_string(i + 1), backbone[i]);
  for (std::size_t l = 0; l < heads.size(); ++l) {
    const std::string base = "head" + std::to_string(kPyramidStrides[l]);
    add(base + ".cls_hidden", heads[l].cls_hidden);
    add(base + ".cls_out", heads[l].cls_out);
    add(base + ".box_hidden", heads[l].box_hidden);
    add(base + ".box_out", heads[l].box_out);
  }
  return params;
}

int select_level(const BBox& box) {
  const Real size = std::max(box.w, box.h) * 256.0;
  if (size < 64.0) return 0;
  if (size < 128.0) return 1;
  return 2;
}

TargetSet assign_targets(const std::vector<std::vector<BBox>>& gts, const PyramidGeometry& geometry, int n_classes,
                         int reg_max) {
  TargetSet ts;
  ts.geometry = geometry;
  ts.batch = static_cast<int>(gts.size());
  ts.n_classes = n_classes;
  ts.reg_max = reg_max;
  const Real rmax = static_cast<Real>(reg_max);
  for (int b = 0; b < ts.batch; ++b) {
    const auto& boxes = gts[static_cast<std::size_t>(b)];
    for (std::size_t k = 0; k < boxes.size(); ++k) {
      const BBox& box = boxes[k];
      if (!(box.w > 0.0) || !(box.h > 0.0)) throw ValueError("assign_targets: box with zero area");
      validate_box(box);
      if (box.class_id >= n_classes) throw ValueError("assign_targets: class id out of range");
      const int level = select_level(box);
      const LevelGeometry& lg = geometry.levels[static_cast<std::size_t>(level)];
      const int col = std::min(static_cast<int>(std::floor(box.cx * lg.w)), lg.w - 1);
      const int row = std::min(static_cast<int>(std::floor(box.cy * lg.h)), lg.h - 1);
      const bool taken = std::any_of(ts.cells.begin(), ts.cells.end(), [&](const CellTarget& c) {
        return c.batch == b && c.level == level && c.row == row && c.col == col;
      });
      if (taken) {
        ++ts.collisions;
        continue;
      }
      const Real sx = static_cast<Real>(geometry.image_w) / lg.stride;
      const Real sy = static_cast<Real>(geometry.image_h) / lg.stride;
      const Real ax = col + 0.5, ay = row + 0.5;
      CellTarget c;
      c.batch = b;
      c.level = level;
      c.row = row;
      c.col = col;
      c.class_id = box.class_id;
      c.ltrb = {std::clamp(ax - box.x1() * sx, 0.0, rmax), std::clamp(ay - box.y1() * sy, 0.0, rmax),
                std::clamp(box.x2() * sx - ax, 0.0, rmax), std::clamp(box.y2() * sy - ay, 0.0, rmax)};
      c.gt = box;
      c.gt_index = static_cast<int>(k);
      ts.cells.push_back(c);
    }
  }
  return ts;
}

Real dfl_loss(std::span<const Real> logits, Real target, std::span<Real> grad) {
  const int reg_max = static_cast<int>(logits.size()) - 1;
  if (reg_max < 1) throw ValueError("dfl_loss needs at least two bins");
  if (!(target >= 0.0 && target <= reg_max)) throw ValueError("dfl_loss: target outside [0, reg_max]");
  std::vector<Real> logp;
  log_softmax(logits.data(), logits.size(), 1, logp);
  const int left = std::min(static_cast<int>(std::floor(target)), reg_max);
  const int right = left + 1;
  Real w_left = static_cast<Real>(right) - target;
  Real w_right = target - static_cast<Real>(left);
  if (right > reg_max) {  // target == reg_max
    w_left = 1.0;
    w_right = 0.0;
  }
  Real loss = -w_left * logp[static_cast<std::size_t>(left)];
  if (w_right != 0.0) loss -= w_right * logp[static_cast<std::size_t>(right)];
  if (!grad.empty()) {
    if (grad.size() != logits.size()) throw ShapeError("dfl_loss: gradient buffer size mismatch");
    for (std::size_t k = 0; k < logits.size(); ++k) grad[k] = std::exp(logp[k]);
    grad[static_cast<std::size_t>(left)] -= w_left;
    if (w_right != 0.0) grad[static_cast<std::size_t>(right)] -= w_right;
  }
  return loss;
}

LossBreakdown detection_loss(const HeadOutput& head, const TargetSet& targets, const LossWeights& weights) {
  if (head.levels.size() != 3) throw ShapeError("detection_loss: expected three pyramid levels");
  if (!(head.geometry() == targets.geometry) || head.batch() != targets.batch ||
      head.n_classes != targets.n_classes || head.reg_max != targets.reg_max) {
    throw ShapeError("detection_loss: targets were assigned on a different geometry");
  }
  const int nc = head.n_classes;
  const int bins = head.reg_max + 1;
  const int n = head.batch();
  const int assigned = static_cast<int>(targets.cells.size());
  const Real norm = static_cast<Real>(std::max(assigned, 1));

  std::vector<std::vector<Real>> cls_grad(3), box_grad(3);
  Real cls_sum = 0.0;
  for (std::size_t l = 0; l < 3; ++l) {
    const Tensor& cls = head.levels[l].cls_logits;
    if (cls.dim(0) != n || cls.dim(1) != nc || head.levels[l].box_logits.dim(1) != 4 * bins) {
      throw ShapeError("detection_loss: head output channel layout mismatch");
    }
    std::vector<Real> y(cls.numel(), 0.0);
    for (const CellTarget& c : targets.cells) {
      if (c.level == static_cast<int>(l)) y[index4(cls, c.batch, c.class_id, c.row, c.col)] = 1.0;
    }
    auto z = cls.data();
    cls_grad[l].resize(cls.numel());
    for (std::size_t i = 0; i < z.size(); ++i) {
      cls_sum += bce_with_logits(z[i], y[i]);
      cls_grad[l][i] = weights.cls * (sigmoid(z[i]) - y[i]) / norm;
    }
    box_grad[l].assign(head.levels[l].box_logits.numel(), 0.0);
  }

  using Jet = ceres::Jet<Real, 4>;
  Real box_sum = 0.0, dfl_sum = 0.0;
  std::vector<Real> logits(static_cast<std::size_t>(bins)), g(static_cast<std::size_t>(bins));
  std::vector<Real> logp;
  for (const CellTarget& c : targets.cells) {
    const LevelOutput& lo = head.levels[static_cast<std::size_t>(c.level)];
    const Tensor& box = lo.box_logits;
    const std::size_t step = static_cast<std::size_t>(box.dim(2)) * box.dim(3);
    auto bd = box.data();
    std::array<Real, 4> expect{};
    std::array<std::vector<Real>, 4> probs;
    for (int side = 0; side < 4; ++side) {
      const std::size_t base = index4(box, c.batch, side * bins, c.row, c.col);
      for (int k = 0; k < bins; ++k) logits[static_cast<std::size_t>(k)] = bd[base + k * step];
      dfl_sum += 0.25 * dfl_loss(logits, c.ltrb[static_cast<std::size_t>(side)], g) / norm;
      log_softmax(logits.data(), logits.size(), 1, logp);
      probs[static_cast<std::size_t>(side)].resize(static_cast<std::size_t>(bins));
      for (int k = 0; k < bins; ++k) {
        const Real p = std::exp(logp[static_cast<std::size_t>(k)]);
        probs[static_cast<std::size_t>(side)][static_cast<std::size_t>(k)] = p;
        expect[static_cast<std::size_t>(side)] += k * p;
        box_grad[static_cast<std::size_t>(c.level)][base + k * step] +=
            weights.dfl * 0.25 * g[static_cast<std::size_t>(k)] / norm;
      }
    }

    // CIOU in stride units on the decoded expectations, differentiated w.r.t. (l, t, r, b).
    const Real ax = c.col + 0.5, ay = c.row + 0.5;
    const Real sx = static_cast<Real>(head.image_w) / lo.stride, sy = static_cast<Real>(head.image_h) / lo.stride;
    const Jet l(expect[0], 0), t(expect[1], 1), r(expect[2], 2), b(expect[3], 3);
    const Jet value = ciou_cxcywh<Jet>(ax + 0.5 * (r - l), ay + 0.5 * (b - t), l + r, t + b, c.gt.cx * sx,
                                       c.gt.cy * sy, c.gt.w * sx, c.gt.h * sy);
    box_sum += (1.0 - value.a) / norm;
    for (int side = 0; side < 4; ++side) {
      const Real d_side = -weights.box * value.v[side] / norm;
      const std::size_t base = index4(box, c.batch, side * bins, c.row, c.col);
      const auto& p = probs[static_cast<std::size_t>(side)];
      for (int k = 0; k < bins; ++k) {
        box_grad[static_cast<std::size_t>(c.level)][base + k * step] +=
            d_side * p[static_cast<std::size_t>(k)] * (k - expect[static_cast<std::size_t>(side)]);
      }
    }
  }

  LossBreakdown out;
  out.cls = weights.cls * cls_sum / norm;
  out.box = weights.box * box_sum;
  out.dfl = weights.dfl * dfl_sum;
  out.assigned = assigned;

  std::vector<Tensor> inputs;
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  for (const LevelOutput& lo : head.levels) {
    inputs.push_back(lo.cls_logits);
    inputs.push_back(lo.box_logits);
    impls.push_back(lo.cls_logits.impl());
    impls.push_back(lo.box_logits.impl());
  }
  auto grads = std::make_shared<std::vector<std::vector<Real>>>();
  for (std::size_t l = 0; l < 3; ++l) {
    grads->push_back(std::move(cls_grad[l]));
    grads->push_back(std::move(box_grad[l]));
  }
  out.total = Tensor::make_result({1}, {out.cls + out.box + out.dfl}, inputs,
                                  [impls, grads](const detail::TensorImpl& self) {
                                    const Real up = self.grad[0];
                                    for (std::size_t i = 0; i < impls.size(); ++i) {
                                      if (!impls[i]->requires_grad) continue;
                                      auto& dst = impls[i]->ensure_grad();
                                      const auto& src = (*grads)[i];
                                      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += up * src[k];
                                    }
                                  });
  check_finite(out.total, "detection_loss");
  return out;
}

BBox decode_cell(const HeadOutput& head, int level, int batch, int row, int col, int class_id) {
  const LevelOutput& lo = head.levels.at(static_cast<std::size_t>(level));
  const Tensor& box = lo.box_logits;
  const int bins = head.reg_max + 1;
  const std::size_t step = static_cast<std::size_t>(box.dim(2)) * box.dim(3);
  auto bd = box.data();
  std::array<Real, 4> d{};
  std::vector<Real> logp;
  for (int side = 0; side < 4; ++side) {
    const std::size_t base = index4(box, batch, side * bins, row, col);
    log_softmax(bd.data() + base, static_cast<std::size_t>(bins), step, logp);
    for (int k = 0; k < bins; ++k) d[static_cast<std::size_t>(side)] += k * std::exp(logp[static_cast<std::size_t>(k)]);
  }
  const Real s = lo.stride;
  const Real ax = (col + 0.5) * s, ay = (row + 0.5) * s;
  const Real x1 = (ax - d[0] * s) / head.image_w, y1 = (ay - d[1] * s) / head.image_h;
  const Real x2 = (ax + d[2] * s) / head.image_w, y2 = (ay + d[3] * s) / head.image_h;
  return clip_box(BBox::from_corners(class_id, x1, y1, x2, y2));
}

std::vector<Detection> nms(std::vector<Detection> dets, Real iou_thresh, std::size_t max_det) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  std::vector<bool> removed(dets.size(), false);
  for (std::size_t i = 0; i < dets.size() && kept.size() < max_det; ++i) {
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (!removed[j] && dets[j].bbox.class_id == dets[i].bbox.class_id && iou(dets[i].bbox, dets[j].bbox) > iou_thresh) {
        removed[j] = true;
      }
    }
  }
  return kept;
}

std::vector<Detection> decode_and_nms(const HeadOutput& head, Real conf_thresh, Real iou_thresh, int batch,
                                      std::size_t max_det) {
  if (!(conf_thresh >= 0.0 && conf_thresh <= 1.0) || !(iou_thresh >= 0.0 && iou_thresh <= 1.0)) {
    throw ValueError("decode_and_nms: thresholds must lie in [0, 1]");
  }
  std::vector<Detection> cands;
  for (std::size_t l = 0; l < head.levels.size(); ++l) {
    const Tensor& cls = head.levels[l].cls_logits;
    auto z = cls.data();
    for (int i = 0; i < cls.dim(2); ++i) {
      for (int j = 0; j < cls.dim(3); ++j) {
        int best = 0;
        Real best_z = z[index4(cls, batch, 0, i, j)];
        for (int c = 1; c < head.n_classes; ++c) {
          const Real v = z[index4(cls, batch, c, i, j)];
          if (v > best_z) {
            best_z = v;
            best = c;
          }
        }
        const Real score = sigmoid(best_z);
        if (score <= conf_thresh) continue;
        BBox b = decode_cell(head, static_cast<int>(l), batch, i, j, best);
        if (b.w <= 0.0 || b.h <= 0.0) continue;
        cands.push_back({b, score});
      }
    }
  }
  return nms(std::move(cands), iou_thresh, max_det);
}

}  // namespace stnyolo
