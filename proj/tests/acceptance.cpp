// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria. `acceptance 2 5 9` runs a subset.

#include <ceres/jet.h>

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <regex>
#include <set>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "oracle.hpp"
#include "stnyolo/augment.hpp"
#include "stnyolo/checkpoint.hpp"
#include "stnyolo/data_io.hpp"
#include "stnyolo/explain.hpp"
#include "stnyolo/harness.hpp"
#include "stnyolo/ops.hpp"
#include "stnyolo/stn.hpp"

using namespace stnyolo;
using namespace stnyolo::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects the worst value of a check and the count of violations.
struct Tally {
  Real worst = 0.0;
  int checked = 0;
  int failed = 0;
  void add(Real v, Real tol) {
    worst = std::max(worst, v);
    ++checked;
    failed += v < tol ? 0 : 1;
  }
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

Real seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("stnyolo_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor away_from_zero(const Shape& shape, std::mt19937_64& rng) {
  Tensor t = random_tensor(shape, rng);
  for (Real& v : t.mutable_data()) v += v < 0 ? -0.05 : 0.05;
  return t;
}

BBox random_box(std::mt19937_64& rng, int nc, Real lo = 0.03, Real hi = 0.6) {
  std::uniform_real_distribution<Real> s(lo, hi);
  BBox b;
  b.class_id = static_cast<int>(rng() % static_cast<unsigned>(nc));
  b.w = s(rng);
  b.h = s(rng);
  b.cx = std::uniform_real_distribution<Real>(b.w / 2, 1 - b.w / 2)(rng);
  b.cy = std::uniform_real_distribution<Real>(b.h / 2, 1 - b.h / 2)(rng);
  return b;
}

HeadOutput random_head(std::mt19937_64& rng, int batch, int size, int nc, int reg_max) {
  HeadOutput h;
  h.n_classes = nc;
  h.reg_max = reg_max;
  h.image_h = h.image_w = size;
  for (int s : kPyramidStrides) {
    LevelOutput l;
    l.stride = s;
    l.cls_logits = random_tensor({batch, nc, size / s, size / s}, rng, -2, 2);
    l.box_logits = random_tensor({batch, 4 * (reg_max + 1), size / s, size / s}, rng, -2, 2);
    h.levels.push_back(l);
  }
  return h;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.name = "acceptance_tiny";
  c.image_size = 64;
  c.batch_size = 4;
  c.max_epochs = 3;
  c.early_stop_patience = 3;
  c.seed = 5;
  c.stn_pool_size = 4;
  c.detector.widths = {4, 8, 8, 16, 16};
  c.detector.head_width = 8;
  c.dataset.synth_seed = 3;
  c.dataset.synth_train = 6;
  c.dataset.synth_val = 3;
  c.dataset.synth_test = 6;
  return c;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  std::map<std::string, Tally> per_op;
  const int n = 20;
  for (int i = 0; i < n; ++i) {
    {
      const int stride = 1 + i % 2, pad = i % 3 == 0 ? 0 : 1;
      Tensor x = random_tensor({2, 2, 5, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
      Tensor p = random_tensor(ops::conv2d(x, w, b, stride, pad).shape(), rng, -1, 1, false);
      per_op["conv2d"].add(grad_rel_error([&] { return weighted_sum(ops::conv2d(x, w, b, stride, pad), p); }, {x, w, b}),
                           1e-4);
    }
    {
      Tensor x = random_tensor({2, 2, 6, 6}, rng);
      const int k = 2 + i % 2, s = i % 3 == 0 ? 1 : k;
      Tensor p = random_tensor(ops::max_pool2d(x, k, s).shape(), rng, -1, 1, false);
      per_op["max_pool2d"].add(grad_rel_error([&] { return weighted_sum(ops::max_pool2d(x, k, s), p); }, {x}), 1e-4);
      const int oh = 1 + i % 3, ow = 2 + i % 4;
      Tensor q = random_tensor({2, 2, oh, ow}, rng, -1, 1, false);
      per_op["adaptive_avg_pool2d"].add(
          grad_rel_error([&] { return weighted_sum(ops::adaptive_avg_pool2d(x, oh, ow), q); }, {x}), 1e-4);
    }
    {
      Tensor x = away_from_zero({2, 3, 4}, rng);
      Tensor p = random_tensor({2, 3, 4}, rng, -1, 1, false);
      per_op["relu"].add(grad_rel_error([&] { return weighted_sum(ops::relu(x), p); }, {x}), 1e-4);
      per_op["sigmoid"].add(grad_rel_error([&] { return weighted_sum(ops::sigmoid(x), p); }, {x}), 1e-4);
      per_op["silu"].add(grad_rel_error([&] { return weighted_sum(ops::silu(x), p); }, {x}), 1e-4);
      per_op["softmax"].add(grad_rel_error([&] { return weighted_sum(ops::softmax(x, i % 3), p); }, {x}), 1e-4);
    }
    {
      Tensor x = random_tensor({3, 5}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
      Tensor p = random_tensor({3, 4}, rng, -1, 1, false);
      per_op["linear"].add(grad_rel_error([&] { return weighted_sum(ops::linear(x, w, b), p); }, {x, w, b}), 1e-4);
    }
    {
      Tensor x = random_tensor({2, 2, 5, 6}, rng);
      Tensor coords = random_tensor({2, 4, 3, 2}, rng, -1.2, 1.2);
      SamplingGrid g{coords, 4, 3};
      Tensor p = random_tensor({2, 2, 4, 3}, rng, -1, 1, false);
      per_op["sampler"].add(grad_rel_error([&] { return weighted_sum(sample(x, g), p); }, {x, coords}), 1e-4);
      Tensor theta = random_tensor({2, 6}, rng);
      Tensor q = random_tensor({2, 3, 4, 2}, rng, -1, 1, false);
      per_op["grid_generator"].add(
          grad_rel_error([&] { return weighted_sum(generate_grid(AffineParams{theta}, 3, 4).coords, q); }, {theta}), 1e-4);
    }
    {
      using Jet = ceres::Jet<Real, 4>;
      BBox pb = random_box(rng, 1), gb = random_box(rng, 1);
      if (i % 2) gb = BBox{0, pb.cx + 0.05, pb.cy - 0.03, pb.w * 1.2, pb.h * 0.9};
      const Jet v = ciou_cxcywh<Jet>(Jet(pb.cx, 0), Jet(pb.cy, 1), Jet(pb.w, 2), Jet(pb.h, 3), gb.cx, gb.cy, gb.w, gb.h);
      std::array<Real, 4> x{pb.cx, pb.cy, pb.w, pb.h};
      Real diff = 0, na = 0, nn = 0;
      for (int k = 0; k < 4; ++k) {
        auto at = [&](Real d) {
          auto y = x;
          y[k] += d;
          return ciou_cxcywh<Real>(y[0], y[1], y[2], y[3], gb.cx, gb.cy, gb.w, gb.h);
        };
        const Real num = (at(1e-7) - at(-1e-7)) / 2e-7;
        diff += (num - v.v[k]) * (num - v.v[k]);
        na += v.v[k] * v.v[k];
        nn += num * num;
      }
      per_op["ciou"].add(std::sqrt(diff / std::max({na, nn, 1e-300})), 1e-4);
    }
    {
      std::vector<Real> z(9), g(9);
      for (Real& v : z) v = std::uniform_real_distribution<Real>(-3, 3)(rng);
      const Real t = std::uniform_real_distribution<Real>(0, 8)(rng);
      dfl_loss(z, t, g);
      Real diff = 0, na = 0;
      for (int k = 0; k < 9; ++k) {
        auto y = z;
        y[k] += 1e-6;
        const Real up = dfl_loss(y, t);
        y[k] -= 2e-6;
        const Real num = (up - dfl_loss(y, t)) / 2e-6;
        diff += (num - g[k]) * (num - g[k]);
        na += g[k] * g[k];
      }
      per_op["dfl"].add(std::sqrt(diff / na), 1e-4);
    }
    {
      const int nc = 1 + i % 3;
      HeadOutput h = random_head(rng, 2, 64, nc, 4);
      std::vector<std::vector<BBox>> gts(2);
      for (auto& img : gts)
        for (int k = 0; k < 3; ++k) img.push_back(random_box(rng, nc, 0.05, 0.7));
      TargetSet ts = assign_targets(gts, h.geometry(), nc, 4);
      std::vector<Tensor> wrt;
      for (const auto& l : h.levels) {
        wrt.push_back(l.cls_logits);
        wrt.push_back(l.box_logits);
      }
      per_op["detection_loss"].add(grad_rel_error([&] { return detection_loss(h, ts).total; }, wrt), 1e-4);
    }
    {
      // end to end: STN + detector + loss w.r.t. every parameter (sampled coordinates)
      ModelConfig mc;
      mc.image_size = 32;
      mc.stn.conv_channels = 2;
      mc.stn.kernel = 3;
      mc.stn.pool_size = 2;
      mc.detector.widths = {4, 4, 8, 8, 8};
      mc.detector.head_width = 4;
      mc.detector.reg_max = 4;
      StnYolo model(mc, 1000 + i);
      for (Real& v : model.stn.fc_weight.mutable_data()) v = std::uniform_real_distribution<Real>(-0.05, 0.05)(rng);
      // Zero biases over a zero background put ReLU inputs exactly on the kink; jitter them off it.
      for (ParamRef p : model.parameters()) {
        if (!p.decay)
          for (Real& v : p.tensor.mutable_data()) v += std::uniform_real_distribution<Real>(-0.05, 0.05)(rng);
      }
      Dataset ds = synth_dataset(500 + i, 2, 32, SynthOptions{1, 1, 2, 0.2, 0.6, 0.05});
      Tensor images = stack_images(ds, {0, 1}, 0, 2);
      std::vector<std::vector<BBox>> gts{ds.samples[0].boxes, ds.samples[1].boxes};
      std::vector<Tensor> wrt;
      for (const ParamRef& p : model.parameters()) wrt.push_back(p.tensor);
      auto f = [&] {
        const ModelOutput out = model.forward(images);
        return detection_loss(out.head, assign_targets(gts, out.head.geometry(), 1, 4)).total;
      };
      per_op["end_to_end"].add(grad_rel_error_sampled(f, wrt, 150, rng), 1e-3);
    }
  }
  Outcome o;
  std::ostringstream os;
  for (const auto& [name, t] : per_op) {
    o.pass &= t.failed == 0 && t.checked >= n;
    os << name << " " << t.checked - t.failed << "/" << t.checked << " worst " << fmt("%.1e", t.worst) << "; ";
  }
  const Real secs = seconds_since(t0);
  o.pass &= secs < 120.0;
  o.detail = os.str() + fmt("%.1fs", secs);
  return o;
}

Outcome stn_identity() {
  std::mt19937_64 rng(202);
  Real worst_theta = 0.0;
  std::size_t mismatches = 0, compared = 0;
  for (int trial = 0; trial < 10; ++trial) {
    LocalizationNet net(LocalizationConfig{}, rng);
    const int h = 64 + 32 * (trial % 3), w = 64 + 32 * ((trial + 1) % 3);
    Tensor x = random_tensor({2, 3, h, w}, rng, 0, 1, false);
    AffineParams theta;
    Tensor y = stn_forward(net, x, &theta);
    for (int b = 0; b < 2; ++b)
      for (int k = 0; k < 6; ++k) worst_theta = std::max(worst_theta, std::abs(theta.item(b)[k] - kIdentityAffine[k]));
    Tensor z = sample(x, generate_grid(AffineParams::identity(2), h, w));
    for (std::size_t i = 0; i < x.numel(); ++i) {
      mismatches += y.data()[i] != x.data()[i];
      mismatches += z.data()[i] != x.data()[i];
      compared += 2;
    }
  }
  return {worst_theta == 0.0 && mismatches == 0,
          fmt("max |theta - I| = %g, %zu of %zu sampled values differ from the input", worst_theta, mismatches, compared)};
}

Outcome inverse_rotation() {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig c;
  c.name = "acceptance_inverse_rotation";
  c.image_size = 64;
  c.stn_enabled = false;
  c.batch_size = 8;
  c.max_epochs = 100000;
  c.early_stop_patience = 100000;
  c.max_steps = 4000;
  c.seed = 1;
  c.dataset.synth_seed = 21;
  c.dataset.synth_train = 512;
  c.dataset.synth_val = 0;
  c.dataset.synth_test = 256;
  c.dataset.synth.margin = 0.16;  // objects stay inside the canvas under a 10 degree turn
  Splits s = load_splits(c);
  s.val.samples.assign(s.train.samples.begin(), s.train.samples.begin() + 4);
  TrainOptions opt;
  opt.write_files = false;
  StnYolo model = train(c, s, opt).model;

  EvalOptions e;
  const MetricsReport clean = evaluate(model, s.test, e).report;
  const Affine2x3 m = content_affine(10.0, 0.0, 0.0, 1.0);
  Dataset rotated;
  rotated.classes = s.test.classes;
  for (const Sample& smp : s.test.samples) {
    rotated.samples.push_back({smp.name, warp_image(smp.image, m), transform_boxes(smp.boxes, m, c.image_size, c.image_size)});
  }
  model.mutable_config().stn_enabled = true;
  model.mutable_config().map_to_input = true;
  model.stn.freeze_to(sampler_theta(invert_affine(m), c.image_size, c.image_size));
  const MetricsReport rot = evaluate(model, rotated, e).report;
  const Real dp = std::abs(rot.precision - clean.precision), dr = std::abs(rot.recall - clean.recall);
  const Real dm = std::abs(rot.map50 - clean.map50);
  const Real secs = seconds_since(t0);
  return {dp <= 0.02 && dr <= 0.02 && dm <= 0.02 && secs < 300.0,
          fmt("clean P %.3f R %.3f mAP50 %.3f; rotated+frozen STN P %.3f R %.3f mAP50 %.3f; |diff| %.3f %.3f %.3f; %.0fs",
              clean.precision, clean.recall, clean.map50, rot.precision, rot.recall, rot.map50, dp, dr, dm, secs)};
}

// DFL cannot go below the entropy of the two-bin target split.
Real dfl_entropy_floor(const Dataset& ds, const TrainConfig& c) {
  std::vector<std::vector<BBox>> gts;
  for (const Sample& s : ds.samples) gts.push_back(s.boxes);
  const TargetSet ts = assign_targets(gts, PyramidGeometry::for_image(c.image_size, c.image_size), ds.n_classes(),
                                      c.detector.reg_max);
  Real total = 0.0;
  for (const CellTarget& cell : ts.cells) {
    for (Real t : cell.ltrb) {
      const Real wr = t - std::floor(t), wl = 1.0 - wr;
      if (wr > 0.0 && wl > 0.0) total += -0.25 * (wl * std::log(wl) + wr * std::log(wr));
    }
  }
  return c.loss.dfl * total / std::max<std::size_t>(ts.cells.size(), 1);
}

Outcome overfit() {
  Outcome o;
  std::ostringstream os;
  for (bool stn : {false, true}) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig c;
    c.name = "acceptance_overfit";
    c.stn_enabled = stn;
    c.image_size = 128;
    c.batch_size = 8;
    c.max_epochs = 500;
    c.early_stop_patience = 500;
    c.max_steps = 500;
    c.seed = 1;
    Splits s;
    s.train = synth_dataset(3, 8, 128);
    TrainOptions opt;
    opt.write_files = false;
    TrainResult r = train(c, s, opt);
    const EpochRecord& last = r.record.epochs.back();
    const MetricsReport final_map = evaluate(r.model, s.train, EvalOptions{}).report;
    const Real floor = dfl_entropy_floor(s.train, c);
    const Real secs = seconds_since(t0);
    const bool ok = last.train_loss < 0.05 && final_map.map50 == 1.0 && last.steps_total <= 500 && secs < 600.0;
    o.pass &= ok;
    os << fmt("stn %s: %ld steps, loss %.4f (cls %.4f box %.4f dfl %.4f; DFL entropy floor %.4f, loss above floor %.4f), "
              "mAP50 %.3f, %.0fs; ",
              stn ? "on" : "off", last.steps_total, last.train_loss, last.train_cls, last.train_box, last.train_dfl, floor,
              last.train_loss - floor, final_map.map50, secs);
  }
  o.detail = os.str();
  return o;
}

Outcome metrics_oracle() {
  std::mt19937_64 rng(505);
  Tally match, pr, ap;
  for (int scene = 0; scene < 200; ++scene) {
    const int nc = 1 + scene % 3;
    Scene s = random_scene(rng, 1 + scene % 4, nc);
    for (std::size_t i = 0; i < s.gts.size(); ++i) {
      const MatchResult m = match_detections(s.dets[i], s.gts[i], 0.5);
      const OracleMatch om = oracle_match(s.dets[i], s.gts[i], 0.5);
      match.add(m.matched_gt == om.matched_gt && m.false_negatives == om.fn ? 0.0 : 1.0, 0.5);
    }
    const MetricsReport r = evaluate_detections(s.dets, s.gts, nc, 0.25);
    const OracleReport orc = oracle_report(s.dets, s.gts, nc, 0.25);
    pr.add(std::max(std::abs(r.precision - orc.precision), std::abs(r.recall - orc.recall)), 1e-9);
    ap.add(std::max(std::abs(r.map50 - orc.map50), std::abs(r.map50_95 - orc.map50_95)), 1e-9);
  }
  return {match.failed + pr.failed + ap.failed == 0,
          fmt("200 scenes: matching disagreements %d/%d, worst P/R diff %.1e, worst AP diff %.1e", match.failed,
              match.checked, pr.worst, ap.worst)};
}

Outcome ciou_dfl_properties() {
  std::mt19937_64 rng(606);
  int range_bad = 0, identical_bad = 0, one_bad = 0, concentric_bad = 0, dfl_bad = 0;
  for (int i = 0; i < 20000; ++i) {
    BBox a = random_box(rng, 1), b = random_box(rng, 1);
    const Real c = ciou(a, b);
    range_bad += !(c > -1.0 && c <= 1.0);
    one_bad += c == 1.0 && !(a == b);
    identical_bad += ciou(a, a) != 1.0;
    const Real f = std::uniform_real_distribution<Real>(0.3, 2.0)(rng);
    BBox d{0, 0.5, 0.5, std::min(a.w * f, 1.0), 0.0};
    d.h = d.w * a.h / a.w;
    BBox e{0, 0.5, 0.5, a.w, a.h};
    if (d.h <= 1.0) concentric_bad += ciou(d, e) != iou(d, e);
    const int bins = 2 + static_cast<int>(rng() % 16);
    std::vector<Real> z(bins, std::uniform_real_distribution<Real>(-5, 5)(rng));
    const Real t = std::uniform_real_distribution<Real>(0, bins - 1)(rng);
    dfl_bad += std::abs(dfl_loss(z, t) - std::log(static_cast<Real>(bins))) > 1e-12;
  }
  return {range_bad + identical_bad + one_bad + concentric_bad + dfl_bad == 0,
          fmt("20000 draws: out of range %d, identical != 1 %d, == 1 for distinct %d, concentric != IoU %d, "
              "uniform DFL != ln(k) %d",
              range_bad, identical_bad, one_bad, concentric_bad, dfl_bad)};
}

Outcome augmentation_grid() {
  const fs::path work = scratch("compare");
  TrainConfig c = tiny_config();
  CompareOptions opt;
  opt.n_runs = 3;
  opt.seed = 7;
  opt.work_dir = work;
  const CompareReport rep = compare(c, opt);
  std::set<std::tuple<bool, bool, bool>> combos;
  bool pairs_ok = rep.rows.size() == 16;
  for (std::size_t i = 0; i + 1 < rep.rows.size(); i += 2) {
    combos.insert({rep.rows[i].augment.rotation, rep.rows[i].augment.shear, rep.rows[i].augment.crop});
    pairs_ok &= rep.rows[i].model == "YOLO" && rep.rows[i + 1].model == "STN-YOLO" &&
                rep.rows[i].augment == rep.rows[i + 1].augment && rep.rows[i].runs.size() == 3;
  }
  const std::string table = format_compare_table(rep);
  const std::regex cell(R"(\d+\.\d\d ± \d+\.\d\d)");
  const auto n_cells = std::distance(std::sregex_iterator(table.begin(), table.end(), cell), std::sregex_iterator());

  // the all-off rows against plain evaluation of the same checkpoints
  const Splits splits = load_splits(c);
  EvalOptions e;
  e.conf_thresh = c.conf_thresh;
  e.nms_iou = c.nms_iou;
  e.score_floor = c.score_floor;
  e.batch_size = c.batch_size;
  bool off_exact = !rep.rows[0].augment.any() && !rep.rows[1].augment.any();
  for (int r = 0; r < 3; ++r) {
    for (int which = 0; which < 2; ++which) {
      const fs::path ck = work / (c.name + (which ? "_stn" : "_yolo") + "_run" + std::to_string(r)) / "best.ckpt";
      const StnYolo m = StnYolo::from_checkpoint(read_checkpoint(ck));
      off_exact &= evaluate(m, splits.test, e).report == rep.rows[which].runs[r];
    }
  }
  std::printf("%s", table.c_str());
  return {combos.size() == 8 && pairs_ok && n_cells == 64 && off_exact,
          fmt("%zu distinct combinations, %zu rows, %ld mean ± std cells, all-off rows equal plain evaluation: %s",
              combos.size(), rep.rows.size(), static_cast<long>(n_cells), off_exact ? "yes" : "no")};
}

Outcome band_fusion() {
  SpectralImage s(2, 2, 16);
  s.set_band(Band::Red, std::vector<std::uint16_t>{0, 100, 200, 300});
  s.set_band(Band::RedEdge, std::vector<std::uint16_t>{0, 0, 0, 0});
  s.set_band(Band::Green, std::vector<std::uint16_t>{300, 0, 0, 0});
  const Tensor t = fuse_bands(s);
  const std::vector<Real> expect{0, 100.0 / 300, 200.0 / 300, 1, 0, 0, 0, 0, 1, 0, 0, 0};
  const bool exact = std::vector<Real>(t.data().begin(), t.data().end()) == expect;
  SpectralImage flat(4, 3, 8);
  for (Band b : {Band::Red, Band::RedEdge, Band::Green}) flat.set_band(b, std::vector<std::uint16_t>(12, 200));
  bool zeros = false;
  try {
    const Tensor z = fuse_bands(flat);
    zeros = std::all_of(z.data().begin(), z.data().end(), [](Real v) { return v == 0.0; });
  } catch (const std::exception&) {
  }
  return {exact && zeros, fmt("worked example exact: %s, constant stack -> zeros without error: %s", exact ? "yes" : "no",
                              zeros ? "yes" : "no")};
}

Outcome eigencam_oracle() {
  std::mt19937_64 rng(909);
  Real worst = 0.0;
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 1 + static_cast<int>(rng() % 8), hw = 2 + static_cast<int>(rng() % 63);
    std::vector<Real> m(static_cast<std::size_t>(c) * hw);
    for (Real& v : m) v = std::uniform_real_distribution<Real>(-1, 1)(rng);
    const PrincipalComponent pc = principal_direction(m, c, hw);
    Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> mat(m.data(), c, hw);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mat.transpose() * mat);
    Eigen::VectorXd v = es.eigenvectors().col(hw - 1);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    Real d = 0.0;
    for (int i = 0; i < hw; ++i) d = std::max(d, std::abs(pc.direction[i] - v(i)));
    worst = std::max(worst, d);
    bad += d >= 1e-6;
  }
  int c1_bad = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Real> f(48);
    for (Real& v : f) v = std::uniform_real_distribution<Real>(0, 4)(rng);
    const Heatmap h = eigencam(Tensor::from({1, 1, 6, 8}, f));
    const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
    for (std::size_t i = 0; i < f.size(); ++i) c1_bad += h.values[i] != (f[i] - *lo) / (*hi - *lo);
  }
  return {bad == 0 && c1_bad == 0,
          fmt("100 stacks: worst |v - v_dense| %.1e (%d over 1e-6); C=1 heatmap mismatches %d", worst, bad, c1_bad)};
}

Outcome determinism_round_trips() {
  std::vector<std::string> problems;
  TrainConfig c = tiny_config();
  c.max_epochs = 2;
  c.early_stop_patience = 2;
  TrainOptions o;
  o.write_files = false;
  auto losses = [&] {
    std::vector<Real> v;
    for (const auto& e : train(c, o).record.epochs) v.insert(v.end(), e.step_losses.begin(), e.step_losses.end());
    return v;
  };
  const auto a = losses(), b = losses();
  if (a != b || a.empty()) problems.push_back("training losses differ between identical runs");

  const fs::path dir = scratch("roundtrip");
  StnYolo model(c.model_config(1), 17);
  write_checkpoint(dir / "m.ckpt", model.to_checkpoint());
  const Checkpoint back = read_checkpoint(dir / "m.ckpt");
  const Checkpoint orig = model.to_checkpoint();
  if (!(back.arrays == orig.arrays) || back.meta != orig.meta) problems.push_back("checkpoint round trip not exact");
  if (!(StnYolo::from_checkpoint(back).config() == model.config())) problems.push_back("model config changed");

  TrainConfig cc = tiny_config();
  cc.lr = 0.0013579;
  cc.train_augment = AugmentSpec{};
  cc.train_augment->crop = true;
  write_text_file:
  {
    std::ofstream(dir / "c.json") << train_config_to_json(cc).dump(2);
  }
  if (!(read_train_config(dir / "c.json") == cc)) problems.push_back("config round trip not exact");

  std::mt19937_64 rng(1010);
  int label_bad = 0;
  for (int f = 0; f < 50; ++f) {
    std::vector<BBox> boxes;
    for (int k = 0; k < 1 + f % 5; ++k) boxes.push_back(random_box(rng, 3, 0.05, 0.5));
    const fs::path p = dir / ("l" + std::to_string(f) + ".txt");
    write_label_file(p, boxes);
    const std::string canon = serialize_labels(read_label_file(p, 3));
    std::ifstream in(p);
    const std::string disk((std::istreambuf_iterator<char>(in)), {});
    label_bad += canon != disk || serialize_labels(load_labels(canon, 3)) != canon;
  }
  if (label_bad) problems.push_back(std::to_string(label_bad) + " of 50 label files not canonical");

  std::string detail = fmt("%zu identical step losses over two runs; checkpoint, config and 50-file label round trips",
                           a.size());
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"STN identity invariance", stn_identity},
      {"STN inverse-transform restoration", inverse_rotation},
      {"overfit smoke test", overfit},
      {"metrics oracle equivalence", metrics_oracle},
      {"CIOU/DFL properties", ciou_dfl_properties},
      {"augmentation grid fidelity", augmentation_grid},
      {"band-fusion exactness", band_fusion},
      {"EigenCAM oracle", eigencam_oracle},
      {"determinism and round trips", determinism_round_trips},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures;
}
