#include "stnyolo/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>

#include "stnyolo/errors.hpp"

namespace stnyolo {

namespace {

std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

struct RankedDet {
  Real score;
  std::size_t image;
  std::size_t index;
};

Real average_precision_impl(const ImageDetections& dets, const ImageBoxes& gts, Real iou_thresh,
                            std::optional<int> class_id) {
  if (dets.size() != gts.size()) throw ValueError("detections and ground truth cover different image counts");
  auto wanted = [&](int c) { return !class_id || *class_id == c; };

  std::size_t n_gt = 0;
  for (const auto& img : gts)
    for (const BBox& b : img) n_gt += wanted(b.class_id) ? 1 : 0;
  std::vector<RankedDet> ranked;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t k = 0; k < dets[i].size(); ++k)
      if (wanted(dets[i][k].bbox.class_id)) ranked.push_back({dets[i][k].score, i, k});
  if (n_gt == 0) return ranked.empty() ? 1.0 : 0.0;
  if (ranked.empty()) return 0.0;
  std::stable_sort(ranked.begin(), ranked.end(), [](const RankedDet& a, const RankedDet& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> taken(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);

  std::vector<Real> precision(ranked.size()), recall(ranked.size());
  std::size_t tp = 0, fp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const Detection& d = dets[ranked[r].image][ranked[r].index];
    const auto& img_gts = gts[ranked[r].image];
    int best = -1;
    Real best_iou = iou_thresh;
    for (std::size_t g = 0; g < img_gts.size(); ++g) {
      if (taken[ranked[r].image][g] || img_gts[g].class_id != d.bbox.class_id) continue;
      const Real v = iou(d.bbox, img_gts[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[ranked[r].image][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision[r] = static_cast<Real>(tp) / static_cast<Real>(tp + fp);
    recall[r] = static_cast<Real>(tp) / static_cast<Real>(n_gt);
  }
  for (std::size_t r = precision.size() - 1; r > 0; --r) precision[r - 1] = std::max(precision[r - 1], precision[r]);

  Real total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const Real threshold = k / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), threshold);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

}  // namespace

int MatchResult::true_positives() const { return static_cast<int>(std::count(is_tp.begin(), is_tp.end(), true)); }

int MatchResult::false_positives() const { return static_cast<int>(is_tp.size()) - true_positives(); }

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<BBox>& gts, Real iou_thresh) {
  MatchResult m;
  m.iou_thresh = iou_thresh;
  m.is_tp.assign(dets.size(), false);
  m.matched_gt.assign(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d : score_order(dets)) {
    int best = -1;
    Real best_iou = iou_thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != dets[d].bbox.class_id) continue;
      const Real v = iou(dets[d].bbox, gts[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      m.is_tp[d] = true;
      m.matched_gt[d] = best;
    }
  }
  m.false_negatives = static_cast<int>(std::count(taken.begin(), taken.end(), false));
  return m;
}

PrecisionRecall precision_recall(int tp, int fp, int fn) {
  PrecisionRecall pr;
  pr.precision = (tp + fp) == 0 ? 1.0 : static_cast<Real>(tp) / static_cast<Real>(tp + fp);
  pr.recall = (tp + fn) == 0 ? 1.0 : static_cast<Real>(tp) / static_cast<Real>(tp + fn);
  return pr;
}

PrecisionRecall precision_recall(const MatchResult& m) {
  return precision_recall(m.true_positives(), m.false_positives(), m.false_negatives);
}

Real average_precision(const ImageDetections& dets, const ImageBoxes& gts, Real iou_thresh) {
  return average_precision_impl(dets, gts, iou_thresh, std::nullopt);
}

Real average_precision(const ImageDetections& dets, const ImageBoxes& gts, Real iou_thresh, int class_id) {
  return average_precision_impl(dets, gts, iou_thresh, class_id);
}

MetricsReport evaluate_detections(const ImageDetections& dets, const ImageBoxes& gts, int n_classes,
                                  Real conf_thresh) {
  if (dets.size() != gts.size()) throw ValueError("detections and ground truth cover different image counts");
  if (n_classes <= 0) throw ValueError("n_classes must be positive");
  auto check_class = [&](int c) {
    if (c < 0 || c >= n_classes) throw ValueError("class id " + std::to_string(c) + " outside vocabulary");
  };

  MetricsReport rep;
  rep.conf_thresh = conf_thresh;
  rep.n_images = static_cast<int>(gts.size());
  std::vector<ClassMetrics> cls(static_cast<std::size_t>(n_classes));
  std::vector<int> tp(cls.size(), 0), fp(cls.size(), 0), fn(cls.size(), 0);
  for (int c = 0; c < n_classes; ++c) cls[static_cast<std::size_t>(c)].class_id = c;

  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const BBox& b : gts[i]) {
      check_class(b.class_id);
      ++cls[static_cast<std::size_t>(b.class_id)].n_gt;
    }
    std::vector<Detection> confident;
    for (const Detection& d : dets[i]) {
      check_class(d.bbox.class_id);
      ++cls[static_cast<std::size_t>(d.bbox.class_id)].n_det;
      if (d.score >= conf_thresh) confident.push_back(d);
    }
    const MatchResult m = match_detections(confident, gts[i], 0.5);
    std::vector<bool> gt_hit(gts[i].size(), false);
    for (std::size_t k = 0; k < confident.size(); ++k) {
      const auto c = static_cast<std::size_t>(confident[k].bbox.class_id);
      if (m.is_tp[k]) {
        ++tp[c];
        gt_hit[static_cast<std::size_t>(m.matched_gt[k])] = true;
      } else {
        ++fp[c];
      }
    }
    for (std::size_t g = 0; g < gts[i].size(); ++g) {
      if (!gt_hit[g]) ++fn[static_cast<std::size_t>(gts[i][g].class_id)];
    }
  }

  Real sum_p = 0.0, sum_r = 0.0, sum_ap50 = 0.0, sum_ap = 0.0;
  int active = 0;
  for (std::size_t c = 0; c < cls.size(); ++c) {
    ClassMetrics& cm = cls[c];
    rep.true_positives += tp[c];
    rep.false_positives += fp[c];
    rep.false_negatives += fn[c];
    rep.n_gt += cm.n_gt;
    rep.n_det += cm.n_det;
    if (cm.n_gt == 0 && cm.n_det == 0) continue;
    const PrecisionRecall pr = precision_recall(tp[c], fp[c], fn[c]);
    cm.precision = pr.precision;
    cm.recall = pr.recall;
    cm.ap50 = average_precision(dets, gts, 0.5, static_cast<int>(c));
    Real ap_sum = 0.0;
    for (int k = 0; k < 10; ++k) ap_sum += average_precision(dets, gts, 0.5 + 0.05 * k, static_cast<int>(c));
    cm.ap50_95 = ap_sum / 10.0;
    sum_p += cm.precision;
    sum_r += cm.recall;
    sum_ap50 += cm.ap50;
    sum_ap += cm.ap50_95;
    ++active;
    rep.per_class.push_back(cm);
  }
  if (active > 0) {
    rep.precision = sum_p / active;
    rep.recall = sum_r / active;
    rep.map50 = sum_ap50 / active;
    rep.map50_95 = sum_ap / active;
  }
  return rep;
}

nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["map50"] = r.map50;
  j["map50_95"] = r.map50_95;
  j["conf_thresh"] = r.conf_thresh;
  j["counts"] = {{"true_positives", r.true_positives}, {"false_positives", r.false_positives},
                 {"false_negatives", r.false_negatives}, {"images", r.n_images},
                 {"ground_truth", r.n_gt}, {"detections", r.n_det}};
  j["per_class"] = nlohmann::json::array();
  for (const ClassMetrics& c : r.per_class) {
    j["per_class"].push_back({{"class_id", c.class_id}, {"n_gt", c.n_gt}, {"n_det", c.n_det},
                              {"precision", c.precision}, {"recall", c.recall}, {"ap50", c.ap50},
                              {"ap50_95", c.ap50_95}});
  }
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.precision = j.at("precision").get<Real>();
  r.recall = j.at("recall").get<Real>();
  r.map50 = j.at("map50").get<Real>();
  r.map50_95 = j.at("map50_95").get<Real>();
  r.conf_thresh = j.at("conf_thresh").get<Real>();
  const auto& c = j.at("counts");
  r.true_positives = c.at("true_positives").get<int>();
  r.false_positives = c.at("false_positives").get<int>();
  r.false_negatives = c.at("false_negatives").get<int>();
  r.n_images = c.at("images").get<int>();
  r.n_gt = c.at("ground_truth").get<int>();
  r.n_det = c.at("detections").get<int>();
  for (const auto& e : j.at("per_class")) {
    ClassMetrics m;
    m.class_id = e.at("class_id").get<int>();
    m.n_gt = e.at("n_gt").get<int>();
    m.n_det = e.at("n_det").get<int>();
    m.precision = e.at("precision").get<Real>();
    m.recall = e.at("recall").get<Real>();
    m.ap50 = e.at("ap50").get<Real>();
    m.ap50_95 = e.at("ap50_95").get<Real>();
    r.per_class.push_back(m);
  }
  return r;
}

std::string format_report_table(const MetricsReport& r, const std::string& label) {
  char line[256];
  std::ostringstream os;
  std::snprintf(line, sizeof line, "%-12s %10s %10s %10s %14s\n", "Model", "Precision", "Recall", "mAP@0.5",
                "mAP@0.5:0.95");
  os << line;
  std::snprintf(line, sizeof line, "%-12s %10.2f %10.2f %10.2f %14.2f\n", label.c_str(), 100.0 * r.precision,
                100.0 * r.recall, 100.0 * r.map50, 100.0 * r.map50_95);
  os << line;
  return os.str();
}

}  // namespace stnyolo
