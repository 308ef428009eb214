#include "stnyolo/model.hpp"

#include <algorithm>

#include "stnyolo/augment.hpp"
#include "stnyolo/errors.hpp"

namespace stnyolo {

namespace {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; })) {
      throw ValueError("unknown key '" + k + "' in " + where);
    }
  }
}

}  // namespace

std::mt19937_64 make_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5354u};
  return std::mt19937_64(seq);
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"stn_enabled", c.stn_enabled},
          {"image_size", c.image_size},
          {"map_to_input", c.map_to_input},
          {"stn", {{"conv_channels", c.stn.conv_channels}, {"kernel", c.stn.kernel}, {"pool_size", c.stn.pool_size}}},
          {"detector",
           {{"n_classes", c.detector.n_classes},
            {"reg_max", c.detector.reg_max},
            {"widths", c.detector.widths},
            {"head_width", c.detector.head_width},
            {"prior_prob", c.detector.prior_prob}}}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"stn_enabled", "image_size", "map_to_input", "stn", "detector"}, "model config");
  ModelConfig c;
  read_opt(j, "stn_enabled", c.stn_enabled);
  read_opt(j, "image_size", c.image_size);
  read_opt(j, "map_to_input", c.map_to_input);
  if (j.contains("stn")) {
    const auto& s = j.at("stn");
    reject_unknown(s, {"conv_channels", "kernel", "pool_size"}, "stn config");
    read_opt(s, "conv_channels", c.stn.conv_channels);
    read_opt(s, "kernel", c.stn.kernel);
    read_opt(s, "pool_size", c.stn.pool_size);
  }
  if (j.contains("detector")) {
    const auto& d = j.at("detector");
    reject_unknown(d, {"n_classes", "reg_max", "widths", "head_width", "prior_prob"}, "detector config");
    read_opt(d, "n_classes", c.detector.n_classes);
    read_opt(d, "reg_max", c.detector.reg_max);
    read_opt(d, "widths", c.detector.widths);
    read_opt(d, "head_width", c.detector.head_width);
    read_opt(d, "prior_prob", c.detector.prior_prob);
  }
  if (c.image_size <= 0 || c.image_size % 32 != 0) throw ValueError("image_size must be a positive multiple of 32");
  return c;
}

StnYolo::StnYolo(const ModelConfig& config, std::uint64_t seed)
    : stn([&] {
        auto rng = make_rng(seed);
        return LocalizationNet(config.stn, rng);
      }()),
      detector([&] {
        // Continue the same stream the localization net drew from.
        auto rng = make_rng(seed);
        LocalizationNet skip(config.stn, rng);
        return Detector(config.detector, rng);
      }()),
      config_(config) {
  if (config.stn.in_channels != 3) throw ValueError("the localization net reads RGB input");
}

ModelOutput StnYolo::forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("model expects (N, 3, H, W), got " + shape_str(images.shape()));
  ModelOutput out;
  if (config_.stn_enabled) {
    AffineParams theta;
    out.warped = stn_forward(stn, images, &theta);
    out.theta = theta;
  } else {
    out.warped = images;
  }
  out.head = detector.forward(out.warped);
  return out;
}

std::vector<ParamRef> StnYolo::parameters() const {
  std::vector<ParamRef> params;
  if (config_.stn_enabled) params = stn.parameters("stn");
  const auto det = detector.parameters("det");
  params.insert(params.end(), det.begin(), det.end());
  return params;
}

std::vector<std::vector<Detection>> StnYolo::detect(const Tensor& images, Real conf_thresh, Real iou_thresh) const {
  const ModelOutput out = forward(images.detach());
  const int h = images.dim(2), w = images.dim(3);
  std::vector<std::vector<Detection>> dets;
  for (int n = 0; n < images.dim(0); ++n) {
    auto found = decode_and_nms(out.head, conf_thresh, iou_thresh, n);
    if (config_.map_to_input && out.theta) {
      // Content at output q was read from input theta(q).
      found = transform_detections(found, theta_to_pixel(out.theta->item(n), w, h), w, h);
    }
    dets.push_back(std::move(found));
  }
  return dets;
}

Checkpoint StnYolo::to_checkpoint() const {
  Checkpoint ck;
  ck.meta["model"] = model_config_to_json(config_);
  auto add = [&](const std::vector<ParamRef>& ps) {
    for (const ParamRef& p : ps) {
      auto d = p.tensor.data();
      ck.arrays.push_back({p.name, p.tensor.shape(), {d.begin(), d.end()}});
    }
  };
  add(stn.parameters("stn"));
  add(detector.parameters("det"));
  return ck;
}

void StnYolo::load_weights(const Checkpoint& ckpt) {
  auto load = [&](const std::vector<ParamRef>& ps) {
    for (const ParamRef& p : ps) {
      const StoredArray* a = ckpt.find(p.name);
      if (!a) throw ShapeError("checkpoint lacks parameter " + p.name);
      if (a->shape != p.tensor.shape()) {
        throw ShapeError("parameter " + p.name + " has shape " + shape_str(a->shape) + " in the checkpoint, model expects " +
                         shape_str(p.tensor.shape()));
      }
      Tensor t = p.tensor;
      std::copy(a->values.begin(), a->values.end(), t.mutable_data().begin());
    }
  };
  load(stn.parameters("stn"));
  load(detector.parameters("det"));
}

StnYolo StnYolo::from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("model")) throw ValueError("checkpoint has no model config");
  StnYolo m(model_config_from_json(ckpt.meta.at("model")), 0);
  m.load_weights(ckpt);
  return m;
}

}  // namespace stnyolo
