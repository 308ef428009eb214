#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "stnyolo/checkpoint.hpp"
#include "stnyolo/detector.hpp"
#include "stnyolo/stn.hpp"

namespace stnyolo {

struct ModelConfig {
  bool stn_enabled = true;
  LocalizationConfig stn;
  DetectorConfig detector;
  int image_size = 128;
  /// Map detections found on the STN output back through theta into the
  /// input frame. Off by default: boxes are reported in the warped frame.
  bool map_to_input = false;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ModelOutput {
  Tensor warped;                     // detector input (the image itself when the STN is off)
  std::optional<AffineParams> theta; // present when the STN is on
  HeadOutput head;
};

/// Optional STN in front of the detector.
class StnYolo {
 public:
  StnYolo(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  ModelOutput forward(const Tensor& images) const;
  std::vector<ParamRef> parameters() const;

  /// Decoded, NMS-filtered detections per image of the batch.
  std::vector<std::vector<Detection>> detect(const Tensor& images, Real conf_thresh, Real iou_thresh) const;

  /// Weights plus the model config under meta["model"].
  Checkpoint to_checkpoint() const;
  /// Copies weights in; throws ShapeError when a stored array is missing or
  /// its shape differs.
  void load_weights(const Checkpoint& ckpt);
  static StnYolo from_checkpoint(const Checkpoint& ckpt);

  LocalizationNet stn;
  Detector detector;

 private:
  ModelConfig config_;
};

/// Deterministic generator shared by model construction.
std::mt19937_64 make_rng(std::uint64_t seed);

}  // namespace stnyolo
