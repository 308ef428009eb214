#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stnyolo/augment.hpp"
#include "stnyolo/data_io.hpp"
#include "stnyolo/detector.hpp"
#include "stnyolo/metrics.hpp"
#include "stnyolo/model.hpp"
#include "stnyolo/optim.hpp"

namespace stnyolo {

/// Where the images come from: a YOLO tree on disk or the synthetic generator.
struct DatasetSpec {
  std::string root;            // empty -> synthetic
  std::string train_split = "train";
  std::string val_split = "valid";
  std::string test_split = "test";
  // synthetic generator
  std::uint64_t synth_seed = 0;
  int synth_train = 8;
  int synth_val = 8;
  int synth_test = 8;
  SynthOptions synth;

  bool synthetic() const { return root.empty(); }
  bool operator==(const DatasetSpec& o) const;
};

struct TrainConfig {
  std::string name = "run";
  Real lr = 0.002;
  int batch_size = 16;
  int max_epochs = 100;
  int early_stop_patience = 50;
  long max_steps = 0;           // 0: no step cap
  std::uint64_t seed = 0;
  bool stn_enabled = true;
  int stn_pool_size = 28;
  int image_size = 128;
  Real weight_decay = 5e-4;
  LossWeights loss;
  DetectorConfig detector;      // n_classes is taken from the dataset
  DatasetSpec dataset;
  std::optional<AugmentSpec> train_augment;  // test-time only unless set
  Real conf_thresh = 0.25;      // precision / recall operating point
  Real nms_iou = 0.7;
  Real score_floor = 0.001;     // candidates kept for AP
  bool map_to_input = false;

  /// Throws ValueError on non-positive hyperparameters or patience > max_epochs.
  void validate() const;
  ModelConfig model_config(int n_classes) const;
  bool operator==(const TrainConfig& o) const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
/// Missing keys keep defaults; unknown keys throw ValueError.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig read_train_config(const std::filesystem::path& path);

/// FNV-1a (hex) of the canonical config JSON plus the library version.
std::string config_hash(const TrainConfig& c);

/// Output root from $STNYOLO_OUTPUT_ROOT, default "runs".
std::filesystem::path output_root();

struct Splits {
  Dataset train, val, test;
};

/// Materializes all three splits at the configured image size. Throws IoError
/// for an empty training split.
Splits load_splits(const TrainConfig& c);

/// Stacks samples [first, first + count) of `order` into (B, 3, H, W).
Tensor stack_images(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t first, std::size_t count);

/// Shuffled sample order for one epoch, derived from (seed, epoch) only.
std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n);

struct EvalOptions {
  Real conf_thresh = 0.25;
  Real nms_iou = 0.7;
  Real score_floor = 0.001;
  int batch_size = 16;
  std::optional<AugmentSpec> augment;
};

struct EvalResult {
  MetricsReport report;
  std::vector<std::vector<Detection>> detections;
};

/// Deterministic pass over the (optionally augmented) dataset.
EvalResult evaluate(const StnYolo& model, const Dataset& dataset, const EvalOptions& opt = {});

struct EpochRecord {
  int epoch = 0;
  Real train_loss = 0.0;            // mean over the epoch's steps
  Real train_cls = 0.0, train_box = 0.0, train_dfl = 0.0;
  std::vector<Real> step_losses;
  MetricsReport val;
  bool best = false;
  Real wall_clock_s = 0.0;
  long steps_total = 0;
};

struct RunRecord {
  nlohmann::json config;
  std::string config_hash;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  Real best_map50 = -1.0;
  std::string stop_reason;
};

nlohmann::json epoch_to_json(const EpochRecord& e);
EpochRecord epoch_from_json(const nlohmann::json& j);

struct TrainOptions {
  std::filesystem::path run_dir;   // empty -> output_root()/name
  bool resume = false;             // continue from run_dir/last.ckpt when present
  bool write_files = true;
  int stop_after_epochs = 0;       // simulate an interruption (0: off)
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  RunRecord record;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path record_path;
  StnYolo model;        // final weights
  StnYolo best_model;   // weights of the best epoch
};

/// AdamW over seeded shuffled batches, validation mAP@0.5 after every epoch,
/// early stop after `early_stop_patience` epochs without improvement, step
/// cap `max_steps`. Aborts with a diagnostic file on a non-finite loss.
TrainResult train(const TrainConfig& config, const TrainOptions& options = {});
TrainResult train(const TrainConfig& config, const Splits& splits, const TrainOptions& options = {});

/// One optimizer step on a batch; returns the loss breakdown.
LossBreakdown train_step(const StnYolo& model, const Tensor& images, const std::vector<std::vector<BBox>>& boxes,
                         const LossWeights& weights, const std::vector<ParamRef>& params, OptimState& state);

struct MetricStat {
  Real mean = 0.0;
  Real stddev = 0.0;  // population (ddof 0)
};

MetricStat mean_std(const std::vector<Real>& values);

struct CompareRow {
  AugmentSpec augment;
  std::string model;  // "YOLO" or "STN-YOLO"
  std::vector<MetricsReport> runs;
  MetricStat precision, recall, map50, map50_95;
};

struct CompareReport {
  int n_runs = 0;
  std::uint64_t seed = 0;
  std::vector<CompareRow> rows;  // 8 augment rows x 2 models, table order
};

struct CompareOptions {
  int n_runs = 3;
  std::uint64_t seed = 0;
  AugmentSpec augment;                      // ranges; flags are overridden per row
  std::optional<std::filesystem::path> yolo_checkpoint;
  std::optional<std::filesystem::path> stn_checkpoint;
  std::filesystem::path work_dir;           // checkpoints of trained runs
};

/// For each run r: seed + r drives model init, data order and augmentation
/// draws. Models are trained from `config` unless checkpoints are given.
CompareReport compare(const TrainConfig& config, const CompareOptions& options);
CompareReport compare_models(const std::vector<std::pair<StnYolo, StnYolo>>& runs, const Dataset& test,
                             const EvalOptions& eval, const AugmentSpec& base, std::uint64_t seed);

nlohmann::json compare_to_json(const CompareReport& r);
/// Aligned text table, values in percent as "mean ± std".
std::string format_compare_table(const CompareReport& r);

/// Report document for one evaluation (metrics plus the echoed augment block).
nlohmann::json eval_report_json(const MetricsReport& r, const std::optional<AugmentSpec>& augment,
                                const std::string& checkpoint);

}  // namespace stnyolo
