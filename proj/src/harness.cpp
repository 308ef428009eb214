#include "stnyolo/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "stnyolo/checkpoint.hpp"
#include "stnyolo/errors.hpp"

namespace stnyolo {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kLibraryVersion = "stnyolo-0.1";

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ValueError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; })) {
      throw ValueError("unknown key '" + k + "' in " + where);
    }
  }
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

json dataset_to_json(const DatasetSpec& d) {
  if (!d.synthetic()) {
    return {{"root", d.root}, {"train", d.train_split}, {"val", d.val_split}, {"test", d.test_split}};
  }
  return {{"synthetic",
           {{"seed", d.synth_seed},
            {"train", d.synth_train},
            {"val", d.synth_val},
            {"test", d.synth_test},
            {"n_classes", d.synth.n_classes},
            {"min_objects", d.synth.min_objects},
            {"max_objects", d.synth.max_objects},
            {"min_size", d.synth.min_size},
            {"max_size", d.synth.max_size},
            {"margin", d.synth.margin}}}};
}

DatasetSpec dataset_from_json(const json& j) {
  reject_unknown(j, {"root", "train", "val", "test", "synthetic"}, "dataset");
  DatasetSpec d;
  if (j.contains("synthetic") == j.contains("root")) throw ValueError("dataset needs exactly one of 'root' or 'synthetic'");
  if (j.contains("root")) {
    d.root = j.at("root").get<std::string>();
    if (d.root.empty()) throw ValueError("dataset root must not be empty");
    read_opt(j, "train", d.train_split);
    read_opt(j, "val", d.val_split);
    read_opt(j, "test", d.test_split);
    return d;
  }
  const json& s = j.at("synthetic");
  reject_unknown(s, {"seed", "train", "val", "test", "n_classes", "min_objects", "max_objects", "min_size", "max_size", "margin"},
                 "synthetic dataset");
  read_opt(s, "seed", d.synth_seed);
  read_opt(s, "train", d.synth_train);
  read_opt(s, "val", d.synth_val);
  read_opt(s, "test", d.synth_test);
  read_opt(s, "n_classes", d.synth.n_classes);
  read_opt(s, "min_objects", d.synth.min_objects);
  read_opt(s, "max_objects", d.synth.max_objects);
  read_opt(s, "min_size", d.synth.min_size);
  read_opt(s, "max_size", d.synth.max_size);
  read_opt(s, "margin", d.synth.margin);
  return d;
}

json loss_to_json(const LossWeights& w) { return {{"cls", w.cls}, {"box", w.box}, {"dfl", w.dfl}}; }

std::vector<std::vector<BBox>> batch_boxes(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t first,
                                           std::size_t count) {
  std::vector<std::vector<BBox>> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(ds.samples[order[first + k]].boxes);
  return out;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os << text;
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint training_checkpoint(const StnYolo& model, const std::vector<ParamRef>& params, const OptimState& state,
                               const json& train_meta) {
  Checkpoint ck = model.to_checkpoint();
  ck.meta["train"] = train_meta;
  ck.meta["optim"] = {{"step", state.step},
                      {"lr", state.hyper.lr},
                      {"beta1", state.hyper.beta1},
                      {"beta2", state.hyper.beta2},
                      {"eps", state.hyper.eps},
                      {"weight_decay", state.hyper.weight_decay}};
  for (std::size_t i = 0; i < params.size(); ++i) {
    const int n = static_cast<int>(state.first_moment[i].size());
    ck.arrays.push_back({"optim.m/" + params[i].name, {n}, state.first_moment[i]});
    ck.arrays.push_back({"optim.v/" + params[i].name, {n}, state.second_moment[i]});
  }
  return ck;
}

void restore_optim(const Checkpoint& ck, const std::vector<ParamRef>& params, OptimState& state) {
  const json& o = ck.meta.at("optim");
  state.step = o.at("step").get<std::int64_t>();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const StoredArray* m = ck.find("optim.m/" + params[i].name);
    const StoredArray* v = ck.find("optim.v/" + params[i].name);
    if (!m || !v || m->values.size() != state.first_moment[i].size() || v->values.size() != state.second_moment[i].size()) {
      throw ShapeError("checkpoint optimizer state does not match parameter " + params[i].name);
    }
    state.first_moment[i] = m->values;
    state.second_moment[i] = v->values;
  }
}

std::string fmt_stat(const MetricStat& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * s.mean, 100.0 * s.stddev);
  return buf;
}

json stat_json(const MetricStat& s) { return {{"mean", s.mean}, {"std", s.stddev}}; }

}  // namespace

// ---------------------------------------------------------------------------
// Config

bool DatasetSpec::operator==(const DatasetSpec& o) const { return dataset_to_json(*this) == dataset_to_json(o); }

bool TrainConfig::operator==(const TrainConfig& o) const { return train_config_to_json(*this) == train_config_to_json(o); }

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValueError("lr must be a non-negative finite number");
  if (batch_size <= 0) throw ValueError("batch_size must be positive");
  if (max_epochs <= 0) throw ValueError("max_epochs must be positive");
  if (early_stop_patience <= 0) throw ValueError("early_stop_patience must be positive");
  if (early_stop_patience > max_epochs) throw ValueError("early_stop_patience must not exceed max_epochs");
  if (max_steps < 0) throw ValueError("max_steps must be non-negative");
  if (stn_pool_size <= 0) throw ValueError("stn_pool_size must be positive");
  if (image_size <= 0 || image_size % 32 != 0) throw ValueError("image_size must be a positive multiple of 32");
  if (!(weight_decay >= 0.0)) throw ValueError("weight_decay must be non-negative");
  if (!(loss.cls >= 0.0 && loss.box >= 0.0 && loss.dfl >= 0.0)) throw ValueError("loss weights must be non-negative");
  if (!(conf_thresh >= 0.0 && conf_thresh <= 1.0 && nms_iou > 0.0 && nms_iou <= 1.0 && score_floor >= 0.0 &&
        score_floor <= conf_thresh)) {
    throw ValueError("thresholds must lie in [0, 1] with score_floor <= conf_thresh");
  }
  if (dataset.synthetic() && (dataset.synth_train <= 0 || dataset.synth_val < 0 || dataset.synth_test < 0)) {
    throw ValueError("synthetic split sizes must be positive");
  }
  if (train_augment) train_augment->validate();
}

ModelConfig TrainConfig::model_config(int n_classes) const {
  ModelConfig m;
  m.stn_enabled = stn_enabled;
  m.stn.pool_size = stn_pool_size;
  m.detector = detector;
  m.detector.n_classes = n_classes;
  m.image_size = image_size;
  m.map_to_input = map_to_input;
  return m;
}

json train_config_to_json(const TrainConfig& c) {
  return {{"name", c.name},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"max_steps", c.max_steps},
          {"seed", c.seed},
          {"stn_enabled", c.stn_enabled},
          {"stn_pool_size", c.stn_pool_size},
          {"image_size", c.image_size},
          {"weight_decay", c.weight_decay},
          {"loss_weights", loss_to_json(c.loss)},
          {"detector",
           {{"reg_max", c.detector.reg_max},
            {"widths", c.detector.widths},
            {"head_width", c.detector.head_width},
            {"prior_prob", c.detector.prior_prob}}},
          {"dataset", dataset_to_json(c.dataset)},
          {"train_augment", c.train_augment ? augment_to_json(*c.train_augment) : json(nullptr)},
          {"conf_thresh", c.conf_thresh},
          {"nms_iou", c.nms_iou},
          {"score_floor", c.score_floor},
          {"map_to_input", c.map_to_input}};
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j, {"name", "lr", "batch_size", "max_epochs", "early_stop_patience", "max_steps", "seed", "stn_enabled",
                     "stn_pool_size", "image_size", "weight_decay", "loss_weights", "detector", "dataset",
                     "train_augment", "conf_thresh", "nms_iou", "score_floor", "map_to_input"},
                 "train config");
  TrainConfig c;
  try {
    read_opt(j, "name", c.name);
    read_opt(j, "lr", c.lr);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "max_epochs", c.max_epochs);
    read_opt(j, "early_stop_patience", c.early_stop_patience);
    read_opt(j, "max_steps", c.max_steps);
    read_opt(j, "seed", c.seed);
    read_opt(j, "stn_enabled", c.stn_enabled);
    read_opt(j, "stn_pool_size", c.stn_pool_size);
    read_opt(j, "image_size", c.image_size);
    read_opt(j, "weight_decay", c.weight_decay);
    read_opt(j, "conf_thresh", c.conf_thresh);
    read_opt(j, "nms_iou", c.nms_iou);
    read_opt(j, "score_floor", c.score_floor);
    read_opt(j, "map_to_input", c.map_to_input);
    if (j.contains("loss_weights")) {
      const json& w = j.at("loss_weights");
      reject_unknown(w, {"cls", "box", "dfl"}, "loss_weights");
      read_opt(w, "cls", c.loss.cls);
      read_opt(w, "box", c.loss.box);
      read_opt(w, "dfl", c.loss.dfl);
    }
    if (j.contains("detector")) {
      const json& d = j.at("detector");
      reject_unknown(d, {"reg_max", "widths", "head_width", "prior_prob"}, "detector");
      read_opt(d, "reg_max", c.detector.reg_max);
      read_opt(d, "widths", c.detector.widths);
      read_opt(d, "head_width", c.detector.head_width);
      read_opt(d, "prior_prob", c.detector.prior_prob);
    }
    if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("train_augment") && !j.at("train_augment").is_null()) {
      c.train_augment = augment_from_json(j.at("train_augment"));
    }
  } catch (const json::exception& e) {
    throw ValueError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig read_train_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ValueError(path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

std::string config_hash(const TrainConfig& c) {
  const std::string text = train_config_to_json(c).dump() + "\n" + kLibraryVersion;
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path output_root() {
  const char* env = std::getenv("STNYOLO_OUTPUT_ROOT");
  return (env && *env) ? fs::path(env) : fs::path("runs");
}

// ---------------------------------------------------------------------------
// Data

Splits load_splits(const TrainConfig& c) {
  Splits s;
  const DatasetSpec& d = c.dataset;
  if (d.synthetic()) {
    s.train = synth_dataset(d.synth_seed, d.synth_train, c.image_size, d.synth);
    s.val = synth_dataset(mix64(d.synth_seed ^ 0x56414CULL), d.synth_val, c.image_size, d.synth);
    s.test = synth_dataset(mix64(d.synth_seed ^ 0x54455354ULL), d.synth_test, c.image_size, d.synth);
    return s;
  }
  s.train = materialize_dataset(load_dataset(d.root, d.train_split), c.image_size);
  auto optional_split = [&](const std::string& split) {
    if (!fs::is_directory(fs::path(d.root) / "images" / split)) return Dataset{{}, s.train.classes};
    return materialize_dataset(load_dataset(d.root, split), c.image_size);
  };
  s.val = optional_split(d.val_split);
  s.test = optional_split(d.test_split);
  return s;
}

Tensor stack_images(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t first, std::size_t count) {
  if (count == 0) throw ShapeError("empty batch");
  const Tensor& ref = ds.samples[order[first]].image;
  const int h = ref.dim(2), w = ref.dim(3);
  std::vector<Real> data;
  data.reserve(count * 3 * static_cast<std::size_t>(h) * w);
  for (std::size_t k = 0; k < count; ++k) {
    const Tensor& img = ds.samples[order[first + k]].image;
    if (img.dim(2) != h || img.dim(3) != w) throw ShapeError("batch images differ in size");
    auto d = img.data();
    data.insert(data.end(), d.begin(), d.end());
  }
  return Tensor::from({static_cast<int>(count), 3, h, w}, std::move(data));
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix64(seed ^ mix64(static_cast<std::uint64_t>(epoch) + 0x45504F43ULL)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate(const StnYolo& model, const Dataset& dataset, const EvalOptions& opt) {
  if (dataset.samples.empty()) throw ValueError("cannot evaluate an empty dataset");
  if (dataset.n_classes() != model.config().detector.n_classes) {
    throw ShapeError("dataset has " + std::to_string(dataset.n_classes()) + " classes, model predicts " +
                     std::to_string(model.config().detector.n_classes));
  }
  const Dataset aug = (opt.augment && opt.augment->any()) ? augment_testset(dataset, *opt.augment) : Dataset{};
  const Dataset& ds = (opt.augment && opt.augment->any()) ? aug : dataset;
  EvalResult res;
  std::vector<std::size_t> order(ds.samples.size());
  std::iota(order.begin(), order.end(), 0);
  ImageBoxes gts;
  const std::size_t bs = static_cast<std::size_t>(std::max(1, opt.batch_size));
  for (std::size_t first = 0; first < order.size(); first += bs) {
    const std::size_t count = std::min(bs, order.size() - first);
    auto dets = model.detect(stack_images(ds, order, first, count), opt.score_floor, opt.nms_iou);
    for (auto& d : dets) res.detections.push_back(std::move(d));
  }
  for (const Sample& s : ds.samples) gts.push_back(s.boxes);
  res.report = evaluate_detections(res.detections, gts, ds.n_classes(), opt.conf_thresh);
  return res;
}

// ---------------------------------------------------------------------------
// Training

json epoch_to_json(const EpochRecord& e) {
  return {{"type", "epoch"},
          {"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"train_cls", e.train_cls},
          {"train_box", e.train_box},
          {"train_dfl", e.train_dfl},
          {"step_losses", e.step_losses},
          {"steps_total", e.steps_total},
          {"val", report_to_json(e.val)},
          {"best", e.best},
          {"wall_clock_s", e.wall_clock_s}};
}

EpochRecord epoch_from_json(const json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch").get<int>();
  e.train_loss = j.at("train_loss").get<Real>();
  e.train_cls = j.at("train_cls").get<Real>();
  e.train_box = j.at("train_box").get<Real>();
  e.train_dfl = j.at("train_dfl").get<Real>();
  e.step_losses = j.at("step_losses").get<std::vector<Real>>();
  e.steps_total = j.at("steps_total").get<long>();
  e.val = report_from_json(j.at("val"));
  e.best = j.at("best").get<bool>();
  e.wall_clock_s = j.at("wall_clock_s").get<Real>();
  return e;
}

LossBreakdown train_step(const StnYolo& model, const Tensor& images, const std::vector<std::vector<BBox>>& boxes,
                         const LossWeights& weights, const std::vector<ParamRef>& params, OptimState& state) {
  const ModelOutput out = model.forward(images);
  const TargetSet targets =
      assign_targets(boxes, out.head.geometry(), out.head.n_classes, out.head.reg_max);
  LossBreakdown loss = detection_loss(out.head, targets, weights);
  if (!std::isfinite(loss.total.item())) return loss;
  zero_grads(params);
  loss.total.backward();
  adamw_step(params, state);
  return loss;
}

TrainResult train(const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  return train(config, load_splits(config), options);
}

TrainResult train(const TrainConfig& config, const Splits& splits, const TrainOptions& options) {
  config.validate();
  if (splits.train.samples.empty()) throw IoError("training split is empty");
  const Dataset& val = splits.val.samples.empty() ? splits.train : splits.val;
  const int n_classes = splits.train.n_classes();

  const fs::path run_dir = options.run_dir.empty() ? output_root() / config.name : options.run_dir;
  const fs::path best_path = run_dir / "best.ckpt", last_path = run_dir / "last.ckpt";
  const fs::path record_path = run_dir / "record.jsonl";
  if (options.write_files) fs::create_directories(run_dir);

  StnYolo model(config.model_config(n_classes), config.seed);
  const std::vector<ParamRef> params = model.parameters();
  AdamWHyper hyper;
  hyper.lr = config.lr;
  hyper.weight_decay = config.weight_decay;
  OptimState state = make_optim_state(params, hyper);

  RunRecord rec;
  rec.config = train_config_to_json(config);
  rec.config_hash = config_hash(config);
  int start_epoch = 1, since_best = 0;
  long steps = 0;
  Checkpoint best_ck = model.to_checkpoint();

  if (options.resume && fs::exists(last_path)) {
    const Checkpoint last = read_checkpoint(last_path);
    const json& t = last.meta.at("train");
    if (t.at("config_hash").get<std::string>() != rec.config_hash) {
      throw ValueError("cannot resume: " + last_path.string() + " was written by a different config");
    }
    model.load_weights(last);
    restore_optim(last, params, state);
    start_epoch = t.at("epoch").get<int>() + 1;
    steps = t.at("steps").get<long>();
    since_best = t.at("since_best").get<int>();
    rec.best_epoch = t.at("best_epoch").get<int>();
    rec.best_map50 = t.at("best_map50").get<Real>();
    for (const json& e : t.at("epochs")) rec.epochs.push_back(epoch_from_json(e));
    if (fs::exists(best_path)) best_ck = read_checkpoint(best_path);
    if (t.contains("stop_reason")) rec.stop_reason = t.at("stop_reason").get<std::string>();
  }

  auto write_record = [&]() {
    if (!options.write_files) return;
    std::ostringstream os;
    os << json{{"type", "header"}, {"config", rec.config}, {"config_hash", rec.config_hash}, {"version", kLibraryVersion}}.dump()
       << '\n';
    for (const EpochRecord& e : rec.epochs) os << epoch_to_json(e).dump() << '\n';
    if (!rec.stop_reason.empty()) {
      os << json{{"type", "summary"}, {"best_epoch", rec.best_epoch}, {"best_map50", rec.best_map50},
                 {"stop_reason", rec.stop_reason}, {"epochs_run", rec.epochs.size()}}.dump()
         << '\n';
    }
    write_text_atomic(record_path, os.str());
  };
  auto train_meta = [&](int epoch) {
    json epochs = json::array();
    for (const EpochRecord& e : rec.epochs) epochs.push_back(epoch_to_json(e));
    json t = {{"epoch", epoch}, {"steps", steps}, {"since_best", since_best}, {"best_epoch", rec.best_epoch},
              {"best_map50", rec.best_map50}, {"config_hash", rec.config_hash}, {"epochs", epochs}};
    if (!rec.stop_reason.empty()) t["stop_reason"] = rec.stop_reason;
    return t;
  };

  EvalOptions eval;
  eval.conf_thresh = config.conf_thresh;
  eval.nms_iou = config.nms_iou;
  eval.score_floor = config.score_floor;
  eval.batch_size = config.batch_size;

  const auto t0 = std::chrono::steady_clock::now();
  int epochs_this_call = 0;
  for (int epoch = start_epoch; rec.stop_reason.empty() && epoch <= config.max_epochs; ++epoch) {
    const Dataset aug = config.train_augment && config.train_augment->any()
                            ? augment_testset(splits.train, [&] {
                                AugmentSpec s = *config.train_augment;
                                s.seed = mix64(s.seed ^ static_cast<std::uint64_t>(epoch));
                                return s;
                              }())
                            : Dataset{};
    const Dataset& train_set = aug.samples.empty() ? splits.train : aug;
    const auto order = epoch_order(config.seed, epoch, train_set.samples.size());
    EpochRecord er;
    er.epoch = epoch;
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    for (std::size_t first = 0; first < order.size(); first += bs) {
      if (config.max_steps > 0 && steps >= config.max_steps) break;
      const std::size_t count = std::min(bs, order.size() - first);
      const LossBreakdown loss = train_step(model, stack_images(train_set, order, first, count),
                                            batch_boxes(train_set, order, first, count), config.loss, params, state);
      const Real total = loss.total.item();
      if (!std::isfinite(total)) {
        json diag = {{"epoch", epoch}, {"step", steps + 1}, {"loss", {{"cls", loss.cls}, {"box", loss.box}, {"dfl", loss.dfl}}}};
        diag["batch"] = json::array();
        for (std::size_t k = 0; k < count; ++k) diag["batch"].push_back(train_set.samples[order[first + k]].name);
        std::string where = "(no files written)";
        if (options.write_files) {
          write_text_atomic(run_dir / "diagnostic.json", diag.dump(2));
          where = (run_dir / "diagnostic.json").string();
        }
        throw Error("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps + 1) +
                    "; diagnostics in " + where);
      }
      ++steps;
      er.step_losses.push_back(total);
      er.train_cls += loss.cls;
      er.train_box += loss.box;
      er.train_dfl += loss.dfl;
    }
    if (!er.step_losses.empty()) {
      const Real n = static_cast<Real>(er.step_losses.size());
      er.train_loss = std::accumulate(er.step_losses.begin(), er.step_losses.end(), 0.0) / n;
      er.train_cls /= n;
      er.train_box /= n;
      er.train_dfl /= n;
    }
    er.steps_total = steps;
    er.val = evaluate(model, val, eval).report;
    if (er.val.map50 > rec.best_map50) {
      rec.best_map50 = er.val.map50;
      rec.best_epoch = epoch;
      er.best = true;
      since_best = 0;
      best_ck = model.to_checkpoint();
      best_ck.meta["epoch"] = epoch;
      best_ck.meta["val"] = report_to_json(er.val);
      if (options.write_files) write_checkpoint(best_path, best_ck);
    } else {
      ++since_best;
    }
    er.wall_clock_s = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
    rec.epochs.push_back(er);
    ++epochs_this_call;

    if (since_best >= config.early_stop_patience) rec.stop_reason = "early_stop";
    else if (config.max_steps > 0 && steps >= config.max_steps) rec.stop_reason = "max_steps";
    else if (epoch == config.max_epochs) rec.stop_reason = "max_epochs";

    if (options.write_files) write_checkpoint(last_path, training_checkpoint(model, params, state, train_meta(epoch)));
    write_record();
    if (options.on_epoch) options.on_epoch(er);
    if (rec.stop_reason.empty() && options.stop_after_epochs > 0 && epochs_this_call >= options.stop_after_epochs) break;
  }

  StnYolo best_model = StnYolo::from_checkpoint(best_ck);
  TrainResult res{rec, best_path, last_path, record_path, std::move(model), std::move(best_model)};
  if (res.record.stop_reason.empty()) res.record.stop_reason = "interrupted";
  return res;
}

// ---------------------------------------------------------------------------
// Compare

MetricStat mean_std(const std::vector<Real>& v) {
  MetricStat s;
  if (v.empty()) return s;
  const Real n = static_cast<Real>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  Real ss = 0.0;
  for (Real x : v) ss += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(ss / n);
  return s;
}

CompareReport compare_models(const std::vector<std::pair<StnYolo, StnYolo>>& runs, const Dataset& test,
                             const EvalOptions& eval, const AugmentSpec& base, std::uint64_t seed) {
  if (runs.empty()) throw ValueError("compare needs at least one run");
  CompareReport rep;
  rep.n_runs = static_cast<int>(runs.size());
  rep.seed = seed;
  for (const AugmentSpec& row_spec : augment_grid(base)) {
    for (int which = 0; which < 2; ++which) {
      CompareRow row;
      row.augment = row_spec;
      row.model = which == 0 ? "YOLO" : "STN-YOLO";
      for (std::size_t r = 0; r < runs.size(); ++r) {
        EvalOptions e = eval;
        AugmentSpec spec = row_spec;
        spec.seed = base.seed + r;
        e.augment = spec;
        const StnYolo& m = which == 0 ? runs[r].first : runs[r].second;
        row.runs.push_back(evaluate(m, test, e).report);
      }
      auto collect = [&](auto field) {
        std::vector<Real> v;
        for (const MetricsReport& m : row.runs) v.push_back(m.*field);
        return mean_std(v);
      };
      row.precision = collect(&MetricsReport::precision);
      row.recall = collect(&MetricsReport::recall);
      row.map50 = collect(&MetricsReport::map50);
      row.map50_95 = collect(&MetricsReport::map50_95);
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

CompareReport compare(const TrainConfig& config, const CompareOptions& options) {
  if (options.n_runs <= 0) throw ValueError("n_runs must be positive");
  config.validate();
  const Splits splits = load_splits(config);
  const Dataset& test = splits.test.samples.empty() ? splits.val : splits.test;
  if (test.samples.empty()) throw ValueError("compare needs a test or validation split");
  const fs::path work = options.work_dir.empty() ? output_root() / (config.name + "_compare") : options.work_dir;

  std::vector<std::pair<StnYolo, StnYolo>> runs;
  for (int r = 0; r < options.n_runs; ++r) {
    auto model_for = [&](bool stn) -> StnYolo {
      const auto& ckpt = stn ? options.stn_checkpoint : options.yolo_checkpoint;
      if (ckpt) return StnYolo::from_checkpoint(read_checkpoint(*ckpt));
      TrainConfig c = config;
      c.seed = options.seed + static_cast<std::uint64_t>(r);
      c.stn_enabled = stn;
      c.name = config.name + (stn ? "_stn" : "_yolo") + "_run" + std::to_string(r);
      TrainOptions to;
      to.run_dir = work / c.name;
      return train(c, splits, to).best_model;
    };
    StnYolo yolo = model_for(false);
    StnYolo stn = model_for(true);
    runs.emplace_back(std::move(yolo), std::move(stn));
  }
  EvalOptions eval;
  eval.conf_thresh = config.conf_thresh;
  eval.nms_iou = config.nms_iou;
  eval.score_floor = config.score_floor;
  eval.batch_size = config.batch_size;
  AugmentSpec base = options.augment;
  base.seed = options.seed;
  return compare_models(runs, test, eval, base, options.seed);
}

json compare_to_json(const CompareReport& r) {
  json rows = json::array();
  for (const CompareRow& row : r.rows) {
    json runs = json::array();
    for (const MetricsReport& m : row.runs) runs.push_back(report_to_json(m));
    rows.push_back({{"rotation", row.augment.rotation},
                    {"shear", row.augment.shear},
                    {"crop", row.augment.crop},
                    {"augment", row.augment.label()},
                    {"model", row.model},
                    {"precision", stat_json(row.precision)},
                    {"recall", stat_json(row.recall)},
                    {"map50", stat_json(row.map50)},
                    {"map50_95", stat_json(row.map50_95)},
                    {"runs", runs}});
  }
  return {{"n_runs", r.n_runs}, {"seed", r.seed}, {"std_ddof", 0}, {"rows", rows}};
}

std::string format_compare_table(const CompareReport& r) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %-5s %-4s  %-8s  %-16s %-16s %-16s %-16s\n", "Rotation", "Shear", "Crop", "Model",
                "Precision", "Recall", "mAP@0.5", "mAP@0.5:0.95");
  os << line;
  for (const CompareRow& row : r.rows) {
    const bool first = row.model == "YOLO";
    std::snprintf(line, sizeof line, "%-8s %-5s %-4s  %-8s  %-17s %-17s %-17s %-17s\n",
                  first && row.augment.rotation ? "x" : "", first && row.augment.shear ? "x" : "",
                  first && row.augment.crop ? "x" : "", row.model.c_str(), fmt_stat(row.precision).c_str(),
                  fmt_stat(row.recall).c_str(), fmt_stat(row.map50).c_str(), fmt_stat(row.map50_95).c_str());
    os << line;
  }
  return os.str();
}

json eval_report_json(const MetricsReport& r, const std::optional<AugmentSpec>& augment, const std::string& checkpoint) {
  return {{"checkpoint", checkpoint},
          {"augment", augment ? augment_to_json(*augment) : json(nullptr)},
          {"metrics", report_to_json(r)}};
}

}  // namespace stnyolo
