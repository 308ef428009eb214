// Command-line front end: train, eval, compare, fuse-bands, explain, synth.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "stnyolo/augment.hpp"
#include "stnyolo/checkpoint.hpp"
#include "stnyolo/data_io.hpp"
#include "stnyolo/errors.hpp"
#include "stnyolo/explain.hpp"
#include "stnyolo/harness.hpp"
#include "stnyolo/image_io.hpp"
#include "stnyolo/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stnyolo;

namespace {

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

int fail(const std::string& type, const std::string& message, int code) {
  std::cerr << json{{"error", {{"type", type}, {"message", message}}}}.dump() << std::endl;
  return code;
}

struct TrainArgs {
  std::string config;
  std::string out;
  bool resume = false;
};

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string data;
  std::string split = "test";
  std::string augment = "none";
  std::uint64_t seed = 0;
  double conf = 0.25;
  double iou = 0.7;
  std::string out;
};

struct CompareArgs {
  std::string config;
  int runs = 3;
  std::uint64_t seed = 0;
  std::string yolo_ckpt;
  std::string stn_ckpt;
  std::string out;
  std::string work;
};

struct FuseArgs {
  std::string red, rededge, green, nir;
  std::string out;
  std::string cache;
};

struct ExplainArgs {
  std::string image;
  std::string checkpoint;
  std::string layer = "stride8";
  std::string out;
  double alpha = 0.5;
};

struct SynthArgs {
  std::string out;
  std::string split = "train";
  int n = 8;
  int size = 128;
  std::uint64_t seed = 0;
  int n_classes = 1;
};

int run_train(const TrainArgs& a) {
  const TrainConfig cfg = read_train_config(a.config);
  TrainOptions opt;
  if (!a.out.empty()) opt.run_dir = a.out;
  opt.resume = a.resume;
  opt.on_epoch = [](const EpochRecord& e) {
    std::fprintf(stderr, "epoch %4d  loss %.5f  P %.4f  R %.4f  mAP50 %.4f%s\n", e.epoch, e.train_loss, e.val.precision,
                 e.val.recall, e.val.map50, e.best ? "  *" : "");
  };
  const TrainResult res = train(cfg, opt);
  std::cout << json{{"best_checkpoint", res.best_checkpoint.string()},
                    {"last_checkpoint", res.last_checkpoint.string()},
                    {"record", res.record_path.string()},
                    {"best_epoch", res.record.best_epoch},
                    {"best_map50", res.record.best_map50},
                    {"epochs", res.record.epochs.size()},
                    {"stop_reason", res.record.stop_reason}}
                   .dump()
            << std::endl;
  return 0;
}

int run_eval(const EvalArgs& a) {
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const StnYolo model = StnYolo::from_checkpoint(ck);
  const int size = model.config().image_size;
  Dataset ds;
  if (!a.data.empty()) {
    ds = materialize_dataset(load_dataset(a.data, a.split), size);
  } else if (!a.config.empty()) {
    TrainConfig cfg = read_train_config(a.config);
    cfg.image_size = size;
    Splits s = load_splits(cfg);
    ds = a.split == "train" ? s.train : (a.split == "val" || a.split == "valid") ? s.val : s.test;
  } else {
    throw ValueError("eval needs --data or --config to locate the dataset");
  }
  EvalOptions opt;
  opt.conf_thresh = a.conf;
  opt.nms_iou = a.iou;
  std::optional<AugmentSpec> aug;
  if (a.augment != "none") {
    AugmentSpec spec;
    spec.seed = a.seed;
    aug = parse_augment_list(a.augment, spec);
    opt.augment = aug;
  }
  const EvalResult res = evaluate(model, ds, opt);
  const json report = eval_report_json(res.report, aug, a.checkpoint);
  if (!a.out.empty()) write_json(a.out, report);
  std::cout << format_report_table(res.report, model.config().stn_enabled ? "STN-YOLO" : "YOLO");
  std::cout << report.dump() << std::endl;
  return 0;
}

int run_compare(const CompareArgs& a) {
  const TrainConfig cfg = read_train_config(a.config);
  CompareOptions opt;
  opt.n_runs = a.runs;
  opt.seed = a.seed;
  if (!a.yolo_ckpt.empty()) opt.yolo_checkpoint = a.yolo_ckpt;
  if (!a.stn_ckpt.empty()) opt.stn_checkpoint = a.stn_ckpt;
  if (!a.work.empty()) opt.work_dir = a.work;
  const CompareReport rep = compare(cfg, opt);
  if (!a.out.empty()) write_json(a.out, compare_to_json(rep));
  std::cout << format_compare_table(rep);
  return 0;
}

int run_fuse(const FuseArgs& a) {
  const GrayImage r = read_pgm(a.red), re = read_pgm(a.rededge), g = read_pgm(a.green);
  SpectralImage img(r.width, r.height, r.max_value > 255 ? 16 : 8);
  img.set_band(Band::Red, r);
  img.set_band(Band::RedEdge, re);
  img.set_band(Band::Green, g);
  if (!a.nir.empty()) img.set_band(Band::NearInfrared, read_pgm(a.nir));
  const Tensor fused = a.cache.empty() ? fuse_bands(img) : fuse_bands_cached(img, a.cache);
  const fs::path out(a.out);
  write_image(out, fused, out.extension() == ".ppm");
  std::cout << json{{"output", a.out}, {"width", img.width()}, {"height", img.height()},
                    {"hash", spectral_content_hash(img)}}
                   .dump()
            << std::endl;
  return 0;
}

int run_explain(const ExplainArgs& a) {
  const StnYolo model = StnYolo::from_checkpoint(read_checkpoint(a.checkpoint));
  const int size = model.config().image_size;
  const Tensor image = resize_image(read_image(a.image), size, size);
  const Tensor input = model.config().stn_enabled ? stn_forward(model.stn, image).detach() : image;
  const PyramidFeatures feats = model.detector.backbone_forward(input);
  const Heatmap h = eigencam(feats.by_name(a.layer).detach(), a.layer);
  write_image(a.out, overlay(h, image, a.alpha));
  std::cout << json{{"output", a.out}, {"layer", a.layer}, {"heatmap", {h.height, h.width}}, {"degenerate", h.degenerate}}
                   .dump()
            << std::endl;
  return 0;
}

int run_synth(const SynthArgs& a) {
  SynthOptions o;
  o.n_classes = a.n_classes;
  const Dataset ds = synth_dataset(a.seed, a.n, a.size, o);
  write_dataset(ds, a.out, a.split);
  std::cout << json{{"root", a.out}, {"split", a.split}, {"images", ds.size()}}.dump() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-transformer object detector: training, evaluation and analysis"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", ta.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", ta.out, "Run directory (default: $STNYOLO_OUTPUT_ROOT/<name>)");
  train_cmd->add_flag("--resume", ta.resume, "Continue from <run dir>/last.ckpt");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--config", ea.config, "Run config naming the dataset")->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ea.data, "Dataset root (images/<split>, labels/<split>)");
  eval_cmd->add_option("--split", ea.split, "Split to evaluate")->capture_default_str();
  eval_cmd->add_option("--augment", ea.augment, "none or rotation,shear,crop (any subset)")->capture_default_str();
  eval_cmd->add_option("--seed", ea.seed, "Augmentation seed")->capture_default_str();
  eval_cmd->add_option("--conf", ea.conf, "Confidence threshold for precision/recall")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--iou", ea.iou, "NMS IoU threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--out", ea.out, "Write the JSON report here");

  CompareArgs ca;
  auto* cmp_cmd = app.add_subcommand("compare", "YOLO vs STN-YOLO over the rotation/shear/crop grid");
  cmp_cmd->add_option("--config", ca.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  cmp_cmd->add_option("--runs", ca.runs, "Independent runs per model")->capture_default_str()->check(CLI::PositiveNumber);
  cmp_cmd->add_option("--seed", ca.seed, "Base seed")->capture_default_str();
  cmp_cmd->add_option("--yolo-checkpoint", ca.yolo_ckpt, "Use this baseline instead of training")->check(CLI::ExistingFile);
  cmp_cmd->add_option("--stn-checkpoint", ca.stn_ckpt, "Use this STN model instead of training")->check(CLI::ExistingFile);
  cmp_cmd->add_option("--work-dir", ca.work, "Where trained runs are stored");
  cmp_cmd->add_option("--out", ca.out, "Write the JSON report here");

  FuseArgs fa;
  auto* fuse_cmd = app.add_subcommand("fuse-bands", "Stack Red/RedEdge/Green PGM bands into a pseudo-RGB image");
  fuse_cmd->add_option("--red", fa.red, "Red band (PGM)")->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--rededge", fa.rededge, "Red-edge band (PGM)")->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--green", fa.green, "Green band (PGM)")->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--nir", fa.nir, "Near-infrared band (PGM, stored but unused)")->check(CLI::ExistingFile);
  fuse_cmd->add_option("--out", fa.out, "Output .png or .ppm (16-bit)")->required();
  fuse_cmd->add_option("--cache", fa.cache, "Content-addressed cache directory");

  ExplainArgs xa;
  auto* explain_cmd = app.add_subcommand("explain", "EigenCAM overlay for one image");
  explain_cmd->add_option("--image", xa.image, "Input image")->required()->check(CLI::ExistingFile);
  explain_cmd->add_option("--checkpoint", xa.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  explain_cmd->add_option("--layer", xa.layer, "p1..p5 or stride8/16/32")->capture_default_str();
  explain_cmd->add_option("--alpha", xa.alpha, "Blend weight")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  explain_cmd->add_option("--out", xa.out, "Output PNG")->required();

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset split");
  synth_cmd->add_option("--out", sa.out, "Dataset root")->required();
  synth_cmd->add_option("--split", sa.split, "Split name")->capture_default_str();
  synth_cmd->add_option("--n", sa.n, "Number of images")->capture_default_str()->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--size", sa.size, "Image side (multiple of 32)")->capture_default_str();
  synth_cmd->add_option("--seed", sa.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--classes", sa.n_classes, "Number of classes")->capture_default_str()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), e.get_exit_code() != 0 ? e.get_exit_code() : 2);
  }

  try {
    if (*train_cmd) return run_train(ta);
    if (*eval_cmd) return run_eval(ea);
    if (*cmp_cmd) return run_compare(ca);
    if (*fuse_cmd) return run_fuse(fa);
    if (*explain_cmd) return run_explain(xa);
    if (*synth_cmd) return run_synth(sa);
  } catch (const ParseError& e) {
    return fail("parse", e.what(), 3);
  } catch (const ShapeError& e) {
    return fail("shape", e.what(), 3);
  } catch (const ValueError& e) {
    return fail("value", e.what(), 3);
  } catch (const IoError& e) {
    return fail("io", e.what(), 4);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}
