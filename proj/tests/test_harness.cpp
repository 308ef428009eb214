#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "stnyolo/checkpoint.hpp"
#include "stnyolo/errors.hpp"
#include "stnyolo/harness.hpp"

using namespace stnyolo;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.name = "tiny";
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
  c.dataset.synth_test = 3;
  return c;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("stnyolo_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<Real> all_losses(const RunRecord& r) {
  std::vector<Real> v;
  for (const auto& e : r.epochs) v.insert(v.end(), e.step_losses.begin(), e.step_losses.end());
  return v;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

}  // namespace

TEST(Config, JsonRoundTripIsExact) {
  TrainConfig c = tiny_config();
  c.lr = 0.00123456789;
  c.train_augment = AugmentSpec{};
  c.train_augment->rotation = true;
  c.loss.box = 6.25;
  TrainConfig back = train_config_from_json(nlohmann::json::parse(train_config_to_json(c).dump()));
  EXPECT_EQ(back, c);
  EXPECT_EQ(train_config_to_json(back), train_config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  TrainConfig other = c;
  other.seed = 6;
  EXPECT_NE(config_hash(other), config_hash(c));
}

TEST(Config, RejectsUnknownAndInvalid) {
  auto j = train_config_to_json(tiny_config());
  j["learning_rate"] = 0.1;
  EXPECT_THROW(train_config_from_json(j), ValueError);
  auto k = train_config_to_json(tiny_config());
  k["batch_size"] = "four";
  EXPECT_THROW(train_config_from_json(k), ValueError);
  TrainConfig c = tiny_config();
  c.early_stop_patience = 10;
  EXPECT_THROW(c.validate(), ValueError);
  c = tiny_config();
  c.image_size = 50;
  EXPECT_THROW(c.validate(), ValueError);
}

TEST(Config, ModelConfigRoundTrip) {
  ModelConfig m = tiny_config().model_config(3);
  EXPECT_EQ(m.detector.n_classes, 3);
  EXPECT_EQ(model_config_from_json(model_config_to_json(m)), m);
}

TEST(Checkpoint, EncodeDecodeExact) {
  Checkpoint ck;
  ck.meta = {{"k", 1.5}};
  ck.arrays.push_back({"a", {2, 3}, {1e-300, -0.0, 3.141592653589793, 1e300, 5, 6}});
  ck.arrays.push_back({"b", {1}, {42}});
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), "STNYCKPT");
  Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.arrays, ck.arrays);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(back.find("b")->values[0], 42.0);
  EXPECT_EQ(back.find("zz"), nullptr);
  EXPECT_THROW(decode_checkpoint("garbage"), IoError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
}

TEST(Checkpoint, ModelRoundTripIsExact) {
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  StnYolo m(tiny_config().model_config(1), 77);
  write_checkpoint(dir / "m.ckpt", m.to_checkpoint());
  StnYolo back = StnYolo::from_checkpoint(read_checkpoint(dir / "m.ckpt"));
  EXPECT_EQ(back.config(), m.config());
  auto pa = m.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
  }
  Dataset ds = synth_dataset(1, 1, 64);
  auto ha = m.forward(ds.samples[0].image).head, hb = back.forward(ds.samples[0].image).head;
  for (std::size_t l = 0; l < 3; ++l)
    EXPECT_TRUE(std::equal(ha.levels[l].box_logits.data().begin(), ha.levels[l].box_logits.data().end(),
                           hb.levels[l].box_logits.data().begin()));
  ModelConfig wider = m.config();
  wider.detector.head_width = 16;
  StnYolo w(wider, 1);
  EXPECT_THROW(w.load_weights(m.to_checkpoint()), ShapeError);
}

TEST(Train, PatienceOneWithFrozenModelStopsAtEpochTwo) {
  TrainConfig c = tiny_config();
  c.lr = 0.0;
  c.weight_decay = 0.0;
  c.max_epochs = 5;
  c.early_stop_patience = 1;
  TrainOptions o;
  o.write_files = false;
  TrainResult r = train(c, o);
  EXPECT_EQ(r.record.stop_reason, "early_stop");
  ASSERT_EQ(r.record.epochs.size(), 2u);
  EXPECT_EQ(r.record.best_epoch, 1);
  EXPECT_TRUE(r.record.epochs[0].best);
  EXPECT_FALSE(r.record.epochs[1].best);
}

TEST(Train, SameSeedGivesIdenticalLosses) {
  TrainConfig c = tiny_config();
  c.max_epochs = 2;
  c.early_stop_patience = 2;
  TrainOptions o;
  o.write_files = false;
  auto a = all_losses(train(c, o).record), b = all_losses(train(c, o).record);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(a, b);
  c.seed = 6;
  EXPECT_NE(all_losses(train(c, o).record), a);
}

TEST(Train, StepCapAndFiles) {
  TrainConfig c = tiny_config();
  c.max_steps = 3;
  TrainOptions o;
  o.run_dir = scratch("files");
  TrainResult r = train(c, o);
  EXPECT_EQ(r.record.stop_reason, "max_steps");
  EXPECT_EQ(r.record.epochs.back().steps_total, 3);
  EXPECT_TRUE(fs::exists(o.run_dir / "best.ckpt"));
  EXPECT_TRUE(fs::exists(o.run_dir / "last.ckpt"));
  auto lines = read_lines(o.run_dir / "record.jsonl");
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(nlohmann::json::parse(lines.front()).at("type"), "header");
  EXPECT_EQ(nlohmann::json::parse(lines[1]).at("type"), "epoch");
  EXPECT_EQ(nlohmann::json::parse(lines.back()).at("stop_reason"), "max_steps");
  EXPECT_EQ(epoch_from_json(nlohmann::json::parse(lines[1])).step_losses, r.record.epochs[0].step_losses);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  TrainConfig c = tiny_config();
  TrainOptions full;
  full.run_dir = scratch("full");
  const auto expect = all_losses(train(c, full).record);
  TrainOptions part;
  part.run_dir = scratch("resume");
  part.stop_after_epochs = 1;
  TrainResult first = train(c, part);
  EXPECT_EQ(first.record.stop_reason, "interrupted");
  EXPECT_EQ(first.record.epochs.size(), 1u);
  part.stop_after_epochs = 0;
  part.resume = true;
  TrainResult second = train(c, part);
  EXPECT_EQ(all_losses(second.record), expect);
  TrainConfig changed = c;
  changed.lr = 0.01;
  EXPECT_THROW(train(changed, part), ValueError);
}

TEST(Train, OverfitLossDecreases) {
  TrainConfig c = tiny_config();
  c.stn_enabled = false;
  Splits s = load_splits(c);
  s.train.samples.resize(1);
  StnYolo model(c.model_config(1), 1);
  auto params = model.parameters();
  AdamWHyper h;
  h.lr = 0.001;
  OptimState st = make_optim_state(params, h);
  Real prev = 1e300;
  int rises = 0;
  Real first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    const Real l = train_step(model, s.train.samples[0].image, {s.train.samples[0].boxes}, c.loss, params, st).total.item();
    if (step == 0) first = l;
    last = l;
    rises += l > prev;
    prev = l;
  }
  EXPECT_EQ(rises, 0);
  EXPECT_LT(last, 0.5 * first);
}

TEST(Evaluate, AllOffAugmentMatchesPlain) {
  TrainConfig c = tiny_config();
  Splits s = load_splits(c);
  StnYolo m(c.model_config(1), 2);
  EvalOptions plain, off;
  plain.conf_thresh = off.conf_thresh = 0.01;
  off.augment = AugmentSpec{};
  off.augment->seed = 123;
  EXPECT_EQ(evaluate(m, s.test, plain).report, evaluate(m, s.test, off).report);
}

TEST(Compare, GridRowsAndStatistics) {
  TrainConfig c = tiny_config();
  Splits s = load_splits(c);
  StnYolo m(c.model_config(1), 2);
  EvalOptions e;
  e.conf_thresh = 0.01;
  CompareReport r = compare_models({{m, m}}, s.test, e, AugmentSpec{}, 4);
  ASSERT_EQ(r.rows.size(), 16u);
  for (std::size_t i = 0; i < r.rows.size(); i += 2) {
    EXPECT_EQ(r.rows[i].model, "YOLO");
    EXPECT_EQ(r.rows[i + 1].model, "STN-YOLO");
    EXPECT_EQ(r.rows[i].runs, r.rows[i + 1].runs);
    EXPECT_EQ(r.rows[i].map50.stddev, 0.0);
    EXPECT_EQ(r.rows[i].precision.stddev, 0.0);
  }
  EXPECT_EQ(r.rows[0].runs[0], evaluate(m, s.test, e).report);
  const std::string table = format_compare_table(r);
  EXPECT_NE(table.find("±"), std::string::npos);
  EXPECT_EQ(compare_to_json(r)["rows"].size(), 16u);
}

TEST(Compare, PopulationStd) {
  MetricStat s = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.stddev, std::sqrt(1.25), 1e-15);
  EXPECT_EQ(mean_std({0.7}).stddev, 0.0);
}
