#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <limits>

#include "msiqa/synth.hpp"
#include "msiqa/trainer.hpp"
#include "test_util.hpp"

using namespace msiqa;
using msiqa::testing::random_image;
using msiqa::testing::TempDir;

namespace {

BackboneConfig tiny_model() {
  BackboneConfig c;
  c.embed_dim = 8;
  c.depths = {1, 1, 1, 1};
  c.heads = {1, 1, 2, 2};
  c.window_size = 2;
  c.input_height = c.input_width = 32;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.base_lr = 1e-3;
  t.batch_size_per_device = 4;
  t.steps_per_epoch = 3;
  t.warmup_epochs = 1;
  t.total_epochs = 4;
  t.seed = 11;
  return t;
}

AugmentationPlan tiny_aug() {
  AugmentationPlan a;
  a.resize_to = {40, 40};
  a.crop_size = {32, 32};
  return a;
}

const DatasetManifest& fixture() {
  static TempDir dir("train-fixture");
  static const DatasetManifest m = generate(fixture_spec(), dir.path()).manifest;
  return m;
}

template <typename T>
bool same_params(const ModelParameters<T>& a, const ModelParameters<T>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s].data != b[s].data) return false;
  }
  return true;
}

struct Batch {
  std::vector<Image> images;
  std::vector<double> mos;
};

Batch random_batch(std::size_t n, std::uint64_t seed) {
  Batch b;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t i = 0; i < n; ++i) {
    b.images.push_back(random_image(32, 32, seed * 100 + i));
    b.mos.push_back(u(rng));
  }
  return b;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

}  // namespace

TEST(BatchGradients, SharedParametersAndLossSplit) {
  Network<double> net(tiny_model());
  const auto p = net.init_parameters(1);
  const auto before = p;
  const auto b = random_batch(4, 2);
  const auto bg = batch_gradients(net, p, b.images, b.mos, 1.0, 1.0);
  EXPECT_TRUE(same_params(p, before));
  EXPECT_EQ(bg.grads.size(), p.size());
  EXPECT_NEAR(bg.loss.total, bg.loss.reg + bg.loss.rank, 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(bg.predictions[i], net.forward(p, b.images[i]));
  const auto direct = total_loss(PairBatch{bg.predictions, b.mos});
  EXPECT_NEAR(bg.loss.total, direct.total, 1e-12);
}

TEST(BatchGradients, PairMembersAccumulateIntoOneGradient) {
  // Gradient of the pair equals the sum of per-image contributions.
  Network<double> net(tiny_model());
  const auto p = net.init_parameters(4);
  const auto b = random_batch(2, 9);
  const auto bg = batch_gradients(net, p, b.images, b.mos, 1.0, 0.0);
  Gradients<double> sum = p.zeros_like();
  for (std::size_t i = 0; i < 2; ++i) {
    Graph<double> g;
    ParameterBinder<double> bind(g, p);
    const Var s = net.forward(bind, b.images[i]);
    g.backward(s, bg.loss.grad[i]);
    g.for_each_parameter_grad([&](std::size_t slot, const Matrix<double>& m) {
      for (std::size_t k = 0; k < m.size(); ++k) sum[slot].data[k] += m.data[k];
    });
  }
  for (std::size_t s = 0; s < sum.size(); ++s) {
    for (std::size_t k = 0; k < sum[s].size(); ++k) EXPECT_NEAR(bg.grads[s].data[k], sum[s].data[k], 1e-12);
  }
}

TEST(BatchGradients, TwoDevicesAverageShardGradients) {
  Network<double> net(tiny_model());
  const auto p = net.init_parameters(5);
  const auto b = random_batch(8, 3);
  const auto two = batch_gradients(net, p, b.images, b.mos, 1.0, 1.0, 2);
  std::vector<BatchGradients<double>> shards;
  for (std::size_t d = 0; d < 2; ++d) {
    std::vector<Image> im(b.images.begin() + d * 4, b.images.begin() + (d + 1) * 4);
    std::vector<double> mo(b.mos.begin() + d * 4, b.mos.begin() + (d + 1) * 4);
    shards.push_back(batch_gradients(net, p, im, mo, 1.0, 1.0));
  }
  EXPECT_NEAR(two.loss.total, (shards[0].loss.total + shards[1].loss.total) / 2, 1e-12);
  for (std::size_t s = 0; s < p.size(); ++s) {
    for (std::size_t k = 0; k < p[s].size(); ++k) {
      EXPECT_NEAR(two.grads[s].data[k], (shards[0].grads[s].data[k] + shards[1].grads[s].data[k]) / 2, 1e-12);
    }
  }
}

TEST(BatchGradients, RegressionOnlyIsDeviceInvariant) {
  Network<double> net(tiny_model());
  const auto p = net.init_parameters(6);
  const auto b = random_batch(8, 4);
  const auto one = batch_gradients(net, p, b.images, b.mos, 1.0, 0.0, 1);
  const auto two = batch_gradients(net, p, b.images, b.mos, 1.0, 0.0, 2);
  EXPECT_NEAR(one.loss.total, two.loss.total, 1e-12);
  for (std::size_t s = 0; s < p.size(); ++s) {
    for (std::size_t k = 0; k < p[s].size(); ++k) EXPECT_NEAR(one.grads[s].data[k], two.grads[s].data[k], 1e-12);
  }
}

TEST(BatchGradients, WorkersDoNotChangeResults) {
  Network<double> net(tiny_model());
  const auto p = net.init_parameters(7);
  const auto b = random_batch(6, 5);
  const auto a = batch_gradients(net, p, b.images, b.mos, 1.0, 1.0, 1, 1);
  const auto c = batch_gradients(net, p, b.images, b.mos, 1.0, 1.0, 1, 3);
  EXPECT_EQ(a.predictions, c.predictions);
  for (std::size_t s = 0; s < p.size(); ++s) EXPECT_EQ(a.grads[s].data, c.grads[s].data);
}

TEST(BatchGradients, RejectsUnevenShards) {
  Network<double> net(tiny_model());
  const auto p = net.init_parameters(0);
  const auto b = random_batch(6, 1);
  EXPECT_THROW(batch_gradients(net, p, b.images, b.mos, 1.0, 1.0, 2), ContractError);
  EXPECT_THROW(batch_gradients(net, p, b.images, std::vector<double>(5), 1.0, 1.0), ContractError);
}

TEST(CombineDeviceGradients, WeightsByCount) {
  Gradients<double> a{Matrix<double>(1, 2, 1.0)}, b{Matrix<double>(1, 2, 4.0)};
  const std::vector<Gradients<double>> g{a, b};
  const std::vector<std::size_t> counts{1, 3};
  const auto out = combine_device_gradients<double>(g, counts);
  EXPECT_DOUBLE_EQ(out[0].data[0], 0.25 + 3.0);
}

TEST(TrainStep, ZeroLrAndDecayLeavesParametersUnchanged) {
  Network<double> net(tiny_model());
  auto p = net.init_parameters(2);
  const auto before = p;
  AdamW<double> opt(p, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  const auto b = random_batch(4, 6);
  const auto rec = train_step(net, p, opt, PairBatchInputs{b.images, b.mos, {}}, 0.0);
  EXPECT_TRUE(same_params(p, before));
  EXPECT_NEAR(rec.total, rec.reg + rec.rank, 1e-12);
}

TEST(TrainStep, RepeatedImageWithEqualMosHasNoRankLoss) {
  Network<double> net(tiny_model());
  auto p = net.init_parameters(2);
  AdamW<double> opt(p, AdamWConfig{});
  const Image im = random_image(32, 32, 1);
  const auto rec = train_step(net, p, opt, PairBatchInputs{{im, im}, {0.4, 0.4}, {}}, 1e-3);
  EXPECT_EQ(rec.rank, 0.0);
}

TEST(TrainStep, UpdatesParameters) {
  Network<double> net(tiny_model());
  auto p = net.init_parameters(2);
  const auto before = p;
  AdamW<double> opt(p, AdamWConfig{});
  const auto b = random_batch(4, 8);
  train_step(net, p, opt, PairBatchInputs{b.images, b.mos, {}}, 1e-3);
  EXPECT_FALSE(same_params(p, before));
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(TrainStep, NonFiniteInputNamesBatchAndKeepsParameters) {
  Network<double> net(tiny_model());
  auto p = net.init_parameters(2);
  const auto before = p;
  AdamW<double> opt(p, AdamWConfig{});
  for (int which = 0; which < 2; ++which) {
    auto b = random_batch(4, 8);
    if (which == 0) b.mos[1] = std::nan("");
    else b.images[2].pixels[5] = std::numeric_limits<double>::infinity();
    try {
      train_step(net, p, opt, PairBatchInputs{b.images, b.mos, {}}, 1e-3, StepOptions{1.0, 1.0, 1, 1, 42});
      FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
      EXPECT_NE(std::string(e.what()).find("batch 42"), std::string::npos) << e.what();
    }
  }
  EXPECT_TRUE(same_params(p, before));
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(History, JsonRoundTrip) {
  TrainHistory h;
  h.seed = 5;
  h.split_seed = 9;
  h.records.push_back({1, 0.75, 0.5, 0.25, 1e-4, 0.3, std::nullopt, std::nullopt});
  h.records.push_back({2, 0.3, 0.1, 0.2, 2e-4, 0.6, 0.55, 0.61});
  EXPECT_EQ(history_from_json(history_json(h)), h);
  EXPECT_EQ(history_from_json(nlohmann::ordered_json::parse(history_json(h).dump())), h);
}

TEST(Fit, ZeroEpochsReturnsInitialParameters) {
  auto t = tiny_train();
  t.total_epochs = 0;
  t.warmup_epochs = 0;
  const auto r = fit<float>(fixture(), tiny_model(), t, tiny_aug());
  EXPECT_TRUE(r.history.records.empty());
  EXPECT_TRUE(same_params(r.params, Network<float>(tiny_model()).init_parameters(t.seed)));
}

TEST(Fit, HistoryInvariantsAndOutputs) {
  TempDir out;
  FitOptions o;
  o.out_dir = out.path();
  const auto t = tiny_train();
  const auto r = fit<float>(fixture(), tiny_model(), t, tiny_aug(), nullptr, o);
  ASSERT_EQ(r.history.records.size(), t.total_epochs);
  for (std::size_t e = 0; e < t.total_epochs; ++e) {
    const auto& rec = r.history.records[e];
    EXPECT_EQ(rec.epoch, e + 1);
    EXPECT_NEAR(rec.total, rec.reg + rec.rank, 1e-12);
    EXPECT_TRUE(rec.train_srcc.has_value());
    EXPECT_FALSE(rec.holdout_srcc.has_value());
  }
  EXPECT_EQ(r.history.records[0].lr, 0.0);
  EXPECT_DOUBLE_EQ(r.history.records[1].lr, t.base_lr);
  for (const char* f : {"last.ckpt", "best.ckpt", "model.ckpt", "history.json", "history.jsonl"}) {
    EXPECT_TRUE(std::filesystem::exists(out / f)) << f;
  }
  std::ifstream in(out / "history.json");
  EXPECT_EQ(history_from_json(nlohmann::ordered_json::parse(in)), r.history);
  const auto saved = load_parameters<float>(read_archive(out / "model.ckpt"), tiny_model());
  EXPECT_TRUE(same_params(saved, r.params));
}

TEST(Fit, HoldoutMetricsSelectBestCheckpoint) {
  TempDir out;
  FitOptions o;
  o.out_dir = out.path();
  o.split_seed = 3;
  const auto [train, hold] = split_manifest(fixture(), 0.25, 3);
  const auto r = fit<float>(train, tiny_model(), tiny_train(), tiny_aug(), &hold, o);
  EXPECT_EQ(r.history.split_seed, std::optional<std::uint64_t>(3));
  double best = -2;
  for (const auto& rec : r.history.records) {
    ASSERT_TRUE(rec.holdout_srcc && rec.holdout_plcc);
    if (std::isfinite(*rec.holdout_srcc)) best = std::max(best, *rec.holdout_srcc);
  }
  ASSERT_EQ(r.best_checkpoint, out / "best.ckpt");
  const Archive a = read_archive(r.best_checkpoint);
  EXPECT_DOUBLE_EQ(std::stod(a.get("train.score")), best);
}

TEST(Fit, DeterministicGivenSeed) {
  const auto a = fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug());
  const auto b = fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug());
  EXPECT_EQ(a.history, b.history);
  EXPECT_TRUE(same_params(a.params, b.params));
  auto t = tiny_train();
  t.seed = 12;
  const auto c = fit<float>(fixture(), tiny_model(), t, tiny_aug());
  EXPECT_NE(a.history, c.history);
}

TEST(Fit, WorkersDoNotChangeHistory) {
  auto t = tiny_train();
  t.workers = 3;
  const auto a = fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug());
  const auto b = fit<float>(fixture(), tiny_model(), t, tiny_aug());
  EXPECT_EQ(a.history, b.history);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
  TempDir full, part;
  FitOptions o;
  o.out_dir = full.path();
  const auto whole = fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug(), nullptr, o);

  FitOptions s;
  s.out_dir = part.path();
  s.stop_after_epoch = 2;
  const auto first = fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug(), nullptr, s);
  EXPECT_FALSE(first.completed);
  EXPECT_EQ(first.history.records.size(), 2u);
  EXPECT_FALSE(std::filesystem::exists(part / "model.ckpt"));

  FitOptions r;
  r.out_dir = part.path();
  r.resume = true;
  const auto rest = fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug(), nullptr, r);
  EXPECT_TRUE(rest.completed);
  EXPECT_EQ(rest.history, whole.history);
  EXPECT_TRUE(same_params(rest.params, whole.params));
}

TEST(Fit, ResumeRejectsChangedSettingsOrMissingState) {
  TempDir out;
  FitOptions r;
  r.out_dir = out.path();
  r.resume = true;
  EXPECT_THROW(fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug(), nullptr, r), ConfigError);
  FitOptions s;
  s.out_dir = out.path();
  s.stop_after_epoch = 1;
  fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug(), nullptr, s);
  auto t = tiny_train();
  t.base_lr = 2e-3;
  EXPECT_THROW(fit<float>(fixture(), tiny_model(), t, tiny_aug(), nullptr, r), ConfigError);
}

TEST(Fit, StopFlagInterrupts) {
  std::atomic<bool> stop{true};
  FitOptions o;
  o.stop = &stop;
  const auto r = fit<float>(fixture(), tiny_model(), tiny_train(), tiny_aug(), nullptr, o);
  EXPECT_FALSE(r.completed);
  EXPECT_EQ(r.history.records.size(), 1u);
}

TEST(Fit, RejectsInvalidSetup) {
  auto t = tiny_train();
  t.warmup_epochs = t.total_epochs;
  EXPECT_THROW(fit<float>(fixture(), tiny_model(), t, tiny_aug()), ConfigError);
  auto a = tiny_aug();
  a.crop_size = {24, 24};
  EXPECT_THROW(fit<float>(fixture(), tiny_model(), tiny_train(), a), ConfigError);
  EXPECT_THROW(fit<float>(DatasetManifest{}, tiny_model(), tiny_train(), tiny_aug()), ConfigError);
  t = tiny_train();
  t.batch_size_per_device = 3;
  EXPECT_THROW(fit<float>(fixture(), tiny_model(), t, tiny_aug()), ConfigError);
}

TEST(Fit, LossDecreasesOnFixture) {
  auto t = tiny_train();
  t.total_epochs = 12;
  t.base_lr = 2e-3;
  auto a = tiny_aug();
  a.resize_to = a.crop_size;
  a.rotation = false;
  a.colorspaces = {ColorSpace::RGB};
  const auto r = fit<float>(fixture(), tiny_model(), t, a);
  std::vector<double> first, last;
  for (std::size_t e = 0; e < 5; ++e) first.push_back(r.history.records[e].total);
  for (std::size_t e = 7; e < 12; ++e) last.push_back(r.history.records[e].total);
  EXPECT_LT(median(last), median(first));
}
