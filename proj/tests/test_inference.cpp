#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "msiqa/evaluate.hpp"
#include "msiqa/inference.hpp"
#include "msiqa/model.hpp"
#include "stats.hpp"
#include "test_util.hpp"

using namespace msiqa;
using msiqa::testing::random_image;
using msiqa::testing::TempDir;

namespace {

class ConstantScorer final : public PatchScorer {
 public:
  ConstantScorer(double v, Size2 in) : v_(v), in_(in) {}
  [[nodiscard]] double score(const Image&) const override { return v_; }
  [[nodiscard]] Size2 input_size() const override { return in_; }

 private:
  double v_;
  Size2 in_;
};

class OffsetScorer final : public PatchScorer {
 public:
  OffsetScorer(std::shared_ptr<const PatchScorer> base, double d) : base_(std::move(base)), d_(d) {}
  [[nodiscard]] double score(const Image& p) const override { return base_->score(p) + d_; }
  [[nodiscard]] Size2 input_size() const override { return base_->input_size(); }

 private:
  std::shared_ptr<const PatchScorer> base_;
  double d_;
};

// Records every patch it sees.
class RecordingScorer final : public PatchScorer {
 public:
  explicit RecordingScorer(Size2 in) : in_(in) {}
  [[nodiscard]] double score(const Image& p) const override {
    seen.push_back(p);
    return 1.0;
  }
  [[nodiscard]] Size2 input_size() const override { return in_; }
  mutable std::vector<Image> seen;

 private:
  Size2 in_;
};

}  // namespace

TEST(HarmonicMean, WorkedExamples) {
  EXPECT_EQ(harmonic_mean(std::vector<double>{2, 2, 2}).value, 2.0);
  EXPECT_DOUBLE_EQ(harmonic_mean(std::vector<double>{1, 2}).value, 4.0 / 3.0);
  EXPECT_EQ(harmonic_mean(std::vector<double>{1, 2, 4}).value, 12.0 / 7.0);
  EXPECT_FALSE(harmonic_mean(std::vector<double>{1, 2, 4}).shifted());
}

TEST(HarmonicMean, BoundedByMinAndArithmeticMean) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.01, 10.0);
  std::uniform_int_distribution<std::size_t> len(1, 30);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(len(rng));
    for (auto& v : s) v = u(rng);
    const double hm = harmonic_mean(s).value;
    const double am = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    EXPECT_LE(hm, am * (1 + 1e-12));
    EXPECT_GE(hm, *std::min_element(s.begin(), s.end()) * (1 - 1e-12));
    EXPECT_LE(hm, *std::max_element(s.begin(), s.end()) * (1 + 1e-12));
    if (s.size() > 1 && *std::min_element(s.begin(), s.end()) != *std::max_element(s.begin(), s.end())) {
      EXPECT_LT(hm, am);
    }
  }
}

TEST(HarmonicMean, ScaleEquivariant) {
  const std::vector<double> s{0.3, 1.7, 2.2, 0.9};
  std::vector<double> t(s.size());
  std::transform(s.begin(), s.end(), t.begin(), [](double v) { return 3.5 * v; });
  EXPECT_NEAR(harmonic_mean(t).value, 3.5 * harmonic_mean(s).value, 1e-12);
}

TEST(HarmonicMean, NonPositiveScoresAreShifted) {
  const std::vector<double> s{-1.0, 0.0, 2.0};
  const auto hm = harmonic_mean(s);
  EXPECT_TRUE(hm.shifted());
  EXPECT_DOUBLE_EQ(hm.offset, 1.0 + kHarmonicEpsilon);
  const double o = hm.offset;
  EXPECT_NEAR(hm.value, 3.0 / (1 / (s[0] + o) + 1 / (s[1] + o) + 1 / (s[2] + o)) - o, 1e-12);
  EXPECT_GE(hm.value, -1.0);
  EXPECT_THROW(harmonic_mean(std::vector<double>{}), ContractError);
}

TEST(FiveCrop, OrderAndOffsets) {
  Image img(384, 384);
  for (std::size_t y = 0; y < 384; ++y) {
    for (std::size_t x = 0; x < 384; ++x) img.at(y, x, 0) = static_cast<double>(y * 1000 + x);
  }
  const auto c = five_crop(img, {224, 224});
  ASSERT_EQ(c.size(), 5u);
  EXPECT_EQ(c[0].at(0, 0, 0), 0.0);
  EXPECT_EQ(c[1].at(0, 0, 0), 160.0);
  EXPECT_EQ(c[2].at(0, 0, 0), 160000.0);
  EXPECT_EQ(c[3].at(223, 223, 0), 383383.0);
  EXPECT_EQ(c[4].at(0, 0, 0), 80080.0);
}

TEST(FiveCrop, FullSizeGivesIdenticalPatches) {
  const auto img = random_image(16, 16, 1);
  for (const auto& p : five_crop(img, {16, 16})) EXPECT_EQ(p.pixels, img.pixels);
  EXPECT_THROW(five_crop(img, {17, 16}), ConfigError);
}

TEST(Tta, RandomCropsAreSeedDeterministic) {
  const auto img = random_image(72, 72, 2);
  TTAPlan p;
  p.strategy = CropStrategy::RandomCrops;
  p.n_crops = 6;
  const auto a = tta_patches(img, p), b = tta_patches(img, p);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].pixels, b[i].pixels);
  p.seed = 1;
  const auto c = tta_patches(img, p);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs |= a[i].pixels != c[i].pixels;
  EXPECT_TRUE(differs);
}

TEST(Tta, ConstantModelGivesConstant) {
  const ConstantScorer s(0.7, {64, 64});
  for (auto strat : {CropStrategy::FiveCrop, CropStrategy::CenterCrop, CropStrategy::RandomCrops}) {
    TTAPlan p;
    p.strategy = strat;
    EXPECT_NEAR(predict_image(s, random_image(80, 100, 3), p).score, 0.7, 1e-15);
  }
}

TEST(Tta, SingleCropEqualsForward) {
  Network<float> net(BackboneConfig{});
  const NetworkScorer<float> s(BackboneConfig{}, net.init_parameters(4));
  const auto img = random_image(72, 72, 5);
  TTAPlan p;
  p.strategy = CropStrategy::RandomCrops;
  p.n_crops = 1;
  const auto patch = tta_patches(img, p).front();
  EXPECT_NEAR(predict_image(s, img, p).score, s.score(patch), 1e-12);
}

TEST(Tta, TestPathStaysRgb) {
  RecordingScorer s({64, 64});
  const auto img = random_image(72, 72, 6);
  TTAPlan p;
  (void)predict_image(s, img, p);
  const auto expected = five_crop(resize_image(img, {72, 72}), {64, 64});
  ASSERT_EQ(s.seen.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(s.seen[i].pixels, expected[i].pixels);
}

TEST(Tta, CropSizeMustMatchModel) {
  const ConstantScorer s(1.0, {32, 32});
  EXPECT_THROW(predict_image(s, random_image(72, 72, 1), TTAPlan{}), ConfigError);
  EXPECT_THROW(parse_crop_strategy("ten_crop"), ConfigError);
}

TEST(Tta, MoreCropsReduceVarianceAcrossSeeds) {
  const IntensityProbe s({64, 64});
  std::vector<double> ratio;
  for (std::uint64_t img_id = 0; img_id < 20; ++img_id) {
    const auto img = random_image(96, 96, 100 + img_id);
    std::vector<double> v3, v20;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      TTAPlan p;
      p.strategy = CropStrategy::RandomCrops;
      p.resize_to = {96, 96};
      p.seed = seed;
      p.n_crops = 3;
      v3.push_back(predict_image(s, img, p).score);
      p.n_crops = 20;
      v20.push_back(predict_image(s, img, p).score);
    }
    ratio.push_back(msiqa::testing::variance(v20) / msiqa::testing::variance(v3));
  }
  std::nth_element(ratio.begin(), ratio.begin() + 10, ratio.end());
  EXPECT_LT(ratio[10], 1.0);
}

TEST(Ensemble, SingleMemberMatchesPredictImage) {
  TempDir d;
  BackboneConfig c;
  Network<float> net(c);
  save_model(d / "m.ckpt", c, net.init_parameters(3));
  EnsembleSpec spec;
  spec.members.push_back({d / "m.ckpt", {72, 72}});
  const auto members = load_ensemble(spec);
  const auto img = random_image(80, 80, 7);
  const auto scorer = load_scorer(d / "m.ckpt");
  EXPECT_EQ(ensemble_predict(members, img), predict_image(*scorer, img, TTAPlan{}).score);
}

TEST(Ensemble, AveragesMembers) {
  std::vector<EnsembleMember> m(2);
  m[0].scorer = std::make_shared<ConstantScorer>(0.2, Size2{64, 64});
  m[1].scorer = std::make_shared<ConstantScorer>(0.9, Size2{64, 64});
  EXPECT_DOUBLE_EQ(ensemble_predict(m, random_image(72, 72, 1)), 0.55);
}

TEST(Ensemble, SymmetricOffsetsCancel) {
  BackboneConfig c;
  Network<double> net(c);
  auto base = std::make_shared<NetworkScorer<double>>(c, net.init_parameters(9));
  const double d = 0.125;
  std::vector<EnsembleMember> m;
  for (double off : {d, -d, 2 * d, -2 * d}) {
    EnsembleMember e;
    e.scorer = std::make_shared<OffsetScorer>(base, off);
    e.plan.strategy = CropStrategy::CenterCrop;
    m.push_back(e);
  }
  const auto img = random_image(72, 72, 8);
  TTAPlan center;
  center.strategy = CropStrategy::CenterCrop;
  EXPECT_NEAR(ensemble_predict(m, img), predict_image(*base, img, center).score, 1e-12);
}

TEST(Ensemble, BadMemberIsNamed) {
  EnsembleSpec spec;
  spec.members.push_back({"/nonexistent/a.ckpt", {72, 72}});
  try {
    load_ensemble(spec);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("member 0"), std::string::npos);
  }
  EXPECT_THROW(load_ensemble(EnsembleSpec{}), ConfigError);
}

TEST(Evaluate, ProbeOnGrayLevelsIsPerfect) {
  TempDir d;
  DatasetManifest m;
  for (int i = 0; i < 3; ++i) {
    const auto p = d / ("g" + std::to_string(i) + ".png");
    write_image(p, Image(72, 72, (50.0 + 60 * i) / 255.0));
    m.samples.push_back({p, 1.0 + i, "t", Split::Test, {}});
  }
  m.finalize();
  const IntensityProbe probe({64, 64});
  const auto r = evaluate(probe, m, TTAPlan{});
  EXPECT_EQ(r.n(), 3u);
  EXPECT_DOUBLE_EQ(*r.srcc, 1.0);
  EXPECT_NEAR(*r.plcc, 1.0, 1e-12);
  EXPECT_EQ(*r.main_score, *r.srcc + *r.plcc);
}

TEST(Evaluate, UndecodableImagesAreExcluded) {
  TempDir d;
  DatasetManifest m;
  for (int i = 0; i < 3; ++i) {
    const auto p = d / ("g" + std::to_string(i) + ".png");
    write_image(p, Image(64, 64, 0.1 + 0.2 * i));
    m.samples.push_back({p, double(i), "t", Split::Test, {}});
  }
  {
    std::ofstream bad(d / "bad.png");
    bad << "x";
  }
  m.samples.push_back({d / "bad.png", 9.0, "t", Split::Test, {}});
  m.finalize();
  const auto r = evaluate(IntensityProbe({64, 64}), m, TTAPlan{});
  EXPECT_EQ(r.n(), 3u);
  ASSERT_EQ(r.excluded.size(), 1u);
  const auto j = report_json(r, {});
  EXPECT_TRUE(j["incomplete"].get<bool>());
}

TEST(Evaluate, ConstantPredictionsAreDegenerate) {
  TempDir d;
  DatasetManifest m;
  for (int i = 0; i < 3; ++i) {
    const auto p = d / ("g" + std::to_string(i) + ".png");
    write_image(p, Image(64, 64, 0.5));
    m.samples.push_back({p, double(i), "t", Split::Test, {}});
  }
  m.finalize();
  const auto r = evaluate(ConstantScorer(1.0, {64, 64}), m, TTAPlan{});
  EXPECT_FALSE(r.srcc.has_value());
  EXPECT_FALSE(r.main_score.has_value());
  EXPECT_EQ(report_json(r, {})["srcc"], "degenerate");
}

TEST(Evaluate, ScatterCsvHasOneRowPerImage) {
  TempDir d;
  EvalReport r;
  r.per_image = {{"a", 0.5, 1.0}, {"b", 0.7, 2.0}};
  finalize_report(r);
  write_scatter_csv(d / "s.csv", r);
  std::ifstream in(d / "s.csv");
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "image_id,mos,prediction");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2);
}
