// Acceptance checks: one PASS/FAIL line per criterion.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "msiqa/evaluate.hpp"
#include "msiqa/inference.hpp"
#include "msiqa/losses.hpp"
#include "msiqa/metrics.hpp"
#include "msiqa/synth.hpp"
#include "msiqa/trainer.hpp"
#include "stats.hpp"
#include "test_util.hpp"

using namespace msiqa;
using msiqa::testing::TempDir;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

// Shared synthetic dataset (default spec, 60 samples at 72x72).
struct Shared {
  TempDir dir{"acceptance"};
  DatasetManifest synth;
  std::optional<double> fused_srcc;
};

Shared& shared() {
  static Shared s;
  return s;
}

// 1. Metric oracle equivalence.
Outcome metrics_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  o.check(srcc(std::vector<double>{1, 2, 3, 4, 5}, std::vector<double>{2, 1, 4, 3, 5}) == 0.8, "srcc worked example");
  o.check(plcc(std::vector<double>{1, 2, 3, 4}, std::vector<double>{3, 5, 7, 9}) == 1.0, "plcc affine example");
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> len(2, 50);
  std::normal_distribution<double> n;
  std::uniform_int_distribution<int> coarse(0, 4);
  double worst = 0.0;
  std::size_t compared = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t sz = len(rng);
    std::vector<double> a(sz), b(sz);
    const bool ties = t % 2 == 1;
    for (std::size_t i = 0; i < sz; ++i) {
      a[i] = ties ? coarse(rng) : n(rng);
      b[i] = ties ? coarse(rng) : n(rng);
    }
    const auto s = srcc(a, b), p = plcc(a, b);
    const double bs = msiqa::testing::brute_srcc(a, b), bp = msiqa::testing::brute_plcc(a, b);
    o.check(s.has_value() == std::isfinite(bs) && p.has_value() == std::isfinite(bp), "degenerate agreement");
    if (s && std::isfinite(bs)) worst = std::max(worst, std::abs(*s - bs)), ++compared;
    if (p && std::isfinite(bp)) worst = std::max(worst, std::abs(*p - bp)), ++compared;
  }
  const double secs = seconds_since(t0);
  o.check(worst <= 1e-12, "max deviation " + fmt("%.3g", worst));
  o.check(secs < 5.0, "runtime");
  o.note(std::to_string(compared) + " comparisons, max deviation " + fmt("%.3g", worst) + ", " + fmt("%.3f", secs) +
         " s");
  return o;
}

// 2. MainScore arithmetic.
Outcome main_score_arithmetic() {
  Outcome o;
  const std::string a = fmt("%.3f", main_score(0.737, 0.700));
  const std::string b = fmt("%.3f", main_score(0.269, 0.303));
  o.check(a == "1.437", "(0.737, 0.700) -> " + a);
  o.check(b == "0.572", "(0.269, 0.303) -> " + b);
  o.note("(0.737, 0.700) -> " + a + ", (0.269, 0.303) -> " + b);
  return o;
}

// 3. Loss correctness.
Outcome loss_correctness() {
  Outcome o;
  const auto t0 = Clock::now();
  o.check(regression_loss({{1, 3}, {0, 0}}).value == 2.5, "regression worked example");
  o.check(rank_loss({{0, 0}, {0, 1}}).value == 1.0, "rank tie-of-predictions example");
  const double mixed = rank_loss({{0.5, 0.2, 1, 1}, {0, 1, 5, 2}}).value;
  o.check(std::abs(mixed - 0.67493) <= 1e-5, "rank mixed example " + fmt("%.6f", mixed));

  std::mt19937_64 rng(6);
  std::normal_distribution<double> d;
  std::uniform_int_distribution<std::size_t> half(1, 8);
  std::uniform_int_distribution<int> coarse(0, 3);
  double worst = 0.0;
  auto check_fd = [&](const std::function<LossValue(const PairBatch&)>& loss, const PairBatch& b) {
    const auto analytic = loss(b).grad;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double h = 1e-3 * std::max(1.0, std::abs(b.predictions[i]));
      auto at = [&](double dx) {
        auto x = b;
        x.predictions[i] += dx;
        return loss(x).value;
      };
      const double fd = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
      worst = std::max(worst, std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-8}));
    }
  };
  for (int t = 0; t < 50; ++t) {
    PairBatch b;
    const std::size_t n = 2 * half(rng);
    for (std::size_t i = 0; i < n; ++i) {
      b.predictions.push_back(d(rng));
      b.targets.push_back(i % 3 == 0 ? coarse(rng) : d(rng));
    }
    check_fd(regression_loss, b);
    check_fd(rank_loss, b);
    check_fd(
        [](const PairBatch& x) {
          const auto l = total_loss(x);
          return LossValue{l.total, l.grad};
        },
        b);
  }
  const double secs = seconds_since(t0);
  o.check(worst <= 1e-6, "finite-difference error " + fmt("%.3g", worst));
  o.check(secs < 10.0, "runtime");
  o.note("rank mixed " + fmt("%.6f", mixed) + ", worst FD relative error " + fmt("%.3g", worst) + ", " +
         fmt("%.2f", secs) + " s");
  return o;
}

// 4. Architecture shape contract and Desk gradient check.
Outcome architecture() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> pick(0, 1000);
  const int configs = 6;
  for (int i = 0; i < configs; ++i) {
    BackboneConfig c;
    c.preset = SizePreset::Custom;
    c.embed_dim = 4 * (1 + pick(rng) % 3);
    c.window_size = 1 + pick(rng) % 4;
    c.input_height = 32 * (1 + pick(rng) % 2);
    c.input_width = 32 * (1 + pick(rng) % 2);
    for (std::size_t k = 0; k < kStages; ++k) {
      c.depths[k] = 1 + pick(rng) % 2;
      c.heads[k] = pick(rng) % 2 ? 2 : 1;
    }
    Network<double> net(c);
    const auto p = net.init_parameters(i);
    Graph<double> g;
    ParameterBinder<double> bind(g, p);
    const auto t =
        net.trace(bind, g.constant(net.patch_features(msiqa::testing::random_image(c.input_height, c.input_width, i))));
    for (std::size_t k = 1; k <= kStages; ++k) {
      const auto& s = t.stages[k - 1];
      const std::size_t div = 4u << (k - 1);
      o.check(s.grid_height == c.input_height / div && s.grid_width == c.input_width / div &&
                  s.channels == c.embed_dim << (k - 1) && g.value(s.values).rows == s.grid_height * s.grid_width &&
                  g.value(s.values).cols == s.channels,
              "stage " + std::to_string(k) + " shape of config " + std::to_string(i));
    }
    o.check(g.value(t.fused).cols == 15 * c.embed_dim, "fused length of config " + std::to_string(i));
  }

  Network<double> net(BackboneConfig{});
  auto p = net.init_parameters(7);
  for (std::size_t s = 0; s < p.size(); ++s) {
    for (auto& v : p[s].data) v *= 4;
  }
  const auto img = msiqa::testing::random_image(64, 64, 13);
  Graph<double> g;
  ParameterBinder<double> bind(g, p);
  g.backward(net.forward(bind, img));
  auto grads = p.zeros_like();
  g.for_each_parameter_grad([&](std::size_t slot, const Matrix<double>& gr) { grads[slot] = gr; });
  std::mt19937_64 prng(5);
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t s = 0; s < p.size(); ++s) {
    std::uniform_int_distribution<std::size_t> idx(0, p[s].size() - 1);
    for (int k = 0; k < 2; ++k) {
      const std::size_t i = idx(prng);
      const double old = p[s].data[i], h = 1e-5;
      p[s].data[i] = old + h;
      const double up = net.forward(p, img);
      p[s].data[i] = old - h;
      const double down = net.forward(p, img);
      p[s].data[i] = old;
      const double fd = (up - down) / (2 * h), an = grads[s].data[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
      ++checked;
    }
  }
  const double secs = seconds_since(t0);
  o.check(worst <= 1e-3, "Desk gradient check " + fmt("%.3g", worst));
  o.check(secs < 60.0, "runtime");
  o.note(std::to_string(configs) + " configs, " + std::to_string(checked) + " Desk coordinates, worst relative error " +
         fmt("%.3g", worst) + ", " + fmt("%.1f", secs) + " s");
  return o;
}

double train_srcc(const BackboneConfig& model, double reg_w, double rank_w) {
  auto cfg = desk_train_config();
  cfg.reg_weight = reg_w;
  cfg.rank_weight = rank_w;
  const auto aug = desk_augmentation();
  const auto& m = shared().synth;
  const auto res = fit<float>(m, model, cfg, aug);
  const NetworkScorer<float> scorer(model, res.params);
  TTAPlan plan;
  plan.resize_to = aug.resize_to;
  plan.crop_size = aug.crop_size;
  const auto rep = evaluate(scorer, m, plan);
  return rep.srcc.value_or(std::nan(""));
}

// 5. Overfit oracle.
Outcome overfit_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  const BackboneConfig desk;
  const double reg = train_srcc(desk, 1.0, 0.0);
  const double rank = train_srcc(desk, 0.0, 1.0);
  const double both = train_srcc(desk, 1.0, 1.0);
  shared().fused_srcc = both;
  const double secs = seconds_since(t0);
  o.check(shared().synth.size() >= 60, "fixture size");
  o.check(both >= 0.9, "combined SRCC >= 0.9");
  o.check(rank >= 0.8, "rank-only SRCC >= 0.8");
  o.check(both >= std::max(reg, rank) - 0.02, "combined >= max(mse-only, rank-only) - 0.02");
  o.check(secs < 600.0, "runtime");
  o.note(std::to_string(shared().synth.size()) + " samples, 30 epochs: mse-only " + fmt("%.4f", reg) + ", rank-only " +
         fmt("%.4f", rank) + ", combined " + fmt("%.4f", both) + ", " + fmt("%.0f", secs) + " s");
  return o;
}

// 6. Harmonic-mean TTA.
Outcome harmonic_tta() {
  Outcome o;
  o.check(harmonic_mean(std::vector<double>{1, 2, 4}).value == 12.0 / 7.0, "(1,2,4) -> 12/7");
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.01, 10.0);
  std::uniform_int_distribution<std::size_t> len(1, 30);
  bool bounded = true;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> v(len(rng));
    double am = 0;
    for (auto& x : v) x = u(rng), am += x;
    am /= static_cast<double>(v.size());
    bounded = bounded && harmonic_mean(v).value <= am * (1 + 1e-15);
  }
  o.check(bounded, "hm <= am on 1000 vectors");

  const IntensityProbe scorer({64, 64});
  const auto& m = shared().synth;
  std::vector<double> ratio;
  for (std::size_t k = 0; k < 20; ++k) {
    const Image img = read_image(m.samples[k * m.size() / 20].image_path);
    std::vector<double> v3, v20;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      TTAPlan p;
      p.strategy = CropStrategy::RandomCrops;
      p.resize_to = {96, 96};
      p.seed = seed;
      p.n_crops = 3;
      v3.push_back(predict_image(scorer, img, p).score);
      p.n_crops = 20;
      v20.push_back(predict_image(scorer, img, p).score);
    }
    ratio.push_back(msiqa::testing::variance(v20) / msiqa::testing::variance(v3));
  }
  std::sort(ratio.begin(), ratio.end());
  const double med = (ratio[9] + ratio[10]) / 2;
  o.check(med < 1.0, "median variance ratio n=20 / n=3 below 1");
  o.note("median variance ratio (20 crops / 3 crops) over 20 images " + fmt("%.3f", med));
  return o;
}

// 7. Weighted sampling.
Outcome weighted_sampling() {
  Outcome o;
  TempDir d("acceptance-imbalanced");
  SynthSpec spec;
  spec.imbalanced = true;
  const auto m = generate(spec, d.path()).manifest;
  const std::size_t bins = kDefaultSamplingBins;
  const auto w = compute_sampling_weights(m, bins);
  std::mt19937_64 rng(99);
  const std::size_t draws = 10000;
  std::vector<double> raw(bins, 0.0), wc(bins, 0.0), uc(bins, 0.0);
  auto bin = [&](std::size_t i) { return mos_bin(m.samples[i].mos, m.mos_min, m.mos_max, bins); };
  for (std::size_t i = 0; i < m.size(); ++i) raw[bin(i)] += 1;
  for (auto i : draw_indices(m.size(), draws, w, rng)) wc[bin(i)] += 1;
  for (auto i : draw_indices(m.size(), draws, {}, rng)) uc[bin(i)] += 1;
  std::vector<double> wn, un, expected;
  std::size_t nonempty = 0;
  for (double r : raw) nonempty += r > 0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (raw[b] == 0) continue;
    wn.push_back(wc[b]);
    un.push_back(uc[b]);
    expected.push_back(static_cast<double>(draws) / static_cast<double>(nonempty));
  }
  const double p = msiqa::testing::chi_square_p(wn, expected);
  const double pu = msiqa::testing::chi_square_p(un, expected);
  const double vw = msiqa::testing::variance(wn), vu = msiqa::testing::variance(un);
  o.check(p > 0.01, "weighted chi-square p > 0.01");
  o.check(vw < vu, "weighted flatter than unweighted");
  o.note(std::to_string(nonempty) + " non-empty bins, weighted p = " + fmt("%.3f", p) + ", unweighted p = " +
         fmt("%.3g", pu) + ", count variance " + fmt("%.1f", vw) + " vs " + fmt("%.1f", vu));
  return o;
}

// 8. Feature-fusion ablation hook.
Outcome fusion_ablation() {
  Outcome o;
  BackboneConfig last_only;
  last_only.fuse_stages = false;
  const double fused = shared().fused_srcc ? *shared().fused_srcc : train_srcc(BackboneConfig{}, 1.0, 1.0);
  const double plain = train_srcc(last_only, 1.0, 1.0);
  o.check(std::isfinite(fused) && std::isfinite(plain), "both runs report SRCC");
  o.note("train SRCC with fusion " + fmt("%.4f", fused) + ", last stage only " + fmt("%.4f", plain));
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + MSIQA_CLI_PATH + "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 9. Determinism and round trips.
Outcome determinism() {
  Outcome o;
  BackboneConfig tiny;
  tiny.embed_dim = 8;
  tiny.depths = {1, 1, 1, 1};
  tiny.heads = {1, 1, 2, 2};
  tiny.window_size = 2;
  tiny.input_height = tiny.input_width = 32;
  TrainConfig cfg;
  cfg.base_lr = 1e-3;
  cfg.batch_size_per_device = 4;
  cfg.steps_per_epoch = 3;
  cfg.total_epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.seed = 5;
  AugmentationPlan aug;
  aug.resize_to = {40, 40};
  aug.crop_size = {32, 32};
  const auto a = fit<float>(shared().synth, tiny, cfg, aug);
  const auto b = fit<float>(shared().synth, tiny, cfg, aug);
  o.check(a.history == b.history, "identical histories");

  const fs::path dir = shared().dir / "det";
  fs::create_directories(dir);
  save_model(dir / "m.ckpt", tiny, a.params);
  const auto scorer = load_scorer(dir / "m.ckpt");
  const Network<float> net(tiny);
  bool same = true;
  for (std::uint64_t k = 0; k < 5; ++k) {
    const auto img = msiqa::testing::random_image(32, 32, k);
    same = same && scorer->score(img) == static_cast<double>(net.forward(a.params, img));
  }
  o.check(same, "checkpoint round trip preserves outputs");

  const std::string spec = std::string("'") + MSIQA_FIXTURE_DIR + "/synth_fixture.json'";
  std::ofstream(dir / "run.json") << R"({"seed": 2, "data": {"manifest": "s1/manifest.csv"},
    "model": {"embed_dim": 8, "depths": [1,1,1,1], "heads": [1,1,2,2], "window_size": 2, "input_size": [32, 32]},
    "train": {"base_lr": 0.001, "batch_size_per_device": 4, "total_epochs": 2, "warmup_epochs": 1, "steps_per_epoch": 2},
    "augment": {"resize": [40, 40], "crop": [32, 32]}})";
  bool ok = run_cli("synth --spec " + spec + " --out '" + (dir / "s1").string() + "'") == 0 &&
            run_cli("synth --spec " + spec + " --out '" + (dir / "s2").string() + "'") == 0;
  if (ok) {
    std::ofstream list(dir / "s1" / "list.txt");
    for (const auto& smp : load_manifest(dir / "s1" / "manifest.csv", ManifestFormat::GenericCsv).manifest.samples)
      list << fs::absolute(smp.image_path).string() << '\n';
  }
  const std::string cfg_arg = " --config '" + (dir / "run.json").string() + "'";
  for (const char* r : {"r1", "r2"}) {
    ok = ok && run_cli("train" + cfg_arg + " --out '" + (dir / r).string() + "'") == 0;
    ok = ok && run_cli("predict --checkpoint '" + (dir / r / "model.ckpt").string() + "' --list '" +
                       (dir / "s1" / "list.txt").string() + "' --out '" + (dir / r / "pred.csv").string() +
                       "'") == 0;
  }
  o.check(ok, "CLI runs succeed");
  std::size_t files = 0;
  bool identical = slurp(dir / "s1" / "manifest.csv") == slurp(dir / "s2" / "manifest.csv");
  for (const auto& e : fs::directory_iterator(dir / "r1")) {
    if (e.path().filename() == "run.log") continue;
    identical = identical && slurp(e.path()) == slurp(dir / "r2" / e.path().filename());
    ++files;
  }
  o.check(identical && files >= 6, "CLI reruns byte-identical");
  o.note("histories identical, checkpoint outputs identical, " + std::to_string(files) +
         " CLI output files byte-identical (run.log excluded)");
  return o;
}

}  // namespace

int main() {
  auto& s = shared();
  s.synth = generate(SynthSpec{}, s.dir / "synth").manifest;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"metric oracle equivalence", metrics_oracle},
      {"MainScore arithmetic", main_score_arithmetic},
      {"loss correctness", loss_correctness},
      {"architecture shape contract", architecture},
      {"overfit oracle", overfit_oracle},
      {"harmonic-mean TTA", harmonic_tta},
      {"weighted sampling", weighted_sampling},
      {"feature-fusion ablation", fusion_ablation},
      {"determinism and round trips", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::cout << "criterion " << i + 1 << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << " - "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
