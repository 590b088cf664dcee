// msiqa: synth / train / eval / predict.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <atomic>
#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msiqa/evaluate.hpp"
#include "msiqa/inference.hpp"
#include "msiqa/manifest.hpp"
#include "msiqa/run_config.hpp"
#include "msiqa/synth.hpp"
#include "msiqa/trainer.hpp"

namespace fs = std::filesystem;
using namespace msiqa;

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// The timestamp lives only in the header line of run.log.
void write_run_log(const fs::path& dir, const std::string& command, const Json& resolved) {
  std::ofstream out(dir / "run.log");
  if (!out) throw IoError("cannot write '" + (dir / "run.log").string() + "'");
  out << "# msiqa " << command << " " << timestamp() << "\n" << resolved.dump(2) << "\n";
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

Size2 parse_size_arg(const std::string& s) {
  const auto x = s.find_first_of("xX,");
  try {
    if (x == std::string::npos) {
      const auto n = std::stoul(s);
      return {n, n};
    }
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw UsageError("bad size '" + s + "', expected N or HxW");
  }
}

DatasetManifest load_checked(const fs::path& path, ManifestFormat format) {
  auto loaded = load_manifest(path, format);
  for (const auto& p : loaded.report.missing_images) std::cerr << "warning: missing image " << p.string() << "\n";
  if (loaded.manifest.samples.empty()) throw ConfigError("manifest '" + path.string() + "' has no usable samples");
  return std::move(loaded.manifest);
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  fs::path spec;
  fs::path out;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a) {
  auto spec = load_synth_spec(a.spec);
  if (a.seed) spec.seed = *a.seed;
  spec.validate();
  fs::create_directories(a.out);
  const auto res = generate(spec, a.out);
  std::cout << "wrote " << res.manifest.size() << " samples to " << res.manifest_path.string()
            << " (label/oracle agreement " << res.oracle_agreement << ")\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  fs::path config;
  fs::path out;
  fs::path manifest;
  std::string format;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers, epochs, batch, devices, steps_per_epoch, stop_after;
  std::optional<double> lr, reg_weight, rank_weight;
  std::string precision;
  bool no_fuse = false;
  bool resume = false;
};

template <typename T>
int run_training(const RunConfig& c, const DatasetManifest& train, const DatasetManifest* holdout,
                 const TrainArgs& a) {
  FitOptions opts;
  opts.out_dir = c.output_dir;
  opts.resume = a.resume;
  opts.stop = &g_stop;
  opts.stop_after_epoch = a.stop_after.value_or(0);
  if (c.data.holdout_manifest.empty() && c.data.holdout_fraction > 0) opts.split_seed = c.seed;
  TTAPlan plan = c.tta;
  plan.crop_size = c.augment.crop_size;
  opts.eval_plan = plan;
  opts.on_epoch = [](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " total " << r.total << " reg " << r.reg << " rank " << r.rank << " lr "
              << r.lr;
    if (r.train_srcc) std::cerr << " train_srcc " << *r.train_srcc;
    if (r.holdout_srcc) std::cerr << " holdout_srcc " << *r.holdout_srcc;
    std::cerr << "\n";
  };
  const auto res = fit<T>(train, c.model, c.train, c.augment, holdout, opts);
  if (!res.completed) {
    std::cerr << "stopped after epoch " << res.history.records.size() << "; continue with --resume\n";
    return g_stop.load() ? 2 : 0;
  }
  std::cout << "wrote " << (c.output_dir / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  RunConfig c = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.manifest.empty()) c.data.manifest = a.manifest;
  if (!a.format.empty()) c.data.format = parse_manifest_format(a.format);
  if (!a.out.empty()) c.output_dir = a.out;
  if (c.output_dir.empty()) c.output_dir = default_output_root() / "train";
  if (a.seed) apply_seed(c, *a.seed);
  if (a.workers) c.workers = c.train.workers = *a.workers;
  if (a.epochs) c.train.total_epochs = *a.epochs;
  if (a.batch) c.train.batch_size_per_device = *a.batch;
  if (a.devices) c.train.devices = *a.devices;
  if (a.steps_per_epoch) c.train.steps_per_epoch = *a.steps_per_epoch;
  if (a.lr) c.train.base_lr = *a.lr;
  if (a.reg_weight) c.train.reg_weight = *a.reg_weight;
  if (a.rank_weight) c.train.rank_weight = *a.rank_weight;
  if (a.no_fuse) c.model.fuse_stages = false;
  if (a.precision == "double") c.precision = Precision::Double;
  else if (a.precision == "float") c.precision = Precision::Float;
  else if (!a.precision.empty()) throw UsageError("--precision must be float or double");
  if (c.data.manifest.empty()) throw UsageError("no training manifest (set data.manifest or --manifest)");
  validate(c);

  const auto full = load_checked(c.data.manifest, c.data.format);
  DatasetManifest train = full, holdout;
  const DatasetManifest* hold = nullptr;
  if (!c.data.holdout_manifest.empty()) {
    holdout = load_checked(c.data.holdout_manifest, c.data.holdout_format);
    hold = &holdout;
  } else if (c.data.holdout_fraction > 0) {
    std::tie(train, holdout) = split_manifest(full, c.data.holdout_fraction, c.seed);
    hold = &holdout;
  }

  fs::create_directories(c.output_dir);
  Json resolved = to_json(c);
  write_run_log(c.output_dir, "train", resolved);
  resolved.erase("output_dir");
  write_json(c.output_dir / "config.json", resolved);
  std::cerr << "resolved config:\n" << to_json(c).dump(2) << "\n";

  return c.precision == Precision::Double ? run_training<double>(c, train, hold, a)
                                          : run_training<float>(c, train, hold, a);
}

// ---------------------------------------------------------------- eval / predict

struct TtaArgs {
  fs::path config;
  std::string strategy;
  std::optional<std::size_t> n_crops;
  std::string resize;
  std::optional<std::uint64_t> seed;
};

TTAPlan resolve_tta(const TtaArgs& a, const RunConfig& c, Size2 input) {
  TTAPlan p = c.tta;
  p.crop_size = input;
  if (!a.strategy.empty()) p.strategy = parse_crop_strategy(a.strategy);
  if (a.n_crops) p.n_crops = *a.n_crops;
  if (!a.resize.empty()) p.resize_to = a.resize == "none" ? Size2{0, 0} : parse_size_arg(a.resize);
  if (a.seed) p.seed = *a.seed;
  p.validate();
  return p;
}

Json tta_json(const TTAPlan& p) {
  return {{"strategy", to_string(p.strategy)},
          {"n_crops", p.n_crops},
          {"crop", Json::array({p.crop_size.height, p.crop_size.width})},
          {"resize", Json::array({p.resize_to.height, p.resize_to.width})},
          {"seed", p.seed}};
}

struct EvalArgs {
  TtaArgs tta;
  fs::path checkpoint;
  fs::path manifest;
  std::string format = "generic_csv";
  fs::path out;
};

int cmd_eval(const EvalArgs& a) {
  const RunConfig c = a.tta.config.empty() ? RunConfig{} : load_run_config(a.tta.config);
  const auto scorer = load_scorer(a.checkpoint);
  const TTAPlan plan = resolve_tta(a.tta, c, scorer->input_size());
  const auto manifest = load_checked(a.manifest, parse_manifest_format(a.format));
  const fs::path out = a.out.empty() ? default_output_root() / "eval" : a.out;
  fs::create_directories(out);

  Json settings{{"checkpoint", a.checkpoint.generic_string()},
                {"manifest", a.manifest.generic_string()},
                {"tta", tta_json(plan)}};
  write_run_log(out, "eval", settings);
  std::cerr << "tta plan: " << tta_json(plan).dump() << "\n";

  const auto report = evaluate(*scorer, manifest, plan);
  write_report(out / "report.json", report, settings);
  write_scatter_csv(out / "scatter.csv", report);
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("degenerate"); };
  std::cout << "n " << report.n() << " srcc " << show(report.srcc) << " plcc " << show(report.plcc)
            << " main_score " << show(report.main_score) << "\n";
  if (!report.excluded.empty()) std::cerr << "warning: " << report.excluded.size() << " images excluded\n";
  return 0;
}

struct PredictArgs {
  TtaArgs tta;
  fs::path checkpoint;
  fs::path ensemble;
  fs::path list;
  std::vector<std::string> images;
  fs::path out;
};

int cmd_predict(const PredictArgs& a) {
  if (a.checkpoint.empty() == a.ensemble.empty()) throw UsageError("give exactly one of --checkpoint or --ensemble");
  std::vector<fs::path> images(a.images.begin(), a.images.end());
  if (!a.list.empty()) {
    for (const auto& line : detail::read_lines(a.list)) {
      const auto t = detail::trim(line);
      if (!t.empty()) images.emplace_back(fs::path(t).is_absolute() ? fs::path(t) : a.list.parent_path() / t);
    }
  }
  if (images.empty()) throw UsageError("no images to score");

  std::vector<EnsembleMember> members;
  if (!a.checkpoint.empty()) {
    const RunConfig c = a.tta.config.empty() ? RunConfig{} : load_run_config(a.tta.config);
    EnsembleMember m;
    m.name = a.checkpoint.string();
    m.scorer = load_scorer(a.checkpoint);
    m.plan = resolve_tta(a.tta, c, m.scorer->input_size());
    members.push_back(std::move(m));
  } else {
    RunConfig c = load_run_config(a.ensemble);
    if (a.tta.seed) apply_seed(c, *a.tta.seed);
    if (!a.tta.strategy.empty()) c.ensemble.strategy = parse_crop_strategy(a.tta.strategy);
    if (a.tta.n_crops) c.ensemble.n_crops = *a.tta.n_crops;
    members = load_ensemble(c.ensemble);
    for (auto& m : members) {
      m.plan.crop_size = m.scorer->input_size();
      m.plan.validate();
    }
  }

  std::ostringstream csv;
  csv << "image_path,score\n";
  char buf[64];
  for (const auto& p : images) {
    const Image img = read_image(p);
    std::snprintf(buf, sizeof buf, "%.17g", ensemble_predict(members, img));
    csv << p.generic_string() << ',' << buf << '\n';
  }
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    std::ofstream out(a.out);
    if (!out) throw IoError("cannot write '" + a.out.string() + "'");
    out << csv.str();
  }
  return 0;
}

void add_tta_flags(CLI::App* cmd, TtaArgs& t) {
  cmd->add_option("--config", t.config, "Run config (its tta section supplies defaults)");
  cmd->add_option("--tta", t.strategy, "five_crop | center_crop | random_crops");
  cmd->add_option("--n-crops", t.n_crops, "Crops for random_crops");
  cmd->add_option("--resize", t.resize, "Resize before cropping: N, HxW or none");
  cmd->add_option("--seed", t.seed, "Seed for random crops");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-stage IQA toolkit"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--spec", sa.spec, "Synth spec JSON")->required();
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.seed, "Override the spec seed");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", ta.config, "Run config JSON");
  train->add_option("--out", ta.out, "Output directory");
  train->add_option("--manifest", ta.manifest, "Training manifest");
  train->add_option("--format", ta.format, "Manifest format");
  train->add_option("--seed", ta.seed, "Seed for every random stream");
  train->add_option("--workers", ta.workers, "Worker threads");
  train->add_option("--epochs", ta.epochs, "Total epochs");
  train->add_option("--batch", ta.batch, "Batch size per device");
  train->add_option("--devices", ta.devices, "Simulated devices");
  train->add_option("--steps-per-epoch", ta.steps_per_epoch, "Optimizer steps per epoch (0 = one pass)");
  train->add_option("--stop-after-epoch", ta.stop_after, "Stop early after this epoch (resumable)");
  train->add_option("--lr", ta.lr, "Base learning rate");
  train->add_option("--reg-weight", ta.reg_weight, "Regression loss weight");
  train->add_option("--rank-weight", ta.rank_weight, "Rank loss weight");
  train->add_option("--precision", ta.precision, "float or double");
  train->add_flag("--no-fuse", ta.no_fuse, "Last-stage-only head");
  train->add_flag("--resume", ta.resume, "Continue from <out>/last.ckpt");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint")->required();
  eval->add_option("--manifest", ea.manifest, "Manifest")->required();
  eval->add_option("--format", ea.format, "Manifest format");
  eval->add_option("--out", ea.out, "Output directory for report.json and scatter.csv");
  add_tta_flags(eval, ea.tta);

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Score images with a model or ensemble");
  predict->add_option("--checkpoint", pa.checkpoint, "Checkpoint");
  predict->add_option("--ensemble", pa.ensemble, "Run config with an ensemble section");
  predict->add_option("--list", pa.list, "File with one image path per line");
  predict->add_option("--out", pa.out, "Predictions CSV (default stdout)");
  predict->add_option("images", pa.images, "Image files");
  add_tta_flags(predict, pa.tta);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  std::signal(SIGINT, on_sigint);
  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*predict) return cmd_predict(pa);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
