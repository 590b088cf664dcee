#pragma once

// Siamese training loop: shared-parameter forward passes over pair batches,
// combined loss, AdamW with a warmup + cosine schedule, checkpoints and history.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "msiqa/checkpoint.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/evaluate.hpp"
#include "msiqa/inference.hpp"
#include "msiqa/losses.hpp"
#include "msiqa/metrics.hpp"
#include "msiqa/model.hpp"
#include "msiqa/optim.hpp"
#include "msiqa/rng.hpp"
#include "msiqa/sampling.hpp"

namespace msiqa {

struct TrainConfig {
  double base_lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  std::size_t batch_size_per_device = 64;
  std::size_t devices = 1;
  std::size_t warmup_epochs = 2;
  std::size_t total_epochs = 30;
  /// Optimiser steps per epoch; 0 means ceil(train size / global batch).
  std::size_t steps_per_epoch = 0;
  std::uint64_t seed = 0;
  double reg_weight = 1.0;
  double rank_weight = 1.0;
  bool weighted_sampling = true;
  std::size_t sampling_bins = kDefaultSamplingBins;
  std::size_t workers = 1;

  [[nodiscard]] std::size_t global_batch() const noexcept { return batch_size_per_device * devices; }

  void validate() const {
    if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("betas must lie in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size_per_device < 2 || batch_size_per_device % 2) {
      throw ConfigError("batch_size_per_device must be even and >= 2");
    }
    if (devices == 0) throw ConfigError("devices must be >= 1");
    if (total_epochs > 0 && warmup_epochs >= total_epochs) throw ConfigError("warmup_epochs must be < total_epochs");
    if (reg_weight < 0 || rank_weight < 0 || reg_weight + rank_weight == 0) {
      throw ConfigError("loss weights must be >= 0 and not both zero");
    }
    if (sampling_bins == 0) throw ConfigError("sampling_bins must be >= 1");
    if (workers == 0) throw ConfigError("workers must be >= 1");
  }
};

/// Settings used for single-machine runs on the Desk preset.
inline TrainConfig desk_train_config() {
  TrainConfig c;
  c.base_lr = 1e-4;
  c.batch_size_per_device = 8;
  c.steps_per_epoch = 30;
  return c;
}

/// Fixed-view pipeline for fitting small synthetic sets on the Desk preset:
/// full-frame resize to the model input, RGB only, no rotation.
inline AugmentationPlan desk_augmentation(Size2 input = {64, 64}) {
  AugmentationPlan a;
  a.resize_to = input;
  a.crop_size = input;
  a.rotation = false;
  a.colorspaces = {ColorSpace::RGB};
  return a;
}

/// Result-affecting settings (workers is excluded: it does not change results).
inline std::map<std::string, std::string> to_key_values(const TrainConfig& c) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  return {{"base_lr", num(c.base_lr)},
          {"beta1", num(c.beta1)},
          {"beta2", num(c.beta2)},
          {"weight_decay", num(c.weight_decay)},
          {"batch_size_per_device", std::to_string(c.batch_size_per_device)},
          {"devices", std::to_string(c.devices)},
          {"warmup_epochs", std::to_string(c.warmup_epochs)},
          {"total_epochs", std::to_string(c.total_epochs)},
          {"steps_per_epoch", std::to_string(c.steps_per_epoch)},
          {"seed", std::to_string(c.seed)},
          {"reg_weight", num(c.reg_weight)},
          {"rank_weight", num(c.rank_weight)},
          {"weighted_sampling", c.weighted_sampling ? "true" : "false"},
          {"sampling_bins", std::to_string(c.sampling_bins)}};
}

/// Decoupled decay applies to weight matrices only, not to biases, norms or
/// relative position tables.
template <typename T>
std::vector<bool> weight_decay_mask(const ModelParameters<T>& p) {
  std::vector<bool> mask(p.size());
  for (std::size_t s = 0; s < p.size(); ++s) {
    const auto& n = p.name(s);
    mask[s] = n.size() >= 7 && n.compare(n.size() - 7, 7, ".weight") == 0;
  }
  return mask;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Sum of per-device gradients, each device's gradient (of its own mean loss)
/// scaled by its share of the global batch.
template <typename T>
Gradients<T> combine_device_gradients(std::span<const Gradients<T>> device_grads, std::span<const std::size_t> counts) {
  if (device_grads.empty() || device_grads.size() != counts.size()) throw ContractError("device gradient mismatch");
  std::size_t total = 0;
  for (auto c : counts) total += c;
  Gradients<T> out = device_grads.front();
  for (auto& m : out) std::fill(m.data.begin(), m.data.end(), T(0));
  for (std::size_t d = 0; d < device_grads.size(); ++d) {
    const T w = static_cast<T>(static_cast<double>(counts[d]) / static_cast<double>(total));
    for (std::size_t s = 0; s < out.size(); ++s) {
      const auto& g = device_grads[d][s].data;
      auto& o = out[s].data;
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += w * g[i];
    }
  }
  return out;
}

template <typename T>
struct BatchGradients {
  TotalLoss loss;  // grad holds dL/d prediction for the global batch
  std::vector<double> predictions;
  Gradients<T> grads;
};

/// Loss and parameter gradients for one pair batch. Every image runs through
/// the same parameter store; gradients from both pair members accumulate
/// into one gradient set. The batch is split into `devices` equal contiguous
/// shards, each evaluating its own loss.
template <typename T>
BatchGradients<T> batch_gradients(const Network<T>& net, const ModelParameters<T>& params,
                                  std::span<const Image> patches, std::span<const double> mos, double reg_weight,
                                  double rank_weight, std::size_t devices = 1, std::size_t workers = 1) {
  const std::size_t n = patches.size();
  if (mos.size() != n) throw ContractError("batch_gradients: patches/mos length mismatch");
  if (devices == 0 || n % devices || (n / devices) % 2 || n / devices < 2) {
    throw ContractError("batch_gradients: batch of " + std::to_string(n) + " cannot be split into " +
                        std::to_string(devices) + " even shards");
  }
  std::vector<std::unique_ptr<Graph<T>>> graphs(n);
  std::vector<Var> scores(n);
  BatchGradients<T> out;
  out.predictions.resize(n);
  parallel_for(n, workers, [&](std::size_t i) {
    graphs[i] = std::make_unique<Graph<T>>();
    ParameterBinder<T> bind(*graphs[i], params);
    scores[i] = net.forward(bind, patches[i]);
    out.predictions[i] = static_cast<double>(graphs[i]->value(scores[i]).data[0]);
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(mos[i])) throw TrainingError("non-finite MOS at batch position " + std::to_string(i));
    if (!std::isfinite(out.predictions[i])) {
      throw TrainingError("non-finite prediction at batch position " + std::to_string(i));
    }
  }

  const std::size_t shard = n / devices;
  out.loss.grad.assign(n, 0.0);
  std::vector<std::vector<double>> local_grad(devices);
  for (std::size_t d = 0; d < devices; ++d) {
    PairBatch pb;
    pb.predictions.assign(out.predictions.begin() + d * shard, out.predictions.begin() + (d + 1) * shard);
    pb.targets.assign(mos.begin() + d * shard, mos.begin() + (d + 1) * shard);
    const auto local = total_loss(pb, reg_weight, rank_weight);
    const double w = static_cast<double>(shard) / static_cast<double>(n);
    out.loss.reg += w * local.reg;
    out.loss.rank += w * local.rank;
    for (std::size_t i = 0; i < shard; ++i) out.loss.grad[d * shard + i] = w * local.grad[i];
    local_grad[d] = local.grad;
  }
  out.loss.total = out.loss.reg + out.loss.rank;

  parallel_for(n, workers, [&](std::size_t i) {
    graphs[i]->backward(scores[i], static_cast<T>(local_grad[i / shard][i % shard]));
  });

  std::vector<Gradients<T>> device_grads(devices, params.zeros_like());
  for (std::size_t i = 0; i < n; ++i) {
    auto& g = device_grads[i / shard];
    graphs[i]->for_each_parameter_grad([&](std::size_t slot, const Matrix<T>& grad) {
      auto& dst = g[slot].data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += grad.data[k];
    });
    graphs[i].reset();
  }
  std::vector<std::size_t> counts(devices, shard);
  out.grads = combine_device_gradients<T>(device_grads, counts);
  return out;
}

struct StepOptions {
  double reg_weight = 1.0;
  double rank_weight = 1.0;
  std::size_t devices = 1;
  std::size_t workers = 1;
  std::size_t batch_id = 0;
};

struct StepRecord {
  double total = 0.0;
  double reg = 0.0;
  double rank = 0.0;
  std::vector<double> predictions;
};

/// One optimiser update. A non-finite loss or gradient aborts the step before
/// any parameter changes.
template <typename T>
StepRecord train_step(const Network<T>& net, ModelParameters<T>& params, AdamW<T>& opt,
                      const PairBatchInputs& batch, double lr, const StepOptions& o = {}) {
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  BatchGradients<T> bg;
  try {
    bg = batch_gradients(net, params, batch.patches, batch.mos, o.reg_weight, o.rank_weight, o.devices, o.workers);
  } catch (const TrainingError& e) {
    throw TrainingError(std::string(e.what()) + " in batch " + std::to_string(o.batch_id));
  }
  bool finite = std::isfinite(bg.loss.total);
  for (const auto& m : bg.grads) {
    for (T v : m.data) finite = finite && std::isfinite(v);
  }
  if (!finite) throw TrainingError("non-finite loss or gradient in batch " + std::to_string(o.batch_id));
  opt.step(params, bg.grads, lr);
  return {bg.loss.total, bg.loss.reg, bg.loss.rank, std::move(bg.predictions)};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double total = 0.0;
  double reg = 0.0;
  double rank = 0.0;
  double lr = 0.0;
  std::optional<double> train_srcc;
  std::optional<double> holdout_srcc;
  std::optional<double> holdout_plcc;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> split_seed;

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

namespace detail {
inline nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}
inline std::optional<double> opt_from(const nlohmann::ordered_json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}
}  // namespace detail

inline nlohmann::ordered_json record_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["total"] = r.total;
  j["reg"] = r.reg;
  j["rank"] = r.rank;
  j["lr"] = r.lr;
  j["train_srcc"] = detail::opt_json(r.train_srcc);
  j["holdout_srcc"] = detail::opt_json(r.holdout_srcc);
  j["holdout_plcc"] = detail::opt_json(r.holdout_plcc);
  return j;
}

inline nlohmann::ordered_json history_json(const TrainHistory& h) {
  nlohmann::ordered_json j;
  j["seed"] = h.seed;
  j["split_seed"] = h.split_seed ? nlohmann::ordered_json(*h.split_seed) : nlohmann::ordered_json(nullptr);
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& r : h.records) j["epochs"].push_back(record_json(r));
  return j;
}

inline TrainHistory history_from_json(const nlohmann::ordered_json& j) {
  TrainHistory h;
  h.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("split_seed").is_null()) h.split_seed = j.at("split_seed").get<std::uint64_t>();
  for (const auto& e : j.at("epochs")) {
    EpochRecord r;
    r.epoch = e.at("epoch").get<std::size_t>();
    r.total = e.at("total").get<double>();
    r.reg = e.at("reg").get<double>();
    r.rank = e.at("rank").get<double>();
    r.lr = e.at("lr").get<double>();
    r.train_srcc = detail::opt_from(e.at("train_srcc"));
    r.holdout_srcc = detail::opt_from(e.at("holdout_srcc"));
    r.holdout_plcc = detail::opt_from(e.at("holdout_plcc"));
    h.records.push_back(r);
  }
  return h;
}

struct FitOptions {
  /// Output directory for last.ckpt, best.ckpt, model.ckpt, history.json and
  /// history.jsonl. Empty: nothing is written and resume is unavailable.
  std::filesystem::path out_dir;
  bool resume = false;
  /// Holdout evaluation plan; crop/resize default to the augmentation plan.
  std::optional<TTAPlan> eval_plan;
  /// Stop (as if interrupted) once this many epochs are complete; 0 = never.
  std::size_t stop_after_epoch = 0;
  /// Seed of the train/holdout split, recorded in the history.
  std::optional<std::uint64_t> split_seed;
  const std::atomic<bool>* stop = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename T>
struct FitResult {
  ModelParameters<T> params;
  TrainHistory history;
  std::filesystem::path best_checkpoint;
  bool completed = true;
};

namespace detail {

inline std::string fingerprint(const BackboneConfig& model, const TrainConfig& cfg, const AugmentationPlan& aug) {
  std::string s;
  for (const auto& [k, v] : to_key_values(model)) s += "model." + k + "=" + v + ";";
  for (const auto& [k, v] : to_key_values(cfg)) s += "train." + k + "=" + v + ";";
  s += "aug.resize=" + std::to_string(aug.resize_to.height) + "x" + std::to_string(aug.resize_to.width) + ";";
  s += "aug.crop=" + std::to_string(aug.crop_size.height) + "x" + std::to_string(aug.crop_size.width) + ";";
  s += std::string("aug.rotation=") + (aug.rotation ? "1" : "0") + ";aug.colorspaces=";
  for (auto c : aug.colorspaces) s += to_string(c) + ",";
  return s;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Trains a fresh (or resumed) model. Epoch e draws its batches from a stream
/// derived from (seed, e), so a resumed run continues exactly where an
/// uninterrupted one would be.
template <typename T>
FitResult<T> fit(const DatasetManifest& train, const BackboneConfig& model, const TrainConfig& cfg,
                 const AugmentationPlan& aug, const DatasetManifest* holdout = nullptr, const FitOptions& opts = {}) {
  cfg.validate();
  aug.validate();
  model.validate();
  if (train.samples.empty()) throw ConfigError("training manifest is empty");
  if (!(aug.crop_size == Size2{model.input_height, model.input_width})) {
    throw ConfigError("augmentation crop size does not match the model input size");
  }
  Network<T> net(model);
  FitResult<T> res{net.init_parameters(cfg.seed), {}, {}, true};
  res.history.seed = cfg.seed;
  res.history.split_seed = opts.split_seed;
  AdamW<T> opt(res.params, AdamWConfig{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay}, weight_decay_mask(res.params));

  const bool persist = !opts.out_dir.empty();
  const auto last_path = opts.out_dir / "last.ckpt";
  const auto best_path = opts.out_dir / "best.ckpt";
  const std::string print = detail::fingerprint(model, cfg, aug);
  std::optional<double> best_score;
  std::size_t start_epoch = 0;

  if (persist) std::filesystem::create_directories(opts.out_dir);
  if (opts.resume) {
    if (!persist) throw ConfigError("resume requires an output directory");
    if (!std::filesystem::exists(last_path)) {
      throw ConfigError("nothing to resume: '" + last_path.string() + "' does not exist");
    }
    const Archive a = read_archive(last_path);
    if (a.get("train.fingerprint") != print) throw ConfigError("resume: checkpoint was written with different settings");
    res.params = load_parameters<T>(a, model);
    auto m = res.params.zeros_like(), v = res.params.zeros_like();
    for (std::size_t s = 0; s < res.params.size(); ++s) {
      const auto* tm = a.find("optim.m." + res.params.name(s));
      const auto* tv = a.find("optim.v." + res.params.name(s));
      if (!tm || !tv) throw ConfigError("resume: optimizer state missing for '" + res.params.name(s) + "'");
      for (std::size_t i = 0; i < m[s].size(); ++i) {
        m[s].data[i] = static_cast<T>(tm->values[i]);
        v[s].data[i] = static_cast<T>(tv->values[i]);
      }
    }
    opt.restore(std::move(m), std::move(v), detail::parse_size("train.steps", a.get("train.steps")));
    start_epoch = detail::parse_size("train.epoch", a.get("train.epoch"));
    res.history = history_from_json(nlohmann::ordered_json::parse(a.get("train.history")));
    if (a.get("train.best_score") != "none") best_score = std::stod(a.get("train.best_score"));
    if (std::filesystem::exists(best_path)) res.best_checkpoint = best_path;
  }

  const std::size_t batch = cfg.global_batch();
  const std::size_t spe =
      cfg.steps_per_epoch ? cfg.steps_per_epoch : std::max<std::size_t>(1, (train.size() + batch - 1) / batch);
  const std::size_t total_steps = cfg.total_epochs * spe;
  const std::vector<double> weights =
      cfg.weighted_sampling ? compute_sampling_weights(train, cfg.sampling_bins) : std::vector<double>{};
  TTAPlan eval_plan;
  if (opts.eval_plan) {
    eval_plan = *opts.eval_plan;
  } else {
    eval_plan.crop_size = aug.crop_size;
    eval_plan.resize_to = aug.resize_to;
    eval_plan.seed = cfg.seed;
  }
  ImageCache cache;
  StepOptions so{cfg.reg_weight, cfg.rank_weight, cfg.devices, cfg.workers, 0};

  for (std::size_t epoch = start_epoch; epoch < cfg.total_epochs; ++epoch) {
    auto rng = derived_stream(cfg.seed, {0x7472, epoch});
    EpochRecord rec;
    rec.epoch = epoch + 1;
    std::vector<double> preds, targets;
    double reg = 0.0, rank = 0.0;
    for (std::size_t s = 0; s < spe; ++s) {
      const std::size_t step = epoch * spe + s;
      const auto inputs = make_pair_batch(train, batch, weights, rng, aug, Mode::Train, cache);
      const double lr = cosine_lr(step, total_steps, cfg.warmup_epochs * spe, cfg.base_lr);
      if (s == 0) rec.lr = lr;
      so.batch_id = step;
      const auto sr = train_step(net, res.params, opt, inputs, lr, so);
      reg += sr.reg;
      rank += sr.rank;
      preds.insert(preds.end(), sr.predictions.begin(), sr.predictions.end());
      targets.insert(targets.end(), inputs.mos.begin(), inputs.mos.end());
    }
    rec.reg = reg / static_cast<double>(spe);
    rec.rank = rank / static_cast<double>(spe);
    rec.total = rec.reg + rec.rank;
    rec.train_srcc = srcc(preds, targets);
    if (holdout) {
      const NetworkScorer<T> snapshot(model, res.params);
      const auto report = evaluate(snapshot, *holdout, eval_plan);
      rec.holdout_srcc = report.srcc;
      rec.holdout_plcc = report.plcc;
    }
    res.history.records.push_back(rec);

    const auto score = holdout ? rec.holdout_srcc : rec.train_srcc;
    const bool improved = score && (!best_score || *score > *best_score);
    if (improved) best_score = score;
    if (persist) {
      if (improved) {
        Archive b;
        store_model(b, model, res.params);
        b.metadata["train.epoch"] = std::to_string(rec.epoch);
        b.metadata["train.score"] = nlohmann::json(*score).dump();
        write_archive(best_path, b);
        res.best_checkpoint = best_path;
      }
      Archive a;
      store_model(a, model, res.params);
      for (std::size_t s = 0; s < res.params.size(); ++s) {
        a.put("optim.m." + res.params.name(s), opt.first_moment()[s]);
        a.put("optim.v." + res.params.name(s), opt.second_moment()[s]);
      }
      a.metadata["train.epoch"] = std::to_string(rec.epoch);
      a.metadata["train.steps"] = std::to_string(opt.steps());
      a.metadata["train.best_score"] = best_score ? nlohmann::json(*best_score).dump() : "none";
      a.metadata["train.history"] = history_json(res.history).dump();
      a.metadata["train.fingerprint"] = print;
      write_archive(last_path, a);
      std::string lines;
      for (const auto& r : res.history.records) lines += record_json(r).dump() + "\n";
      detail::write_text(opts.out_dir / "history.jsonl", lines);
    }
    if (opts.on_epoch) opts.on_epoch(rec);
    if ((opts.stop_after_epoch && rec.epoch >= opts.stop_after_epoch) || (opts.stop && opts.stop->load())) {
      res.completed = false;
      return res;
    }
  }

  if (persist) {
    save_model(opts.out_dir / "model.ckpt", model, res.params);
    detail::write_text(opts.out_dir / "history.json", history_json(res.history).dump(2) + "\n");
  }
  return res;
}

}  // namespace msiqa
