#pragma once

// JSON run configuration for the command-line tool. Every section is
// optional and falls back to the library defaults; unknown keys are errors.
//
//   {
//     "seed": 0, "workers": 1, "output_dir": "runs/desk", "precision": "float",
//     "data":     {"manifest": "...", "format": "generic_csv",
//                  "holdout_manifest": "...", "holdout_format": "...", "holdout_fraction": 0.2},
//     "model":    {"preset": "desk", "embed_dim": 24, "depths": [1,1,2,1], "heads": [2,2,4,4],
//                  "window_size": 4, "patch_size": 4, "mlp_ratio": 4,
//                  "input_size": [64,64], "fuse_stages": true},
//     "train":    {"base_lr": 3e-4, "beta1": 0.9, "beta2": 0.999, "weight_decay": 0.01,
//                  "batch_size_per_device": 8, "devices": 1, "warmup_epochs": 2,
//                  "total_epochs": 30, "steps_per_epoch": 0, "reg_weight": 1, "rank_weight": 1,
//                  "weighted_sampling": true, "sampling_bins": 10},
//     "augment":  {"resize": [72,72], "crop": [64,64], "rotation": true,
//                  "colorspaces": ["rgb","hsv","lab","gray"]},
//     "tta":      {"strategy": "five_crop", "n_crops": 20, "crop": [64,64], "resize": [72,72]},
//     "ensemble": {"members": [{"checkpoint": "...", "resize": [72,72]}]}
//   }
//
// Relative paths are resolved against the directory of the config file.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "msiqa/augment.hpp"
#include "msiqa/config.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/inference.hpp"
#include "msiqa/manifest.hpp"
#include "msiqa/synth.hpp"
#include "msiqa/trainer.hpp"

namespace msiqa {

using Json = nlohmann::ordered_json;

inline constexpr const char* kOutputRootEnv = "MSIQA_OUTPUT_ROOT";

/// Default output root: $MSIQA_OUTPUT_ROOT, else ./runs.
inline std::filesystem::path default_output_root() {
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "runs";
}

enum class Precision { Float, Double };

struct DataConfig {
  std::filesystem::path manifest;
  ManifestFormat format = ManifestFormat::GenericCsv;
  std::filesystem::path holdout_manifest;
  ManifestFormat holdout_format = ManifestFormat::GenericCsv;
  /// Share of the training manifest held out when no holdout manifest is given; 0 disables.
  double holdout_fraction = 0.0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::filesystem::path output_dir;
  Precision precision = Precision::Float;
  DataConfig data;
  BackboneConfig model;
  TrainConfig train = desk_train_config();
  AugmentationPlan augment;
  TTAPlan tta;
  EnsembleSpec ensemble;
};

namespace detail {

/// Reads keys from one JSON object and rejects any key that was never read.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + label() + "' must be an object");
  }

  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + prefix() + k + "'");
    }
  }

  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  const Json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename V>
  void read(const std::string& key, V& out) {
    if (const auto* v = find(key)) {
      bool ok = true;
      if constexpr (std::is_same_v<V, bool>) {
        ok = v->is_boolean();
      } else if constexpr (std::is_unsigned_v<V>) {
        ok = v->is_number_unsigned();
      } else if constexpr (std::is_floating_point_v<V>) {
        ok = v->is_number();
      }
      if (!ok) throw ConfigError("config: '" + prefix() + key + "' has the wrong type");
      try {
        out = v->get<V>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: '" + prefix() + key + "' has the wrong type");
      }
    }
  }

  void read_size2(const std::string& key, Size2& out) {
    if (const auto* v = find(key)) {
      if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number_unsigned() || !(*v)[1].is_number_unsigned()) {
        throw ConfigError("config: '" + prefix() + key + "' must be [height, width]");
      }
      out = {(*v)[0].get<std::size_t>(), (*v)[1].get<std::size_t>()};
    }
  }

  void read_path(const std::string& key, std::filesystem::path& out, const std::filesystem::path& base) {
    std::string s;
    if (find(key)) {
      read(key, s);
      out = std::filesystem::path(s).is_absolute() ? std::filesystem::path(s) : base / s;
    }
  }

  [[nodiscard]] std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  [[nodiscard]] std::string label() const { return path_.empty() ? "<root>" : path_; }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Json size2_json(Size2 s) { return Json::array({s.height, s.width}); }

inline std::array<std::size_t, kStages> stage_list(const Json& v, const std::string& key) {
  if (!v.is_array() || v.size() != kStages) throw ConfigError("config: '" + key + "' needs 4 entries");
  std::array<std::size_t, kStages> a{};
  for (std::size_t i = 0; i < kStages; ++i) {
    if (!v[i].is_number_unsigned()) throw ConfigError("config: '" + key + "' entries must be non-negative integers");
    a[i] = v[i].get<std::size_t>();
  }
  return a;
}

}  // namespace detail

inline Json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline RunConfig parse_run_config(const Json& j, const std::filesystem::path& base = {}) {
  RunConfig c;
  detail::Section root(j, "");
  root.read("seed", c.seed);
  root.read("workers", c.workers);
  root.read_path("output_dir", c.output_dir, base);
  if (const auto* p = root.find("precision")) {
    const auto s = p->is_string() ? p->get<std::string>() : "";
    if (s == "float") c.precision = Precision::Float;
    else if (s == "double") c.precision = Precision::Double;
    else throw ConfigError("config: 'precision' must be \"float\" or \"double\"");
  }

  if (const auto* d = root.find("data")) {
    detail::Section s(*d, "data");
    s.read_path("manifest", c.data.manifest, base);
    s.read_path("holdout_manifest", c.data.holdout_manifest, base);
    std::string f;
    if (s.find("format")) {
      s.read("format", f);
      c.data.format = parse_manifest_format(f);
    }
    if (s.find("holdout_format")) {
      s.read("holdout_format", f);
      c.data.holdout_format = parse_manifest_format(f);
    }
    s.read("holdout_fraction", c.data.holdout_fraction);
  }

  if (const auto* m = root.find("model")) {
    detail::Section s(*m, "model");
    if (const auto* p = s.find("preset")) {
      if (!p->is_string()) throw ConfigError("config: 'model.preset' must be a string");
      const auto preset = parse_preset(p->get<std::string>());
      if (preset != SizePreset::Custom) c.model = make_preset(preset);
      c.model.preset = preset;
    }
    bool custom = false;
    if (const auto* v = s.find("depths")) c.model.depths = detail::stage_list(*v, "model.depths"), custom = true;
    if (const auto* v = s.find("heads")) c.model.heads = detail::stage_list(*v, "model.heads"), custom = true;
    if (s.find("embed_dim")) s.read("embed_dim", c.model.embed_dim), custom = true;
    s.read("window_size", c.model.window_size);
    s.read("patch_size", c.model.patch_size);
    s.read("mlp_ratio", c.model.mlp_ratio);
    s.read("fuse_stages", c.model.fuse_stages);
    Size2 in{c.model.input_height, c.model.input_width};
    s.read_size2("input_size", in);
    c.model.input_height = in.height;
    c.model.input_width = in.width;
    if (custom && c.model.preset != SizePreset::Custom) {
      const auto ref = make_preset(c.model.preset);
      if (ref.embed_dim != c.model.embed_dim || ref.depths != c.model.depths || ref.heads != c.model.heads) {
        c.model.preset = SizePreset::Custom;
      }
    }
  }

  if (const auto* t = root.find("train")) {
    detail::Section s(*t, "train");
    auto& tc = c.train;
    s.read("base_lr", tc.base_lr);
    s.read("beta1", tc.beta1);
    s.read("beta2", tc.beta2);
    s.read("weight_decay", tc.weight_decay);
    s.read("batch_size_per_device", tc.batch_size_per_device);
    s.read("devices", tc.devices);
    s.read("warmup_epochs", tc.warmup_epochs);
    s.read("total_epochs", tc.total_epochs);
    s.read("steps_per_epoch", tc.steps_per_epoch);
    s.read("reg_weight", tc.reg_weight);
    s.read("rank_weight", tc.rank_weight);
    s.read("weighted_sampling", tc.weighted_sampling);
    s.read("sampling_bins", tc.sampling_bins);
  }

  if (const auto* a = root.find("augment")) {
    detail::Section s(*a, "augment");
    s.read_size2("resize", c.augment.resize_to);
    s.read_size2("crop", c.augment.crop_size);
    s.read("rotation", c.augment.rotation);
    std::vector<std::string> cs;
    if (s.find("colorspaces")) {
      s.read("colorspaces", cs);
      c.augment.colorspaces.clear();
      for (const auto& x : cs) c.augment.colorspaces.push_back(parse_colorspace(x));
    }
  }

  c.tta.crop_size = {c.model.input_height, c.model.input_width};
  if (const auto* t = root.find("tta")) {
    detail::Section s(*t, "tta");
    std::string strat;
    if (s.find("strategy")) {
      s.read("strategy", strat);
      c.tta.strategy = parse_crop_strategy(strat);
    }
    s.read("n_crops", c.tta.n_crops);
    s.read_size2("crop", c.tta.crop_size);
    s.read_size2("resize", c.tta.resize_to);
  }

  if (const auto* e = root.find("ensemble")) {
    detail::Section s(*e, "ensemble");
    if (const auto* members = s.find("members")) {
      if (!members->is_array()) throw ConfigError("config: 'ensemble.members' must be an array");
      for (std::size_t i = 0; i < members->size(); ++i) {
        detail::Section ms((*members)[i], "ensemble.members[" + std::to_string(i) + "]");
        EnsembleSpec::Member m;
        m.resize_to = c.tta.resize_to;
        ms.read_path("checkpoint", m.checkpoint, base);
        ms.read_size2("resize", m.resize_to);
        if (m.checkpoint.empty()) throw ConfigError("config: ensemble member " + std::to_string(i) + " has no checkpoint");
        c.ensemble.members.push_back(std::move(m));
      }
    }
  }

  // Single seed and worker settings drive every component.
  c.train.seed = c.seed;
  c.train.workers = c.workers;
  c.augment.seed = c.seed;
  c.tta.seed = c.seed;
  c.ensemble.seed = c.seed;
  c.ensemble.crop_size = c.tta.crop_size;
  c.ensemble.strategy = c.tta.strategy;
  c.ensemble.n_crops = c.tta.n_crops;
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(load_json_file(path), path.parent_path());
}

/// Re-derives the seed-dependent fields after command-line overrides.
inline void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = c.train.seed = c.augment.seed = c.tta.seed = c.ensemble.seed = seed;
}

inline void validate(const RunConfig& c) {
  c.model.validate();
  c.train.validate();
  c.augment.validate();
  c.tta.validate();
  if (c.data.holdout_fraction < 0 || c.data.holdout_fraction >= 1) {
    throw ConfigError("data.holdout_fraction must be in [0,1)");
  }
}

inline const char* format_name(ManifestFormat f) {
  switch (f) {
    case ManifestFormat::GenericCsv: return "generic_csv";
    case ManifestFormat::Tid2013: return "tid2013";
    case ManifestFormat::Koniq10k: return "koniq10k";
    case ManifestFormat::Pipal: return "pipal";
  }
  return "generic_csv";
}

/// The fully resolved configuration as written to logs.
inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["output_dir"] = c.output_dir.generic_string();
  j["precision"] = c.precision == Precision::Float ? "float" : "double";
  j["data"] = {{"manifest", c.data.manifest.generic_string()},
               {"format", format_name(c.data.format)},
               {"holdout_manifest", c.data.holdout_manifest.generic_string()},
               {"holdout_format", format_name(c.data.holdout_format)},
               {"holdout_fraction", c.data.holdout_fraction}};
  j["model"] = {{"preset", to_string(c.model.preset)},
                {"embed_dim", c.model.embed_dim},
                {"depths", c.model.depths},
                {"heads", c.model.heads},
                {"window_size", c.model.window_size},
                {"patch_size", c.model.patch_size},
                {"mlp_ratio", c.model.mlp_ratio},
                {"input_size", detail::size2_json({c.model.input_height, c.model.input_width})},
                {"fuse_stages", c.model.fuse_stages}};
  const auto& t = c.train;
  j["train"] = {{"base_lr", t.base_lr},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"weight_decay", t.weight_decay},
                {"batch_size_per_device", t.batch_size_per_device},
                {"devices", t.devices},
                {"warmup_epochs", t.warmup_epochs},
                {"total_epochs", t.total_epochs},
                {"steps_per_epoch", t.steps_per_epoch},
                {"reg_weight", t.reg_weight},
                {"rank_weight", t.rank_weight},
                {"weighted_sampling", t.weighted_sampling},
                {"sampling_bins", t.sampling_bins}};
  Json cs = Json::array();
  for (auto x : c.augment.colorspaces) cs.push_back(to_string(x));
  j["augment"] = {{"resize", detail::size2_json(c.augment.resize_to)},
                  {"crop", detail::size2_json(c.augment.crop_size)},
                  {"rotation", c.augment.rotation},
                  {"colorspaces", cs}};
  j["tta"] = {{"strategy", to_string(c.tta.strategy)},
              {"n_crops", c.tta.n_crops},
              {"crop", detail::size2_json(c.tta.crop_size)},
              {"resize", detail::size2_json(c.tta.resize_to)}};
  Json members = Json::array();
  for (const auto& m : c.ensemble.members) {
    members.push_back({{"checkpoint", m.checkpoint.generic_string()}, {"resize", detail::size2_json(m.resize_to)}});
  }
  j["ensemble"] = {{"members", members}};
  return j;
}

/// Synthetic dataset spec from JSON (same strictness rules).
inline SynthSpec parse_synth_spec(const Json& j) {
  SynthSpec s;
  detail::Section sec(j, "");
  sec.read("n_references", s.n_references);
  if (sec.find("distortion_types")) {
    std::vector<std::string> types;
    sec.read("distortion_types", types);
    s.distortion_types.clear();
    for (const auto& t : types) s.distortion_types.push_back(parse_distortion(t));
  }
  sec.read("levels_per_type", s.levels_per_type);
  sec.read_size2("image_size", s.image_size);
  sec.read("seed", s.seed);
  sec.read("mos_top", s.mos_top);
  sec.read("mos_bottom", s.mos_bottom);
  sec.read("label_noise", s.label_noise);
  sec.read("imbalanced", s.imbalanced);
  return s;
}

inline SynthSpec load_synth_spec(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("synth spec '" + path.string() + "' does not exist");
  return parse_synth_spec(load_json_file(path));
}

}  // namespace msiqa
