#pragma once

// Test-time augmentation, harmonic-mean aggregation and ensembling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "msiqa/augment.hpp"
#include "msiqa/checkpoint.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/image.hpp"
#include "msiqa/model.hpp"

namespace msiqa {

/// Anything that maps a preprocessed RGB patch to a quality score.
class PatchScorer {
 public:
  virtual ~PatchScorer() = default;
  [[nodiscard]] virtual double score(const Image& patch) const = 0;
  [[nodiscard]] virtual Size2 input_size() const = 0;
};

template <typename T>
class NetworkScorer final : public PatchScorer {
 public:
  NetworkScorer(BackboneConfig config, ModelParameters<T> params)
      : net_(std::move(config)), params_(std::move(params)) {
    net_.check_parameters(params_);
  }

  [[nodiscard]] double score(const Image& patch) const override {
    return static_cast<double>(net_.forward(params_, patch));
  }
  [[nodiscard]] Size2 input_size() const override {
    return {net_.config().input_height, net_.config().input_width};
  }
  [[nodiscard]] const Network<T>& network() const noexcept { return net_; }
  [[nodiscard]] const ModelParameters<T>& parameters() const noexcept { return params_; }

 private:
  Network<T> net_;
  ModelParameters<T> params_;
};

/// Diagnostic scorer: the mean channel value of the patch. Stored in
/// checkpoints with model.kind=intensity_probe; used to exercise evaluation
/// plumbing with a model whose output is known exactly.
class IntensityProbe final : public PatchScorer {
 public:
  explicit IntensityProbe(Size2 input) : input_(input) {}
  [[nodiscard]] double score(const Image& patch) const override {
    double s = 0.0;
    for (double v : patch.pixels) s += v;
    return s / static_cast<double>(patch.pixels.size());
  }
  [[nodiscard]] Size2 input_size() const override { return input_; }

 private:
  Size2 input_;
};

inline void save_intensity_probe(const std::filesystem::path& path, Size2 input) {
  Archive a;
  a.metadata["model.kind"] = "intensity_probe";
  a.metadata["model.input_height"] = std::to_string(input.height);
  a.metadata["model.input_width"] = std::to_string(input.width);
  write_archive(path, a);
}

/// Loads a scorer from a checkpoint, dispatching on model.kind. Networks
/// saved with 32-bit payloads run in float, 64-bit payloads in double.
inline std::unique_ptr<PatchScorer> load_scorer(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  const auto& kind = a.get("model.kind");
  if (kind == "intensity_probe") {
    return std::make_unique<IntensityProbe>(Size2{detail::parse_size("input_height", a.get("model.input_height")),
                                                  detail::parse_size("input_width", a.get("model.input_width"))});
  }
  if (kind != "network") throw ConfigError("checkpoint '" + path.string() + "' has unknown model.kind '" + kind + "'");
  const auto config = load_backbone_config(a);
  const bool wide = !a.tensors.empty() && a.tensors.front().width == 8;
  if (wide) return std::make_unique<NetworkScorer<double>>(config, load_parameters<double>(a, config));
  return std::make_unique<NetworkScorer<float>>(config, load_parameters<float>(a, config));
}

enum class CropStrategy { FiveCrop, RandomCrops, CenterCrop };

inline std::string to_string(CropStrategy s) {
  switch (s) {
    case CropStrategy::FiveCrop: return "five_crop";
    case CropStrategy::RandomCrops: return "random_crops";
    case CropStrategy::CenterCrop: return "center_crop";
  }
  return "five_crop";
}

inline CropStrategy parse_crop_strategy(std::string_view s) {
  if (s == "five_crop") return CropStrategy::FiveCrop;
  if (s == "random_crops") return CropStrategy::RandomCrops;
  if (s == "center_crop") return CropStrategy::CenterCrop;
  throw ConfigError("unknown crop strategy '" + std::string(s) + "'");
}

inline constexpr std::size_t kDefaultTtaCrops = 20;

struct TTAPlan {
  CropStrategy strategy = CropStrategy::FiveCrop;
  std::size_t n_crops = kDefaultTtaCrops;
  Size2 crop_size{64, 64};
  /// Resize target applied before cropping; {0,0} keeps the source size.
  Size2 resize_to{72, 72};
  std::uint64_t seed = 0;

  void validate() const {
    if (n_crops == 0) throw ConfigError("n_crops must be >= 1");
    if (crop_size.height == 0 || crop_size.width == 0) throw ConfigError("crop size must be positive");
    if (resize_to.height != 0 && (crop_size.height > resize_to.height || crop_size.width > resize_to.width)) {
      throw ConfigError("crop size must not exceed the resize target");
    }
  }
};

/// Four corners then centre: top-left, top-right, bottom-left, bottom-right, centre.
inline std::vector<Image> five_crop(const Image& image, Size2 size) {
  if (size.height > image.height || size.width > image.width) throw ConfigError("five_crop: crop larger than image");
  const std::size_t bottom = image.height - size.height;
  const std::size_t right = image.width - size.width;
  return {crop(image, 0, 0, size), crop(image, 0, right, size), crop(image, bottom, 0, size),
          crop(image, bottom, right, size), crop(image, bottom / 2, right / 2, size)};
}

template <typename Rng>
std::vector<Image> random_crops(const Image& image, Size2 size, std::size_t n, Rng& rng) {
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_crop(image, size, rng));
  return out;
}

inline constexpr double kHarmonicEpsilon = 1e-3;

struct HarmonicMean {
  double value = 0.0;
  double offset = 0.0;  // > 0 when non-positive scores forced a shift
  [[nodiscard]] bool shifted() const noexcept { return offset > 0.0; }
};

/// n / sum(1 / x_i). Scores below epsilon are handled by shifting every score
/// by max(0, epsilon - min) before aggregating and subtracting it afterwards.
inline HarmonicMean harmonic_mean(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("harmonic_mean: no scores");
  for (double s : scores) {
    if (!std::isfinite(s)) throw ContractError("harmonic_mean: non-finite score");
  }
  const double mn = *std::min_element(scores.begin(), scores.end());
  HarmonicMean out;
  out.offset = mn < kHarmonicEpsilon ? kHarmonicEpsilon - mn : 0.0;
  double inv = 0.0;
  for (double s : scores) inv += 1.0 / (s + out.offset);
  out.value = static_cast<double>(scores.size()) / inv - out.offset;
  return out;
}

struct Prediction {
  double score = 0.0;
  std::size_t patches = 0;
  bool shifted = false;
  std::vector<double> patch_scores;
};

/// Test-mode crops of an image under `plan` (RGB, no rotation).
inline std::vector<Image> tta_patches(const Image& image, const TTAPlan& plan) {
  plan.validate();
  const Image resized = plan.resize_to.height ? resize_image(image, plan.resize_to) : image;
  switch (plan.strategy) {
    case CropStrategy::FiveCrop: return five_crop(resized, plan.crop_size);
    case CropStrategy::CenterCrop:
      if (plan.crop_size.height > resized.height || plan.crop_size.width > resized.width) {
        throw ConfigError("center crop larger than image");
      }
      return {crop(resized, (resized.height - plan.crop_size.height) / 2, (resized.width - plan.crop_size.width) / 2,
                   plan.crop_size)};
    case CropStrategy::RandomCrops: {
      std::mt19937_64 rng(plan.seed);
      return random_crops(resized, plan.crop_size, plan.n_crops, rng);
    }
  }
  return {};
}

/// resize -> crops -> per-patch score -> harmonic mean.
inline Prediction predict_image(const PatchScorer& scorer, const Image& image, const TTAPlan& plan) {
  if (!(scorer.input_size() == plan.crop_size)) {
    throw ConfigError("TTA crop size " + std::to_string(plan.crop_size.height) + "x" +
                      std::to_string(plan.crop_size.width) + " does not match model input " +
                      std::to_string(scorer.input_size().height) + "x" + std::to_string(scorer.input_size().width));
  }
  Prediction p;
  for (const auto& patch : tta_patches(image, plan)) p.patch_scores.push_back(scorer.score(patch));
  const auto hm = harmonic_mean(p.patch_scores);
  p.score = hm.value;
  p.shifted = hm.shifted();
  p.patches = p.patch_scores.size();
  return p;
}

struct EnsembleMember {
  std::string name;
  std::shared_ptr<const PatchScorer> scorer;
  TTAPlan plan;
};

/// Declarative ensemble: each member has its own checkpoint and resize target;
/// the crop size is shared.
struct EnsembleSpec {
  struct Member {
    std::filesystem::path checkpoint;
    Size2 resize_to;
  };
  std::vector<Member> members;
  Size2 crop_size{64, 64};
  CropStrategy strategy = CropStrategy::FiveCrop;
  std::size_t n_crops = kDefaultTtaCrops;
  std::uint64_t seed = 0;
};

/// Loads every member; a failure names the offending member.
inline std::vector<EnsembleMember> load_ensemble(const EnsembleSpec& spec) {
  if (spec.members.empty()) throw ConfigError("ensemble has no members");
  std::vector<EnsembleMember> out;
  for (std::size_t i = 0; i < spec.members.size(); ++i) {
    const auto& m = spec.members[i];
    EnsembleMember em;
    em.name = "member " + std::to_string(i) + " (" + m.checkpoint.string() + ")";
    try {
      em.scorer = load_scorer(m.checkpoint);
    } catch (const std::exception& e) {
      throw ConfigError("failed to load ensemble " + em.name + ": " + e.what());
    }
    em.plan.strategy = spec.strategy;
    em.plan.n_crops = spec.n_crops;
    em.plan.crop_size = spec.crop_size;
    em.plan.resize_to = m.resize_to;
    em.plan.seed = spec.seed;
    out.push_back(std::move(em));
  }
  return out;
}

/// Uniform average of the members' predict_image scores.
inline double ensemble_predict(std::span<const EnsembleMember> members, const Image& image) {
  if (members.empty()) throw ConfigError("ensemble has no members");
  double sum = 0.0;
  for (const auto& m : members) sum += predict_image(*m.scorer, image, m.plan).score;
  return sum / static_cast<double>(members.size());
}

}  // namespace msiqa
