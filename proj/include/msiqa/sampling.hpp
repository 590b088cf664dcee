#pragma once

// MOS-balanced weighted sampling and Siamese pair-batch assembly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "msiqa/augment.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/image.hpp"
#include "msiqa/manifest.hpp"

namespace msiqa {

inline constexpr std::size_t kDefaultSamplingBins = 10;

/// Equal-width bin of `mos` over [lo, hi]; the top edge falls in the last bin.
inline std::size_t mos_bin(double mos, double lo, double hi, std::size_t bins) {
  if (hi <= lo) return 0;
  const double t = (mos - lo) / (hi - lo);
  const auto b = static_cast<std::size_t>(std::floor(t * static_cast<double>(bins)));
  return std::min(b, bins - 1);
}

/// Inverse bin-frequency weights normalised to sum to one, so that every
/// non-empty MOS bin receives the same total draw probability.
inline std::vector<double> compute_sampling_weights(const DatasetManifest& m, std::size_t bins = kDefaultSamplingBins) {
  if (m.samples.empty()) throw ConfigError("compute_sampling_weights: empty manifest");
  if (bins == 0) throw ConfigError("compute_sampling_weights: bins must be >= 1");
  std::vector<std::size_t> counts(bins, 0);
  std::vector<std::size_t> bin_of(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    bin_of[i] = mos_bin(m.samples[i].mos, m.mos_min, m.mos_max, bins);
    ++counts[bin_of[i]];
  }
  std::vector<double> w(m.size());
  double total = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    w[i] = 1.0 / static_cast<double>(counts[bin_of[i]]);
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

/// Decoded-image cache keyed by path. Safe for concurrent use.
class ImageCache {
 public:
  const Image& get(const std::filesystem::path& p) {
    std::lock_guard lock(mutex_);
    auto it = images_.find(p.string());
    if (it == images_.end()) it = images_.emplace(p.string(), read_image(p)).first;
    return it->second;
  }

 private:
  std::mutex mutex_;
  std::map<std::string, Image> images_;
};

/// Augmented patches and labels arranged as consecutive pairs.
struct PairBatchInputs {
  std::vector<Image> patches;
  std::vector<double> mos;
  std::vector<std::size_t> sample_indices;
};

/// Index draws for one batch: weighted when `weights` is non-empty, else uniform.
template <typename Rng>
std::vector<std::size_t> draw_indices(std::size_t population, std::size_t count, std::span<const double> weights,
                                      Rng& rng) {
  std::vector<std::size_t> out(count);
  if (!weights.empty()) {
    if (weights.size() != population) throw ContractError("sampling weights do not match manifest size");
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    for (auto& i : out) i = pick(rng);
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, population - 1);
    for (auto& i : out) i = pick(rng);
  }
  return out;
}

/// Draws `batch_size` samples, augments each one with its own derived rng
/// stream and pairs them as (0,1), (2,3), ...; each patch inherits its
/// source image's MOS unchanged.
template <typename Rng>
PairBatchInputs make_pair_batch(const DatasetManifest& m, std::size_t batch_size, std::span<const double> weights,
                                Rng& rng, const AugmentationPlan& plan, Mode mode, ImageCache& cache) {
  if (batch_size < 2 || batch_size % 2 != 0) {
    throw ConfigError("batch size must be even and >= 2, got " + std::to_string(batch_size));
  }
  plan.validate();
  PairBatchInputs out;
  out.sample_indices = draw_indices(m.size(), batch_size, weights, rng);
  std::vector<std::uint64_t> seeds(batch_size);
  for (auto& s : seeds) s = rng();
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto& sample = m.samples[out.sample_indices[i]];
    std::mt19937_64 local(seeds[i]);
    out.patches.push_back(augment(cache.get(sample.image_path), plan, local, mode));
    out.mos.push_back(sample.mos);
  }
  return out;
}

}  // namespace msiqa
