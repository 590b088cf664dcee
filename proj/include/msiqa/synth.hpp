#pragma once

// Synthetic IQA dataset with a known quality ordering.
//
// Each procedural reference image (smooth colour gradient, random shapes and a
// sinusoidal texture) is distorted at every (type, level). Severity s lies in
// [0,1] with level 0 the identity; the label is
//   mos = clamp(mos_top - (mos_top - mos_bottom) * s + N(0, label_noise), 0, 1)
// so the noise-free MOS strictly decreases with level inside a family.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "msiqa/augment.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/image.hpp"
#include "msiqa/manifest.hpp"
#include "msiqa/rng.hpp"

namespace msiqa {

enum class Distortion { GaussianBlur, AdditiveNoise, Quantization };

inline std::string to_string(Distortion d) {
  switch (d) {
    case Distortion::GaussianBlur: return "gaussian_blur";
    case Distortion::AdditiveNoise: return "additive_noise";
    case Distortion::Quantization: return "quantization";
  }
  return "gaussian_blur";
}

inline Distortion parse_distortion(std::string_view s) {
  if (s == "gaussian_blur") return Distortion::GaussianBlur;
  if (s == "additive_noise") return Distortion::AdditiveNoise;
  if (s == "quantization") return Distortion::Quantization;
  throw ConfigError("unknown distortion '" + std::string(s) + "'");
}

struct SynthSpec {
  std::size_t n_references = 5;
  std::vector<Distortion> distortion_types{Distortion::GaussianBlur, Distortion::AdditiveNoise,
                                           Distortion::Quantization};
  std::size_t levels_per_type = 4;
  Size2 image_size{72, 72};
  std::uint64_t seed = 0;
  double mos_top = 0.9;
  double mos_bottom = 0.1;
  double label_noise = 0.02;
  /// Middle-heavy severity distribution (levels >= 1 drawn from a
  /// three-uniform mean and sorted) instead of evenly spaced severities.
  bool imbalanced = false;

  void validate() const {
    if (n_references == 0) throw ConfigError("n_references must be >= 1");
    if (distortion_types.empty()) throw ConfigError("at least one distortion type is required");
    if (levels_per_type < 2) throw ConfigError("levels_per_type must be >= 2");
    if (image_size.height < 32 || image_size.width < 32) throw ConfigError("synthetic images must be at least 32x32");
    if (!(mos_top > mos_bottom)) throw ConfigError("mos_top must exceed mos_bottom");
    if (label_noise < 0) throw ConfigError("label_noise must be >= 0");
  }
};

/// The small spec shipped for fast tests: 2 references x 2 types x 3 levels at 48x48.
inline SynthSpec fixture_spec() {
  SynthSpec s;
  s.n_references = 2;
  s.distortion_types = {Distortion::GaussianBlur, Distortion::AdditiveNoise};
  s.levels_per_type = 3;
  s.image_size = {48, 48};
  return s;
}

inline Image make_reference(Size2 size, std::uint64_t seed, std::size_t index) {
  auto rng = derived_stream(seed, {1, index});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(size.height, size.width);
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = 0.15 + 0.7 * u(rng);
    c1[c] = 0.15 + 0.7 * u(rng);
  }
  const double angle = 2.0 * std::numbers::pi * u(rng);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < size.height; ++y) {
    for (std::size_t x = 0; x < size.width; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(size.height - 1) - 0.5;
      const double fx = static_cast<double>(x) / static_cast<double>(size.width - 1) - 0.5;
      const double t = std::clamp(0.5 + (fx * ca + fy * sa), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = c0[c] * (1 - t) + c1[c] * t;
    }
  }
  const int shapes = 3 + static_cast<int>(u(rng) * 4);
  for (int s = 0; s < shapes; ++s) {
    double col[3];
    for (auto& c : col) c = u(rng);
    const double cy = u(rng) * size.height, cx = u(rng) * size.width;
    const double r = (0.1 + 0.25 * u(rng)) * std::min(size.height, size.width);
    const bool circle = u(rng) < 0.5;
    for (std::size_t y = 0; y < size.height; ++y) {
      for (std::size_t x = 0; x < size.width; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const bool inside = circle ? dy * dy + dx * dx <= r * r : std::abs(dy) <= r * 0.7 && std::abs(dx) <= r;
        if (inside) {
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
        }
      }
    }
  }
  // Two sinusoidal gratings give every region fine detail for blur to remove.
  double freq[2], amp[2], dir[2][2], phase[2];
  for (int k = 0; k < 2; ++k) {
    freq[k] = 0.8 + 1.2 * u(rng);
    amp[k] = 0.06 + 0.06 * u(rng);
    const double a = std::numbers::pi * u(rng);
    dir[k][0] = std::cos(a);
    dir[k][1] = std::sin(a);
    phase[k] = 2.0 * std::numbers::pi * u(rng);
  }
  for (std::size_t y = 0; y < size.height; ++y) {
    for (std::size_t x = 0; x < size.width; ++x) {
      double v = 0.0;
      for (int k = 0; k < 2; ++k) {
        v += amp[k] * std::sin(freq[k] * (static_cast<double>(x) * dir[k][0] + static_cast<double>(y) * dir[k][1]) +
                               phase[k]);
      }
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(img.at(y, x, c) + v, 0.0, 1.0);
    }
  }
  quantize_8bit(img);
  return img;
}

inline Image gaussian_blur(const Image& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  auto pass = [&](const Image& in, bool horizontal) {
    Image out(in.height, in.width);
    const auto h = static_cast<long>(in.height), w = static_cast<long>(in.width);
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            const long yy = horizontal ? y : std::clamp(y + i, 0L, h - 1);
            const long xx = horizontal ? std::clamp(x + i, 0L, w - 1) : x;
            acc += k[i + radius] * in.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c);
          }
          out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = acc;
        }
      }
    }
    return out;
  };
  return pass(pass(src, true), false);
}

/// Applies a distortion at severity s in [0,1]; s = 0 returns the input unchanged.
template <typename Rng>
Image distort(const Image& ref, Distortion type, double severity, Rng& rng) {
  if (severity <= 0.0) return ref;
  Image out;
  switch (type) {
    case Distortion::GaussianBlur: out = gaussian_blur(ref, 3.0 * severity); break;
    case Distortion::AdditiveNoise: {
      out = ref;
      std::normal_distribution<double> n(0.0, 0.25 * severity);
      for (auto& v : out.pixels) v = std::clamp(v + n(rng), 0.0, 1.0);
      break;
    }
    case Distortion::Quantization: {
      out = ref;
      const double levels = std::max(2.0, std::round(std::pow(32.0, 1.0 - severity)));
      for (auto& v : out.pixels) v = std::round(v * (levels - 1.0)) / (levels - 1.0);
      break;
    }
  }
  quantize_8bit(out);
  return out;
}

struct SynthResult {
  DatasetManifest manifest;
  std::filesystem::path manifest_path;
  /// Share of same-family pairs whose noisy MOS agrees with the severity order.
  double oracle_agreement = 1.0;
};

inline const std::vector<std::string>& synth_attribute_columns() {
  static const std::vector<std::string> cols{"reference", "distortion", "level", "severity", "mos_clean"};
  return cols;
}

struct OrderedPair {
  std::size_t better = 0;
  std::size_t worse = 0;
};

/// Ground-truth order for every same-family pair (same reference and
/// distortion, different level); the lower severity is the better image.
inline std::vector<OrderedPair> oracle_ranking(const DatasetManifest& m) {
  struct Key {
    std::string family;
    double severity;
  };
  std::vector<Key> keys;
  for (const auto& s : m.samples) {
    const auto& a = s.attributes;
    if (s.dataset_id != "synth" || !a.count("reference") || !a.count("distortion") || !a.count("severity")) {
      throw ConfigError("oracle_ranking: '" + s.image_path.string() + "' was not produced by the synthetic generator");
    }
    keys.push_back({a.at("reference") + "/" + a.at("distortion"), std::stod(a.at("severity"))});
  }
  std::vector<OrderedPair> out;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    for (std::size_t j = i + 1; j < keys.size(); ++j) {
      if (keys[i].family != keys[j].family || keys[i].severity == keys[j].severity) continue;
      if (keys[i].severity < keys[j].severity) out.push_back({i, j});
      else out.push_back({j, i});
    }
  }
  return out;
}

inline double oracle_agreement(const DatasetManifest& m, std::span<const double> scores) {
  const auto pairs = oracle_ranking(m);
  if (pairs.empty()) return 1.0;
  std::size_t agree = 0;
  for (const auto& p : pairs) agree += scores[p.better] > scores[p.worse];
  return static_cast<double>(agree) / static_cast<double>(pairs.size());
}

/// Writes images under out_dir/images and the manifest to out_dir/manifest.csv.
inline SynthResult generate(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "': " + ec.message());

  SynthResult res;
  auto& m = res.manifest;
  const std::size_t L = spec.levels_per_type;
  for (std::size_t r = 0; r < spec.n_references; ++r) {
    const Image ref = make_reference(spec.image_size, spec.seed, r);
    for (std::size_t t = 0; t < spec.distortion_types.size(); ++t) {
      const Distortion type = spec.distortion_types[t];
      std::vector<double> severity(L);
      if (spec.imbalanced) {
        auto rng = derived_stream(spec.seed, {2, r, t});
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t l = 1; l < L; ++l) severity[l] = std::max(1e-3, (u(rng) + u(rng) + u(rng)) / 3.0);
        std::sort(severity.begin() + 1, severity.end());
        for (std::size_t l = 2; l < L; ++l) severity[l] = std::max(severity[l], severity[l - 1] + 1e-6);
      } else {
        for (std::size_t l = 0; l < L; ++l) severity[l] = static_cast<double>(l) / static_cast<double>(L - 1);
      }
      for (std::size_t l = 0; l < L; ++l) {
        auto rng = derived_stream(spec.seed, {3, r, t, l});
        const Image img = distort(ref, type, severity[l], rng);
        char name[96];
        std::snprintf(name, sizeof name, "ref%03zu_%s_l%02zu.png", r, to_string(type).c_str(), l);
        const auto path = out_dir / "images" / name;
        write_image(path, img);
        const double clean = spec.mos_top - (spec.mos_top - spec.mos_bottom) * severity[l];
        std::normal_distribution<double> noise(0.0, spec.label_noise);
        const double mos = std::clamp(clean + (spec.label_noise > 0 ? noise(rng) : 0.0), 0.0, 1.0);
        ImageSample s;
        s.image_path = path;
        s.mos = mos;
        s.dataset_id = "synth";
        char buf[64];
        s.attributes["reference"] = std::to_string(r);
        s.attributes["distortion"] = to_string(type);
        s.attributes["level"] = std::to_string(l);
        std::snprintf(buf, sizeof buf, "%.17g", severity[l]);
        s.attributes["severity"] = buf;
        std::snprintf(buf, sizeof buf, "%.17g", clean);
        s.attributes["mos_clean"] = buf;
        m.samples.push_back(std::move(s));
      }
    }
  }
  m.finalize();
  res.manifest_path = out_dir / "manifest.csv";
  write_generic_csv(res.manifest_path, m, synth_attribute_columns());
  // Reload so paths and values match exactly what consumers of the CSV see.
  res.manifest = load_manifest(res.manifest_path, ManifestFormat::GenericCsv).manifest;
  res.oracle_agreement = oracle_agreement(res.manifest, res.manifest.mos_values());
  return res;
}

}  // namespace msiqa
