#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "msiqa/errors.hpp"

namespace msiqa {

enum class SizePreset { Tiny, Base, Large, Desk, Custom };

inline std::string to_string(SizePreset p) {
  switch (p) {
    case SizePreset::Tiny: return "tiny";
    case SizePreset::Base: return "base";
    case SizePreset::Large: return "large";
    case SizePreset::Desk: return "desk";
    case SizePreset::Custom: return "custom";
  }
  return "custom";
}

inline SizePreset parse_preset(std::string_view s) {
  if (s == "tiny") return SizePreset::Tiny;
  if (s == "base") return SizePreset::Base;
  if (s == "large") return SizePreset::Large;
  if (s == "desk") return SizePreset::Desk;
  if (s == "custom") return SizePreset::Custom;
  throw ConfigError("unknown size preset '" + std::string(s) + "'");
}

inline constexpr std::size_t kStages = 4;

/// Architecture hyperparameters of the multi-stage fusion backbone.
struct BackboneConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 24;
  std::array<std::size_t, kStages> depths{1, 1, 2, 1};
  std::array<std::size_t, kStages> heads{2, 2, 4, 4};
  std::size_t window_size = 4;
  std::size_t mlp_ratio = 4;
  /// Pool-and-concatenate all four stages (true) or feed only the last stage to the head.
  bool fuse_stages = true;
  SizePreset preset = SizePreset::Desk;

  [[nodiscard]] std::size_t stage_channels(std::size_t stage) const { return embed_dim << (stage - 1); }
  [[nodiscard]] std::size_t stage_grid_height(std::size_t stage) const {
    return input_height / (patch_size << (stage - 1));
  }
  [[nodiscard]] std::size_t stage_grid_width(std::size_t stage) const {
    return input_width / (patch_size << (stage - 1));
  }
  [[nodiscard]] std::size_t fused_width() const { return fuse_stages ? 15 * embed_dim : 8 * embed_dim; }
  [[nodiscard]] std::size_t head_hidden() const { return 4 * embed_dim; }
  [[nodiscard]] std::size_t patch_features() const { return patch_size * patch_size * 3; }

  /// Throws ConfigError describing the first violated invariant.
  void validate() const {
    if (patch_size == 0 || embed_dim == 0 || window_size == 0 || mlp_ratio == 0) {
      throw ConfigError("patch_size, embed_dim, window_size and mlp_ratio must be positive");
    }
    const std::size_t unit = patch_size * 8;
    if (input_height == 0 || input_width == 0 || input_height % unit != 0 || input_width % unit != 0) {
      throw ConfigError("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                        " must be a positive multiple of patch_size*8 = " + std::to_string(unit));
    }
    for (std::size_t k = 0; k < kStages; ++k) {
      if (depths[k] == 0 || heads[k] == 0) throw ConfigError("depths and heads entries must be >= 1");
      if (stage_channels(k + 1) % heads[k] != 0) {
        throw ConfigError("stage " + std::to_string(k + 1) + ": heads (" + std::to_string(heads[k]) +
                          ") must divide channels (" + std::to_string(stage_channels(k + 1)) + ")");
      }
    }
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Named presets. Tiny/Base/Large follow the published hierarchical window
/// transformer family at 224x224 with 7x7 windows; Desk is the small test scale.
inline BackboneConfig make_preset(SizePreset p) {
  BackboneConfig c;
  c.preset = p;
  switch (p) {
    case SizePreset::Desk:
    case SizePreset::Custom:
      break;
    case SizePreset::Tiny:
      c.embed_dim = 96;
      c.depths = {2, 2, 6, 2};
      c.heads = {3, 6, 12, 24};
      c.window_size = 7;
      c.input_height = c.input_width = 224;
      break;
    case SizePreset::Base:
      c.embed_dim = 128;
      c.depths = {2, 2, 18, 2};
      c.heads = {4, 8, 16, 32};
      c.window_size = 7;
      c.input_height = c.input_width = 224;
      break;
    case SizePreset::Large:
      c.embed_dim = 192;
      c.depths = {2, 2, 18, 2};
      c.heads = {6, 12, 24, 48};
      c.window_size = 7;
      c.input_height = c.input_width = 224;
      break;
  }
  return c;
}

namespace detail {

template <std::size_t N>
std::string join(const std::array<std::size_t, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) {
    if (i) s += ',';
    s += std::to_string(a[i]);
  }
  return s;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

template <std::size_t N>
std::array<std::size_t, N> parse_list(const std::string& key, const std::string& v) {
  std::array<std::size_t, N> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= N) throw ConfigError("key '" + key + "': expected " + std::to_string(N) + " entries");
    out[i++] = parse_size(key, item);
  }
  if (i != N) throw ConfigError("key '" + key + "': expected " + std::to_string(N) + " entries");
  return out;
}

}  // namespace detail

/// key=value lines, sorted by key.
inline std::map<std::string, std::string> to_key_values(const BackboneConfig& c) {
  return {
      {"depths", detail::join(c.depths)},
      {"embed_dim", std::to_string(c.embed_dim)},
      {"fuse_stages", c.fuse_stages ? "true" : "false"},
      {"heads", detail::join(c.heads)},
      {"input_height", std::to_string(c.input_height)},
      {"input_width", std::to_string(c.input_width)},
      {"mlp_ratio", std::to_string(c.mlp_ratio)},
      {"patch_size", std::to_string(c.patch_size)},
      {"preset", to_string(c.preset)},
      {"window_size", std::to_string(c.window_size)},
  };
}

inline BackboneConfig backbone_from_key_values(const std::map<std::string, std::string>& kv) {
  BackboneConfig c;
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError("backbone config missing key '" + k + "'");
    return it->second;
  };
  c.depths = detail::parse_list<kStages>("depths", get("depths"));
  c.heads = detail::parse_list<kStages>("heads", get("heads"));
  c.embed_dim = detail::parse_size("embed_dim", get("embed_dim"));
  c.input_height = detail::parse_size("input_height", get("input_height"));
  c.input_width = detail::parse_size("input_width", get("input_width"));
  c.mlp_ratio = detail::parse_size("mlp_ratio", get("mlp_ratio"));
  c.patch_size = detail::parse_size("patch_size", get("patch_size"));
  c.window_size = detail::parse_size("window_size", get("window_size"));
  c.preset = parse_preset(get("preset"));
  const auto& f = get("fuse_stages");
  if (f != "true" && f != "false") throw ConfigError("fuse_stages must be true or false");
  c.fuse_stages = f == "true";
  c.validate();
  return c;
}

}  // namespace msiqa
