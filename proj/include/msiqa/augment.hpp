#pragma once

// Preprocessing and training-time augmentation: bilinear resize, random
// crop, right-angle rotation and colorspace jitter.
//
// Colorspace conventions (every output channel lies in [0,1]):
//   RGB  identity.
//   HSV  h = hue_degrees / 360, s = (max - min) / max (0 when max = 0), v = max.
//   LAB  sRGB (D65) -> linear -> XYZ -> CIE L*a*b*, then
//        (L / 100, (a + 128) / 255, (b + 128) / 255), clamped to [0,1].
//   GRAY y = 0.299 r + 0.587 g + 0.114 b replicated to all three channels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msiqa/errors.hpp"
#include "msiqa/image.hpp"

namespace msiqa {

enum class ColorSpace { RGB, HSV, LAB, GRAY };
enum class Mode { Train, Test };

inline std::string to_string(ColorSpace c) {
  switch (c) {
    case ColorSpace::RGB: return "rgb";
    case ColorSpace::HSV: return "hsv";
    case ColorSpace::LAB: return "lab";
    case ColorSpace::GRAY: return "gray";
  }
  return "rgb";
}

inline ColorSpace parse_colorspace(std::string_view s) {
  if (s == "rgb") return ColorSpace::RGB;
  if (s == "hsv") return ColorSpace::HSV;
  if (s == "lab") return ColorSpace::LAB;
  if (s == "gray") return ColorSpace::GRAY;
  throw ConfigError("unknown colorspace '" + std::string(s) + "'");
}

struct Size2 {
  std::size_t height = 0;
  std::size_t width = 0;
  friend bool operator==(const Size2&, const Size2&) = default;
};

struct AugmentationPlan {
  Size2 resize_to{72, 72};
  Size2 crop_size{64, 64};
  bool rotation = true;
  std::vector<ColorSpace> colorspaces{ColorSpace::RGB, ColorSpace::HSV, ColorSpace::LAB, ColorSpace::GRAY};
  std::uint64_t seed = 0;

  void validate() const {
    if (crop_size.height == 0 || crop_size.width == 0) throw ConfigError("crop size must be positive");
    if (crop_size.height > resize_to.height || crop_size.width > resize_to.width) {
      throw ConfigError("crop size must not exceed resize target");
    }
    if (colorspaces.empty()) throw ConfigError("augmentation needs at least one colorspace");
    if (rotation && crop_size.height != crop_size.width) {
      throw ConfigError("random rotation requires a square crop");
    }
  }
};

/// Bilinear resize with half-pixel centres and edge clamping.
inline Image resize_image(const Image& src, Size2 target) {
  if (src.empty()) throw ConfigError("resize_image: empty image");
  if (target.height == 0 || target.width == 0) throw ConfigError("resize_image: empty target");
  if (target.height == src.height && target.width == src.width) return src;
  Image out(target.height, target.width);
  const double sy = static_cast<double>(src.height) / static_cast<double>(target.height);
  const double sx = static_cast<double>(src.width) / static_cast<double>(target.width);
  auto coord = [](double pos, std::size_t n) {
    const double c = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    const auto lo = static_cast<std::size_t>(std::floor(c));
    const std::size_t hi = std::min(lo + 1, n - 1);
    return std::tuple{lo, hi, c - static_cast<double>(lo)};
  };
  for (std::size_t y = 0; y < target.height; ++y) {
    const auto [y0, y1, fy] = coord((static_cast<double>(y) + 0.5) * sy - 0.5, src.height);
    for (std::size_t x = 0; x < target.width; ++x) {
      const auto [x0, x1, fx] = coord((static_cast<double>(x) + 0.5) * sx - 0.5, src.width);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = src.at(y0, x0, c) * (1 - fx) + src.at(y0, x1, c) * fx;
        const double bot = src.at(y1, x0, c) * (1 - fx) + src.at(y1, x1, c) * fx;
        out.at(y, x, c) = std::clamp(top * (1 - fy) + bot * fy, 0.0, 1.0);
      }
    }
  }
  return out;
}

inline Image crop(const Image& src, std::size_t top, std::size_t left, Size2 size) {
  if (top + size.height > src.height || left + size.width > src.width) {
    throw ConfigError("crop window exceeds image bounds");
  }
  Image out(size.height, size.width);
  for (std::size_t y = 0; y < size.height; ++y) {
    const double* s = src.pixels.data() + ((top + y) * src.width + left) * 3;
    std::copy(s, s + size.width * 3, out.pixels.data() + y * size.width * 3);
  }
  return out;
}

struct CropOffset {
  std::size_t top = 0;
  std::size_t left = 0;
  friend bool operator==(const CropOffset&, const CropOffset&) = default;
};

template <typename Rng>
CropOffset random_crop_offset(Size2 image, Size2 size, Rng& rng) {
  if (size.height > image.height || size.width > image.width) {
    throw ConfigError("crop " + std::to_string(size.height) + "x" + std::to_string(size.width) +
                      " larger than image " + std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  std::uniform_int_distribution<std::size_t> dy(0, image.height - size.height);
  std::uniform_int_distribution<std::size_t> dx(0, image.width - size.width);
  const std::size_t top = dy(rng);
  return {top, dx(rng)};
}

/// Contiguous sub-window with offsets uniform over all valid positions.
template <typename Rng>
Image random_crop(const Image& src, Size2 size, Rng& rng) {
  const auto o = random_crop_offset({src.height, src.width}, size, rng);
  return crop(src, o.top, o.left, size);
}

/// Counter-clockwise rotation by quarter_turns * 90 degrees.
inline Image rotate90(const Image& src, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return src;
  const bool swap = k % 2 == 1;
  Image out(swap ? src.width : src.height, swap ? src.height : src.width);
  for (std::size_t y = 0; y < src.height; ++y) {
    for (std::size_t x = 0; x < src.width; ++x) {
      std::size_t ny = 0, nx = 0;
      switch (k) {
        case 1: ny = src.width - 1 - x; nx = y; break;
        case 2: ny = src.height - 1 - y; nx = src.width - 1 - x; break;
        case 3: ny = x; nx = src.height - 1 - y; break;
      }
      for (std::size_t c = 0; c < 3; ++c) out.at(ny, nx, c) = src.at(y, x, c);
    }
  }
  return out;
}

/// Rotation by an angle drawn uniformly from {0, 90, 180, 270} degrees.
template <typename Rng>
Image random_rotate(const Image& patch, Rng& rng) {
  if (patch.height != patch.width) throw ConfigError("random_rotate requires a square patch");
  std::uniform_int_distribution<int> turns(0, 3);
  return rotate90(patch, turns(rng));
}

inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  double h = 0.0;
  if (delta > 0.0) {
    if (mx == r) h = 60.0 * std::fmod((g - b) / delta, 6.0);
    else if (mx == g) h = 60.0 * ((b - r) / delta + 2.0);
    else h = 60.0 * ((r - g) / delta + 4.0);
    if (h < 0.0) h += 360.0;
  }
  const double s = mx > 0.0 ? delta / mx : 0.0;
  return {h / 360.0, s, mx};
}

inline std::array<double, 3> rgb_to_lab(double r, double g, double b) {
  auto lin = [](double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); };
  const double R = lin(r), G = lin(g), B = lin(b);
  const double X = (0.4124564 * R + 0.3575761 * G + 0.1804375 * B) / 0.95047;
  const double Y = 0.2126729 * R + 0.7151522 * G + 0.0721750 * B;
  const double Z = (0.0193339 * R + 0.1191920 * G + 0.9503041 * B) / 1.08883;
  constexpr double d = 6.0 / 29.0;
  auto f = [](double t) { return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0; };
  const double L = 116.0 * f(Y) - 16.0;
  const double A = 500.0 * (f(X) - f(Y));
  const double Bb = 200.0 * (f(Y) - f(Z));
  return {std::clamp(L / 100.0, 0.0, 1.0), std::clamp((A + 128.0) / 255.0, 0.0, 1.0),
          std::clamp((Bb + 128.0) / 255.0, 0.0, 1.0)};
}

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline Image convert_colorspace(const Image& src, ColorSpace space) {
  if (space == ColorSpace::RGB) return src;
  Image out(src.height, src.width);
  for (std::size_t i = 0; i < src.height * src.width; ++i) {
    const double* p = src.pixels.data() + i * 3;
    double* o = out.pixels.data() + i * 3;
    std::array<double, 3> v{};
    switch (space) {
      case ColorSpace::HSV: v = rgb_to_hsv(p[0], p[1], p[2]); break;
      case ColorSpace::LAB: v = rgb_to_lab(p[0], p[1], p[2]); break;
      case ColorSpace::GRAY: {
        const double y = luminance(p[0], p[1], p[2]);
        v = {y, y, y};
        break;
      }
      case ColorSpace::RGB: break;
    }
    std::copy(v.begin(), v.end(), o);
  }
  return out;
}

/// Train mode: converts to a colorspace drawn uniformly from `choices`.
/// Test mode: returns the RGB input unchanged and consumes no randomness.
template <typename Rng>
Image random_colorspace(const Image& patch, Rng& rng, Mode mode,
                        const std::vector<ColorSpace>& choices = {ColorSpace::RGB, ColorSpace::HSV,
                                                                  ColorSpace::LAB, ColorSpace::GRAY}) {
  if (mode == Mode::Test) return patch;
  if (choices.empty()) throw ConfigError("random_colorspace: no colorspaces to choose from");
  std::uniform_int_distribution<std::size_t> pick(0, choices.size() - 1);
  return convert_colorspace(patch, choices[pick(rng)]);
}

/// Full per-sample preprocessing: resize, crop (random in train mode, centred
/// in test mode), then rotation and colorspace jitter in train mode only.
template <typename Rng>
Image augment(const Image& image, const AugmentationPlan& plan, Rng& rng, Mode mode) {
  Image x = resize_image(image, plan.resize_to);
  if (mode == Mode::Train) {
    x = random_crop(x, plan.crop_size, rng);
    if (plan.rotation) x = random_rotate(x, rng);
    x = random_colorspace(x, rng, mode, plan.colorspaces);
  } else {
    x = crop(x, (x.height - plan.crop_size.height) / 2, (x.width - plan.crop_size.width) / 2, plan.crop_size);
  }
  return x;
}

}  // namespace msiqa
