#pragma once

// Multi-stage fusion hierarchical window transformer.
//
//   image -> patch_embed -> stage 1..4 -> fuse_stages -> predict_head -> score
//
// Patch features are taken after removing each channel's mean over the image.
//
// Stage k runs on a (H / (p * 2^(k-1))) x (W / (p * 2^(k-1))) token grid with
// C * 2^(k-1) channels; stages 2..4 start with 2x2 patch merging. Each stage
// output is average-pooled over its grid and the pooled vectors are
// concatenated (15C values) before the two-layer GELU head.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "msiqa/autodiff.hpp"
#include "msiqa/config.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/image.hpp"
#include "msiqa/parameters.hpp"

namespace msiqa {

/// Window partition of a token grid, including cyclic shift and zero padding.
struct WindowLayout {
  std::size_t grid_height = 0;
  std::size_t grid_width = 0;
  std::size_t window = 0;
  std::size_t shift = 0;
  std::size_t padded_height = 0;
  std::size_t padded_width = 0;
  /// gathered row -> original token index (-1 for padding). Window-major.
  std::shared_ptr<const std::vector<std::int64_t>> to_windows;
  /// original token index -> gathered row.
  std::shared_ptr<const std::vector<std::int64_t>> from_windows;
  std::shared_ptr<const AttentionLayout> attention;
};

inline WindowLayout make_window_layout(std::size_t grid_h, std::size_t grid_w, std::size_t window,
                                       std::size_t shift) {
  if (window == 0 || shift >= window) throw ContractError("window layout: invalid window/shift");
  WindowLayout wl;
  wl.grid_height = grid_h;
  wl.grid_width = grid_w;
  wl.window = window;
  wl.shift = shift;
  wl.padded_height = (grid_h + window - 1) / window * window;
  wl.padded_width = (grid_w + window - 1) / window * window;
  const std::size_t hp = wl.padded_height;
  const std::size_t wp = wl.padded_width;
  const std::size_t nwy = hp / window;
  const std::size_t nwx = wp / window;
  const std::size_t L = window * window;

  auto to = std::make_shared<std::vector<std::int64_t>>(nwy * nwx * L, -1);
  auto from = std::make_shared<std::vector<std::int64_t>>(grid_h * grid_w, -1);
  auto att = std::make_shared<AttentionLayout>();
  att->windows = nwy * nwx;
  att->tokens = L;

  // Region label on the shifted grid: rows/cols split at [0, P-w), [P-w, P-s), [P-s, P).
  auto region = [&](std::size_t y, std::size_t x) {
    auto band = [&](std::size_t v, std::size_t p) -> int {
      if (shift == 0) return 0;
      if (v < p - window) return 0;
      if (v < p - shift) return 1;
      return 2;
    };
    return band(y, hp) * 3 + band(x, wp);
  };

  std::vector<int> labels(nwy * nwx * L);
  for (std::size_t wy = 0; wy < nwy; ++wy) {
    for (std::size_t wx = 0; wx < nwx; ++wx) {
      const std::size_t w = wy * nwx + wx;
      for (std::size_t py = 0; py < window; ++py) {
        for (std::size_t px = 0; px < window; ++px) {
          const std::size_t y = wy * window + py;
          const std::size_t x = wx * window + px;
          const std::size_t row = w * L + py * window + px;
          // Cyclic shift by -shift: shifted[y] = padded[(y + shift) mod P].
          const std::size_t oy = (y + shift) % hp;
          const std::size_t ox = (x + shift) % wp;
          if (oy < grid_h && ox < grid_w) {
            const std::size_t t = oy * grid_w + ox;
            (*to)[row] = static_cast<std::int64_t>(t);
            (*from)[t] = static_cast<std::int64_t>(row);
          }
          labels[row] = region(y, x);
        }
      }
    }
  }

  const bool padded = hp != grid_h || wp != grid_w;
  if (padded || shift > 0) {
    att->allowed.assign(att->windows * L * L, 0);
    for (std::size_t w = 0; w < att->windows; ++w) {
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          const std::size_t ri = w * L + i;
          const std::size_t rj = w * L + j;
          att->allowed[ri * L + j] = (*to)[rj] >= 0 && labels[ri] == labels[rj];
        }
      }
    }
  }

  att->bias_index.resize(L * L);
  const std::size_t span = 2 * window - 1;
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      const auto dy = static_cast<std::int64_t>(i / window) - static_cast<std::int64_t>(j / window) +
                      static_cast<std::int64_t>(window) - 1;
      const auto dx = static_cast<std::int64_t>(i % window) - static_cast<std::int64_t>(j % window) +
                      static_cast<std::int64_t>(window) - 1;
      att->bias_index[i * L + j] = static_cast<std::uint32_t>(dy * static_cast<std::int64_t>(span) + dx);
    }
  }

  wl.to_windows = std::move(to);
  wl.from_windows = std::move(from);
  wl.attention = std::move(att);
  return wl;
}

/// Index for 2x2 patch merging: output token (i, j) concatenates
/// (2i, 2j), (2i+1, 2j), (2i, 2j+1), (2i+1, 2j+1).
inline std::shared_ptr<const std::vector<std::int64_t>> make_merge_index(std::size_t grid_h, std::size_t grid_w) {
  if (grid_h % 2 || grid_w % 2) throw ContractError("patch merging requires even grid sides");
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(grid_h * grid_w);
  for (std::size_t i = 0; i < grid_h / 2; ++i) {
    for (std::size_t j = 0; j < grid_w / 2; ++j) {
      for (auto [dy, dx] : {std::pair{0, 0}, std::pair{1, 0}, std::pair{0, 1}, std::pair{1, 1}}) {
        idx->push_back(static_cast<std::int64_t>((2 * i + dy) * grid_w + 2 * j + dx));
      }
    }
  }
  return idx;
}

/// Parameter slots of one transformer block.
struct BlockSlots {
  std::size_t norm1_gamma, norm1_beta;
  std::size_t qkv_weight, qkv_bias, rel_bias;
  std::size_t proj_weight, proj_bias;
  std::size_t norm2_gamma, norm2_beta;
  std::size_t fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

struct StageSlots {
  std::optional<std::array<std::size_t, 3>> merge;  // norm gamma, norm beta, reduction weight
  std::vector<BlockSlots> blocks;
};

enum class InitKind { TruncNormal, Zeros, Ones };

struct ParameterSpec {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  InitKind init;
};

/// Token grid result of one stage.
template <typename T>
struct StageFeature {
  std::size_t stage_index = 0;
  std::size_t grid_height = 0;
  std::size_t grid_width = 0;
  std::size_t channels = 0;
  Var values;  // (grid_height * grid_width) x channels
};

/// Binds parameter slots of a store to graph leaves, creating each leaf once.
template <typename T>
class ParameterBinder {
 public:
  ParameterBinder(Graph<T>& g, const ModelParameters<T>& params)
      : graph_(g), params_(params), vars_(params.size()) {}

  Var operator()(std::size_t slot) {
    auto& v = vars_[slot];
    if (!v) v = graph_.parameter(params_[slot], slot);
    return *v;
  }

  [[nodiscard]] const ModelParameters<T>& parameters() const noexcept { return params_; }
  Graph<T>& graph() noexcept { return graph_; }

 private:
  Graph<T>& graph_;
  const ModelParameters<T>& params_;
  std::vector<std::optional<Var>> vars_;
};

/// Intermediate handles from one forward pass.
template <typename T>
struct ForwardTrace {
  Var tokens;
  std::array<StageFeature<T>, kStages> stages;
  Var fused;
  Var score;
};

/// Network definition. Immutable after construction; concurrent forward passes
/// over shared read-only parameters are safe.
template <typename T>
class Network {
 public:
  explicit Network(BackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    build_specs();
    build_layouts();
  }

  [[nodiscard]] const BackboneConfig& config() const noexcept { return config_; }
  [[nodiscard]] const std::vector<ParameterSpec>& parameter_specs() const noexcept { return specs_; }

  /// Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit norm gains.
  [[nodiscard]] ModelParameters<T> init_parameters(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    ModelParameters<T> p;
    for (const auto& s : specs_) {
      Matrix<T> m(s.rows, s.cols);
      switch (s.init) {
        case InitKind::Zeros: break;
        case InitKind::Ones: std::fill(m.data.begin(), m.data.end(), T(1)); break;
        case InitKind::TruncNormal:
          for (auto& v : m.data) {
            double x;
            do {
              x = normal(rng);
            } while (std::abs(x) > 0.04);
            v = static_cast<T>(x);
          }
          break;
      }
      p.add(s.name, std::move(m));
    }
    return p;
  }

  /// Verifies names and shapes of a parameter set against this network.
  void check_parameters(const ModelParameters<T>& p) const {
    if (p.size() != specs_.size()) {
      throw ConfigError("parameter count " + std::to_string(p.size()) + " does not match network (" +
                        std::to_string(specs_.size()) + ")");
    }
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      if (p.name(i) != s.name || p[i].rows != s.rows || p[i].cols != s.cols) {
        throw ConfigError("parameter '" + p.name(i) + "' " + shape_string(p[i].rows, p[i].cols) +
                          " does not match expected '" + s.name + "' " + shape_string(s.rows, s.cols));
      }
    }
  }

  [[nodiscard]] const WindowLayout& window_layout(std::size_t stage, bool shifted) const {
    if (stage < 1 || stage > kStages) throw ContractError("stage index out of range");
    if (!shifted) return plain_[stage - 1];
    if (!shifted_[stage - 1]) {
      throw ContractError("stage " + std::to_string(stage) + " grid fits in one window; no shifted layout");
    }
    return *shifted_[stage - 1];
  }
  [[nodiscard]] bool stage_shifts(std::size_t stage) const { return shifted_[stage - 1].has_value(); }

  /// Patch features with the per-channel image mean removed: one row per token,
/// (py * p + px) * 3 + channel columns.
  [[nodiscard]] Matrix<T> patch_features(const Image& image) const {
    if (image.height != config_.input_height || image.width != config_.input_width) {
      throw ConfigError("image " + shape_string(image.height, image.width) + " does not match model input " +
                        shape_string(config_.input_height, config_.input_width));
    }
    const std::size_t p = config_.patch_size;
    const std::size_t gh = image.height / p;
    const std::size_t gw = image.width / p;
    std::array<double, 3> mean{};
    for (std::size_t i = 0; i < image.pixels.size(); ++i) mean[i % 3] += image.pixels[i];
    for (auto& m : mean) m /= static_cast<double>(image.height * image.width);
    Matrix<T> out(gh * gw, p * p * 3);
    for (std::size_t ty = 0; ty < gh; ++ty) {
      for (std::size_t tx = 0; tx < gw; ++tx) {
        T* row = out.data.data() + (ty * gw + tx) * out.cols;
        for (std::size_t py = 0; py < p; ++py) {
          for (std::size_t px = 0; px < p; ++px) {
            for (std::size_t c = 0; c < 3; ++c) {
              row[(py * p + px) * 3 + c] = static_cast<T>(image.at(ty * p + py, tx * p + px, c) - mean[c]);
            }
          }
        }
      }
    }
    return out;
  }

  /// Linear patch embedding followed by layer norm: (H/p * W/p) x C tokens.
  Var patch_embed(ParameterBinder<T>& bind, Var features) const {
    auto& g = bind.graph();
    if (g.value(features).cols != config_.patch_features()) throw ConfigError("patch feature width mismatch");
    Var x = g.linear(features, bind(embed_weight_), bind(embed_bias_));
    return g.layer_norm(x, bind(embed_norm_gamma_), bind(embed_norm_beta_));
  }

  Var patch_embed(ParameterBinder<T>& bind, const Image& image) const {
    return patch_embed(bind, bind.graph().constant(patch_features(image)));
  }

  /// Windowed multi-head self-attention (qkv projection, attention, output projection).
  Var windowed_attention(ParameterBinder<T>& bind, Var tokens, std::size_t stage, std::size_t block,
                         bool shift, std::vector<T>* probabilities = nullptr) const {
    auto& g = bind.graph();
    const auto& bs = stage_slots_[stage - 1].blocks[block];
    const auto& layout = window_layout(stage, shift);
    const auto& tv = g.value(tokens);
    if (tv.rows != layout.grid_height * layout.grid_width || tv.cols != config_.stage_channels(stage)) {
      throw ContractError("windowed_attention: token grid does not match stage " + std::to_string(stage));
    }
    Var win = g.gather_rows(tokens, layout.to_windows);
    Var qkv = g.linear(win, bind(bs.qkv_weight), bind(bs.qkv_bias));
    Var att = g.window_attention(qkv, bind(bs.rel_bias), layout.attention, config_.heads[stage - 1], probabilities);
    Var proj = g.linear(att, bind(bs.proj_weight), bind(bs.proj_bias));
    return g.gather_rows(proj, layout.from_windows);
  }

  /// Pre-norm transformer block with residual attention and MLP branches.
  Var block(ParameterBinder<T>& bind, Var x, std::size_t stage, std::size_t block_index) const {
    auto& g = bind.graph();
    const auto& bs = stage_slots_[stage - 1].blocks[block_index];
    const bool shift = (block_index % 2 == 1) && stage_shifts(stage);
    Var h = g.layer_norm(x, bind(bs.norm1_gamma), bind(bs.norm1_beta));
    x = g.add(x, windowed_attention(bind, h, stage, block_index, shift));
    h = g.layer_norm(x, bind(bs.norm2_gamma), bind(bs.norm2_beta));
    h = g.gelu(g.linear(h, bind(bs.fc1_weight), bind(bs.fc1_bias)));
    h = g.linear(h, bind(bs.fc2_weight), bind(bs.fc2_bias));
    return g.add(x, h);
  }

  /// One hierarchical stage. `tokens` must be the previous stage's grid
  /// (or the embedded grid for stage 1).
  StageFeature<T> run_stage(ParameterBinder<T>& bind, Var tokens, std::size_t stage) const {
    if (stage < 1 || stage > kStages) throw ContractError("stage index out of range");
    auto& g = bind.graph();
    const auto& tv = g.value(tokens);
    const std::size_t in_stage = stage == 1 ? 1 : stage - 1;
    const std::size_t in_h = config_.stage_grid_height(in_stage);
    const std::size_t in_w = config_.stage_grid_width(in_stage);
    if (tv.rows != in_h * in_w || tv.cols != config_.stage_channels(in_stage)) {
      throw ContractError("run_stage " + std::to_string(stage) + ": input " + shape_string(tv.rows, tv.cols) +
                          ", expected " + shape_string(in_h * in_w, config_.stage_channels(in_stage)));
    }
    const auto& ss = stage_slots_[stage - 1];
    Var x = tokens;
    if (ss.merge) {
      const auto& [gamma, beta, reduction] = *ss.merge;
      x = g.gather_rows(x, merge_index_[stage - 1], 4);
      x = g.layer_norm(x, bind(gamma), bind(beta));
      x = g.linear(x, bind(reduction));
    }
    for (std::size_t b = 0; b < ss.blocks.size(); ++b) x = block(bind, x, stage, b);
    return StageFeature<T>{stage, config_.stage_grid_height(stage), config_.stage_grid_width(stage),
                           config_.stage_channels(stage), x};
  }

  /// Global-average-pools each stage and concatenates in stage order (15C values).
  /// Without fusion only the last stage is pooled (8C values).
  Var fuse_stages(Graph<T>& g, const std::array<StageFeature<T>, kStages>& stages) const {
    std::vector<Var> pooled;
    for (std::size_t k = 0; k < kStages; ++k) {
      const auto& s = stages[k];
      const auto& v = g.value(s.values);
      if (s.stage_index != k + 1 || s.grid_height != config_.stage_grid_height(k + 1) ||
          s.grid_width != config_.stage_grid_width(k + 1) || s.channels != config_.stage_channels(k + 1) ||
          v.rows != s.grid_height * s.grid_width || v.cols != s.channels) {
        throw ContractError("fuse_stages: stage " + std::to_string(k + 1) + " has inconsistent shape");
      }
      if (config_.fuse_stages || k + 1 == kStages) pooled.push_back(g.mean_rows(s.values));
    }
    return g.concat_cols(pooled);
  }

  /// fc1 -> GELU -> fc2, producing a 1x1 score.
  Var predict_head(ParameterBinder<T>& bind, Var fused) const {
    auto& g = bind.graph();
    const auto& f = g.value(fused);
    if (f.rows != 1 || f.cols != config_.fused_width()) {
      throw ContractError("predict_head: expected 1x" + std::to_string(config_.fused_width()) + " input, got " +
                          shape_string(f.rows, f.cols));
    }
    Var h = g.gelu(g.linear(fused, bind(head_fc1_weight_), bind(head_fc1_bias_)));
    return g.linear(h, bind(head_fc2_weight_), bind(head_fc2_bias_));
  }

  ForwardTrace<T> trace(ParameterBinder<T>& bind, Var features) const {
    ForwardTrace<T> t;
    t.tokens = patch_embed(bind, features);
    Var x = t.tokens;
    for (std::size_t k = 1; k <= kStages; ++k) {
      t.stages[k - 1] = run_stage(bind, x, k);
      x = t.stages[k - 1].values;
    }
    t.fused = fuse_stages(bind.graph(), t.stages);
    t.score = predict_head(bind, t.fused);
    return t;
  }

  /// Score node of a full forward pass recorded on `bind`'s graph.
  Var forward(ParameterBinder<T>& bind, const Image& image) const {
    return trace(bind, bind.graph().constant(patch_features(image))).score;
  }

  /// Inference-only forward.
  [[nodiscard]] T forward(const ModelParameters<T>& params, const Image& image) const {
    Graph<T> g;
    ParameterBinder<T> bind(g, params);
    return g.value(forward(bind, image)).data[0];
  }

 private:
  std::size_t add_spec(std::string name, std::size_t rows, std::size_t cols, InitKind init) {
    specs_.push_back({std::move(name), rows, cols, init});
    return specs_.size() - 1;
  }

  void build_specs() {
    const std::size_t C = config_.embed_dim;
    const std::size_t w = config_.window_size;
    embed_weight_ = add_spec("patch_embed.weight", config_.patch_features(), C, InitKind::TruncNormal);
    embed_bias_ = add_spec("patch_embed.bias", 1, C, InitKind::Zeros);
    embed_norm_gamma_ = add_spec("patch_embed.norm.gamma", 1, C, InitKind::Ones);
    embed_norm_beta_ = add_spec("patch_embed.norm.beta", 1, C, InitKind::Zeros);
    for (std::size_t k = 1; k <= kStages; ++k) {
      StageSlots ss;
      const std::size_t ch = config_.stage_channels(k);
      const std::string prefix = "stages." + std::to_string(k);
      if (k > 1) {
        const std::size_t prev = config_.stage_channels(k - 1);
        ss.merge = std::array<std::size_t, 3>{
            add_spec(prefix + ".merge.norm.gamma", 1, 4 * prev, InitKind::Ones),
            add_spec(prefix + ".merge.norm.beta", 1, 4 * prev, InitKind::Zeros),
            add_spec(prefix + ".merge.reduction.weight", 4 * prev, ch, InitKind::TruncNormal)};
      }
      for (std::size_t b = 0; b < config_.depths[k - 1]; ++b) {
        const std::string bp = prefix + ".blocks." + std::to_string(b);
        const std::size_t hidden = ch * config_.mlp_ratio;
        BlockSlots bs{};
        bs.norm1_gamma = add_spec(bp + ".norm1.gamma", 1, ch, InitKind::Ones);
        bs.norm1_beta = add_spec(bp + ".norm1.beta", 1, ch, InitKind::Zeros);
        bs.qkv_weight = add_spec(bp + ".attn.qkv.weight", ch, 3 * ch, InitKind::TruncNormal);
        bs.qkv_bias = add_spec(bp + ".attn.qkv.bias", 1, 3 * ch, InitKind::Zeros);
        bs.rel_bias = add_spec(bp + ".attn.rel_bias", (2 * w - 1) * (2 * w - 1), config_.heads[k - 1],
                               InitKind::TruncNormal);
        bs.proj_weight = add_spec(bp + ".attn.proj.weight", ch, ch, InitKind::TruncNormal);
        bs.proj_bias = add_spec(bp + ".attn.proj.bias", 1, ch, InitKind::Zeros);
        bs.norm2_gamma = add_spec(bp + ".norm2.gamma", 1, ch, InitKind::Ones);
        bs.norm2_beta = add_spec(bp + ".norm2.beta", 1, ch, InitKind::Zeros);
        bs.fc1_weight = add_spec(bp + ".mlp.fc1.weight", ch, hidden, InitKind::TruncNormal);
        bs.fc1_bias = add_spec(bp + ".mlp.fc1.bias", 1, hidden, InitKind::Zeros);
        bs.fc2_weight = add_spec(bp + ".mlp.fc2.weight", hidden, ch, InitKind::TruncNormal);
        bs.fc2_bias = add_spec(bp + ".mlp.fc2.bias", 1, ch, InitKind::Zeros);
        ss.blocks.push_back(bs);
      }
      stage_slots_.push_back(std::move(ss));
    }
    head_fc1_weight_ = add_spec("head.fc1.weight", config_.fused_width(), config_.head_hidden(), InitKind::TruncNormal);
    head_fc1_bias_ = add_spec("head.fc1.bias", 1, config_.head_hidden(), InitKind::Zeros);
    head_fc2_weight_ = add_spec("head.fc2.weight", config_.head_hidden(), 1, InitKind::TruncNormal);
    head_fc2_bias_ = add_spec("head.fc2.bias", 1, 1, InitKind::Zeros);
  }

  void build_layouts() {
    const std::size_t w = config_.window_size;
    for (std::size_t k = 1; k <= kStages; ++k) {
      const std::size_t gh = config_.stage_grid_height(k);
      const std::size_t gw = config_.stage_grid_width(k);
      plain_.push_back(make_window_layout(gh, gw, w, 0));
      // A grid that fits in one window gains nothing from shifting.
      if (std::min(gh, gw) > w && w / 2 > 0) {
        shifted_.push_back(make_window_layout(gh, gw, w, w / 2));
      } else {
        shifted_.emplace_back(std::nullopt);
      }
      merge_index_.push_back(k > 1 ? make_merge_index(config_.stage_grid_height(k - 1), config_.stage_grid_width(k - 1))
                                   : nullptr);
    }
  }

  BackboneConfig config_;
  std::vector<ParameterSpec> specs_;
  std::vector<StageSlots> stage_slots_;
  std::vector<WindowLayout> plain_;
  std::vector<std::optional<WindowLayout>> shifted_;
  std::vector<std::shared_ptr<const std::vector<std::int64_t>>> merge_index_;
  std::size_t embed_weight_{}, embed_bias_{}, embed_norm_gamma_{}, embed_norm_beta_{};
  std::size_t head_fc1_weight_{}, head_fc1_bias_{}, head_fc2_weight_{}, head_fc2_bias_{};
};

}  // namespace msiqa
