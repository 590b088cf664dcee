#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "msiqa/errors.hpp"
#include "msiqa/parameters.hpp"

namespace msiqa {

/// Linear warmup from 0 to base_lr over `warmup_steps`, then half-cosine decay
/// over the remaining steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (warmup_steps >= total_steps) throw ConfigError("warmup steps must be fewer than total steps");
  if (step >= total_steps) throw ConfigError("step " + std::to_string(step) + " outside schedule");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay:
///   p <- p - lr * wd * p   (decayed parameters only)
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
template <typename T>
class AdamW {
 public:
  AdamW(const ModelParameters<T>& params, AdamWConfig cfg, std::vector<bool> decay_mask = {})
      : cfg_(cfg), m_(params.zeros_like()), v_(params.zeros_like()), decay_(std::move(decay_mask)) {
    if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1) {
      throw ConfigError("AdamW betas must lie in [0,1)");
    }
    if (decay_.empty()) decay_.assign(params.size(), true);
    if (decay_.size() != params.size()) throw ContractError("AdamW: decay mask size mismatch");
  }

  void step(ModelParameters<T>& params, const Gradients<T>& grads, double lr) {
    if (grads.size() != params.size()) throw ContractError("AdamW: gradient count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    for (std::size_t s = 0; s < params.size(); ++s) {
      auto& p = params[s].data;
      const auto& g = grads[s].data;
      auto& m = m_[s].data;
      auto& v = v_[s].data;
      if (g.size() != p.size()) throw ContractError("AdamW: gradient shape mismatch for '" + params.name(s) + "'");
      const double decay = decay_[s] ? lr * cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        double pv = static_cast<double>(p[i]);
        const double gv = static_cast<double>(g[i]);
        pv -= decay * pv;
        const double mv = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gv;
        const double vv = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gv * gv;
        m[i] = static_cast<T>(mv);
        v[i] = static_cast<T>(vv);
        pv -= lr * (mv / bc1) / (std::sqrt(vv / bc2) + cfg_.eps);
        p[i] = static_cast<T>(pv);
      }
    }
  }

  [[nodiscard]] std::size_t steps() const noexcept { return t_; }
  [[nodiscard]] const AdamWConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] const Gradients<T>& first_moment() const noexcept { return m_; }
  [[nodiscard]] const Gradients<T>& second_moment() const noexcept { return v_; }

  /// Restores state saved from a previous run.
  void restore(Gradients<T> m, Gradients<T> v, std::size_t steps) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw ConfigError("optimizer state size mismatch");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i].same_shape(m_[i]) || !v[i].same_shape(v_[i])) throw ConfigError("optimizer state shape mismatch");
    }
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = steps;
  }

 private:
  AdamWConfig cfg_;
  Gradients<T> m_;
  Gradients<T> v_;
  std::vector<bool> decay_;
  std::size_t t_ = 0;
};

}  // namespace msiqa
