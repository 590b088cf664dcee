#pragma once

// Training objective: Euclidean regression loss plus exponential pairwise
// rank loss over consecutive pairs (0,1), (2,3), ...

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "msiqa/errors.hpp"

namespace msiqa {

/// Exponent arguments above this are clamped before exponentiation.
inline constexpr double kRankExponentClamp = 50.0;

/// Predictions and targets of a Siamese batch. Consecutive indices form pairs.
struct PairBatch {
  std::vector<double> predictions;
  std::vector<double> targets;

  [[nodiscard]] std::size_t size() const noexcept { return predictions.size(); }

  void validate() const {
    if (predictions.size() != targets.size()) throw ContractError("PairBatch: predictions/targets length mismatch");
    if (predictions.size() < 2 || predictions.size() % 2 != 0) {
      throw ContractError("PairBatch: N must be even and >= 2, got " + std::to_string(predictions.size()));
    }
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      if (!std::isfinite(predictions[i]) || !std::isfinite(targets[i])) {
        throw ContractError("PairBatch: non-finite value at index " + std::to_string(i));
      }
    }
  }
};

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;  // d value / d prediction_i
};

/// (1 / 2N) * sum (pred - target)^2.
inline LossValue regression_loss(const PairBatch& b) {
  b.validate();
  const auto n = static_cast<double>(b.size());
  LossValue out;
  out.grad.resize(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double r = b.predictions[i] - b.targets[i];
    out.value += r * r;
    out.grad[i] = r / n;
  }
  out.value /= 2.0 * n;
  return out;
}

/// (2 / N) * sum over pairs of exp(pred_i - pred_{i+1}) when target_i < target_{i+1}.
/// Ties and correctly-labelled-descending pairs contribute zero.
inline LossValue rank_loss(const PairBatch& b) {
  b.validate();
  const double scale = 2.0 / static_cast<double>(b.size());
  LossValue out;
  out.grad.assign(b.size(), 0.0);
  for (std::size_t i = 0; i + 1 < b.size(); i += 2) {
    if (!(b.targets[i] < b.targets[i + 1])) continue;
    const double raw = b.predictions[i] - b.predictions[i + 1];
    const double e = scale * std::exp(std::min(raw, kRankExponentClamp));
    out.value += e;
    if (raw > kRankExponentClamp) continue;  // flat beyond the clamp
    out.grad[i] = e;
    out.grad[i + 1] = -e;
  }
  return out;
}

struct TotalLoss {
  double total = 0.0;
  double reg = 0.0;
  double rank = 0.0;
  std::vector<double> grad;
};

/// Weighted sum reg_weight * reg + rank_weight * rank. The reported reg and
/// rank terms are already weighted, so total == reg + rank holds exactly.
inline TotalLoss total_loss(const PairBatch& b, double reg_weight = 1.0, double rank_weight = 1.0) {
  TotalLoss out;
  out.grad.assign(b.size(), 0.0);
  if (reg_weight != 0.0) {
    const auto r = regression_loss(b);
    out.reg = reg_weight * r.value;
    for (std::size_t i = 0; i < b.size(); ++i) out.grad[i] += reg_weight * r.grad[i];
  }
  if (rank_weight != 0.0) {
    const auto k = rank_loss(b);
    out.rank = rank_weight * k.value;
    for (std::size_t i = 0; i < b.size(); ++i) out.grad[i] += rank_weight * k.grad[i];
  }
  if (reg_weight == 0.0 && rank_weight == 0.0) b.validate();
  out.total = out.reg + out.rank;
  return out;
}

}  // namespace msiqa
