#pragma once

// Correlation metrics: SRCC, PLCC and the challenge MainScore (SRCC + PLCC).
// Degenerate inputs (a constant vector) yield std::nullopt rather than NaN.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msiqa/errors.hpp"

namespace msiqa {

/// 1-based ranks; tied values share the average of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline bool has_ties(std::span<const double> v) {
  std::vector<double> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  return std::adjacent_find(s.begin(), s.end()) != s.end();
}

namespace detail {
inline void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("correlation: length mismatch");
  if (a.size() < 2) throw ContractError("correlation: need at least two samples");
}
}  // namespace detail

/// Pearson linear correlation of two equal-length vectors.
inline std::optional<double> plcc(std::span<const double> predictions, std::span<const double> targets) {
  detail::check_pair(predictions, targets);
  const auto n = static_cast<double>(predictions.size());
  const double pm = std::accumulate(predictions.begin(), predictions.end(), 0.0) / n;
  const double sm = std::accumulate(targets.begin(), targets.end(), 0.0) / n;
  double num = 0.0, ps = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double dp = predictions[i] - pm;
    const double ds = targets[i] - sm;
    num += dp * ds;
    ps += dp * dp;
    ss += ds * ds;
  }
  if (ps == 0.0 || ss == 0.0) return std::nullopt;
  return std::clamp(num / std::sqrt(ps * ss), -1.0, 1.0);
}

/// Spearman rank correlation. Tie-free inputs use 1 - 6 sum d^2 / (N (N^2 - 1));
/// otherwise the Pearson correlation of average ranks.
inline std::optional<double> srcc(std::span<const double> predictions, std::span<const double> targets) {
  detail::check_pair(predictions, targets);
  const auto rp = average_ranks(predictions);
  const auto rt = average_ranks(targets);
  if (!has_ties(predictions) && !has_ties(targets)) {
    const auto n = static_cast<double>(predictions.size());
    double d2 = 0.0;
    for (std::size_t i = 0; i < rp.size(); ++i) d2 += (rp[i] - rt[i]) * (rp[i] - rt[i]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  }
  return plcc(rp, rt);
}

inline double main_score(double srcc_value, double plcc_value) { return srcc_value + plcc_value; }

}  // namespace msiqa
