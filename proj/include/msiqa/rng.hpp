#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace msiqa {

/// Independent generator for (seed, keys...), e.g. one stream per epoch.
inline std::mt19937_64 derived_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

}  // namespace msiqa
