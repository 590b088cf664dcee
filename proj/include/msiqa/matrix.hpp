#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msiqa {

/// Dense row-major matrix. Token grids are stored as (tokens x channels).
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<T> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw std::invalid_argument("Matrix: value count " + std::to_string(data.size()) +
                                  " does not match shape " + std::to_string(r) + "x" +
                                  std::to_string(c));
    }
  }

  [[nodiscard]] std::size_t size() const noexcept { return data.size(); }
  [[nodiscard]] bool empty() const noexcept { return data.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data.data() + r * cols, cols}; }

  [[nodiscard]] bool same_shape(const Matrix& other) const noexcept {
    return rows == other.rows && cols == other.cols;
  }

  template <typename U>
  [[nodiscard]] Matrix<U> cast() const {
    Matrix<U> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace msiqa
