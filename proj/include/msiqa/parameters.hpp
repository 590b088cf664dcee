#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "msiqa/errors.hpp"
#include "msiqa/matrix.hpp"

namespace msiqa {

template <typename T>
struct NamedTensor {
  std::string name;
  Matrix<T> value;
};

/// Ordered collection of named parameter tensors. Slot order is fixed by the
/// network definition and is also the checkpoint order.
template <typename T>
class ModelParameters {
 public:
  std::size_t add(std::string name, Matrix<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }

  [[nodiscard]] std::size_t slot(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }
  [[nodiscard]] bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  Matrix<T>& operator[](std::size_t slot) { return entries_[slot].value; }
  const Matrix<T>& operator[](std::size_t slot) const { return entries_[slot].value; }
  Matrix<T>& operator[](std::string_view name) { return entries_[slot(name)].value; }
  const Matrix<T>& operator[](std::string_view name) const { return entries_[slot(name)].value; }

  [[nodiscard]] const std::string& name(std::size_t slot) const { return entries_[slot].name; }
  [[nodiscard]] const std::vector<NamedTensor<T>>& entries() const noexcept { return entries_; }

  /// Total scalar count.
  [[nodiscard]] std::size_t count() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Zero-filled tensors with the same shapes, e.g. for gradients or optimizer moments.
  [[nodiscard]] std::vector<Matrix<T>> zeros_like() const {
    std::vector<Matrix<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.emplace_back(e.value.rows, e.value.cols);
    return out;
  }

  template <typename U>
  [[nodiscard]] ModelParameters<U> cast() const {
    ModelParameters<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

 private:
  std::vector<NamedTensor<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
using Gradients = std::vector<Matrix<T>>;

}  // namespace msiqa
