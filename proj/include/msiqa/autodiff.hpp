#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Graph records every operation of one forward pass; backward() walks the
// tape in reverse and accumulates gradients. Parameter leaves borrow their
// values from the owning store, so building a graph never copies weights.
// A Graph is single-use and single-threaded; run independent samples on
// independent graphs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "msiqa/blas.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/matrix.hpp"

namespace msiqa {

struct Var {
  std::size_t id = 0;
};

/// Geometry of windowed multi-head attention over a gathered token matrix.
/// Rows of the gathered matrix are window-major: window w owns rows
/// [w * tokens, (w + 1) * tokens).
struct AttentionLayout {
  std::size_t windows = 0;
  std::size_t tokens = 0;                 // tokens per window (window_size^2)
  std::vector<std::uint32_t> bias_index;  // tokens*tokens entries into the bias table
  std::vector<std::uint8_t> allowed;      // windows*tokens*tokens; empty means all allowed
};

template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves --------------------------------------------------------------

  Var constant(Matrix<T> value) { return push(std::move(value), false); }

  /// A leaf whose gradient is tracked (used for gradient checks w.r.t. inputs).
  Var input(Matrix<T> value) { return push(std::move(value), true); }

  /// A borrowed parameter leaf. `slot` identifies the parameter in its store.
  Var parameter(const Matrix<T>& value, std::size_t slot) {
    Node n;
    n.borrowed = &value;
    n.needs_grad = true;
    n.slot = static_cast<long>(slot);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  [[nodiscard]] const Matrix<T>& value(Var v) const { return nodes_[v.id].value(); }

  /// Gradient of a node after backward(); empty if nothing flowed into it.
  [[nodiscard]] const Matrix<T>& grad(Var v) const { return nodes_[v.id].grad; }

  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Calls fn(slot, grad) for every parameter leaf that received a gradient.
  template <typename Fn>
  void for_each_parameter_grad(Fn&& fn) const {
    for (const auto& n : nodes_) {
      if (n.slot >= 0 && !n.grad.empty()) fn(static_cast<std::size_t>(n.slot), n.grad);
    }
  }

  void backward(Var out, T seed = T(1)) {
    const auto& v = value(out);
    Matrix<T> s(v.rows, v.cols, seed);
    backward(out, s);
  }

  void backward(Var out, const Matrix<T>& seed) {
    if (!seed.same_shape(value(out))) throw ContractError("backward: seed shape mismatch");
    if (!nodes_[out.id].needs_grad) return;
    auto& g = grad_buffer(out.id);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += seed.data[i];
    for (std::size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backprop && !n.grad.empty()) n.backprop();
    }
  }

  // ---- operations ------------------------------------------------------------

  Var add(Var a, Var b) {
    const auto& x = value(a);
    const auto& y = value(b);
    if (!x.same_shape(y)) {
      throw ContractError("add: shape " + shape_string(x.rows, x.cols) + " vs " +
                          shape_string(y.rows, y.cols));
    }
    Matrix<T> out(x.rows, x.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = x.data[i] + y.data[i];
    Var r = push(std::move(out), needs(a) || needs(b));
    set_backprop(r, [this, a, b, r] {
      const auto& g = nodes_[r.id].grad;
      for (Var p : {a, b}) {
        if (!needs(p)) continue;
        auto& dp = grad_buffer(p.id);
        for (std::size_t i = 0; i < g.size(); ++i) dp.data[i] += g.data[i];
      }
    });
    return r;
  }

  /// x (m x k) times w (k x n), plus optional bias row (1 x n).
  Var linear(Var x, Var w, const Var* bias = nullptr) {
    const auto& X = value(x);
    const auto& W = value(w);
    if (X.cols != W.rows) {
      throw ContractError("linear: input " + shape_string(X.rows, X.cols) + " vs weight " +
                          shape_string(W.rows, W.cols));
    }
    const std::size_t m = X.rows;
    const std::size_t k = X.cols;
    const std::size_t n = W.cols;
    Matrix<T> out(m, n);
    if (bias) {
      const auto& B = value(*bias);
      if (B.rows != 1 || B.cols != n) throw ContractError("linear: bias shape mismatch");
      for (std::size_t i = 0; i < m; ++i) std::copy(B.data.begin(), B.data.end(), out.row(i).begin());
    }
    if (m && n && k) blas::gemm(false, false, m, n, k, T(1), X.data.data(), k, W.data.data(), n, T(1), out.data.data(), n);
    const bool has_bias = bias != nullptr;
    const Var b = has_bias ? *bias : Var{};
    Var r = push(std::move(out), needs(x) || needs(w) || (has_bias && needs(b)));
    set_backprop(r, [this, x, w, b, has_bias, r, m, k, n] {
      const auto& G = nodes_[r.id].grad;
      const auto& Xv = value(x);
      const auto& Wv = value(w);
      if (needs(x)) {
        auto& dX = grad_buffer(x.id);
        blas::gemm(false, true, m, k, n, T(1), G.data.data(), n, Wv.data.data(), n, T(1), dX.data.data(), k);
      }
      if (needs(w)) {
        auto& dW = grad_buffer(w.id);
        blas::gemm(true, false, k, n, m, T(1), Xv.data.data(), k, G.data.data(), n, T(1), dW.data.data(), n);
      }
      if (has_bias && needs(b)) {
        auto& dB = grad_buffer(b.id);
        for (std::size_t i = 0; i < m; ++i) {
          const T* gi = G.data.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) dB.data[j] += gi[j];
        }
      }
    });
    return r;
  }

  Var linear(Var x, Var w, Var bias) { return linear(x, w, &bias); }

  /// Row-wise layer normalization with affine (1 x cols) gamma/beta.
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const auto& X = value(x);
    const auto& Gm = value(gamma);
    const auto& Bt = value(beta);
    const std::size_t m = X.rows;
    const std::size_t c = X.cols;
    if (Gm.cols != c || Bt.cols != c || Gm.rows != 1 || Bt.rows != 1) {
      throw ContractError("layer_norm: affine shape mismatch");
    }
    auto cache = std::make_shared<std::pair<Matrix<T>, std::vector<T>>>(Matrix<T>(m, c),
                                                                        std::vector<T>(m));
    auto& xhat = cache->first;
    auto& inv_std = cache->second;
    Matrix<T> out(m, c);
    for (std::size_t i = 0; i < m; ++i) {
      const T* xi = X.data.data() + i * c;
      T mean = 0;
      for (std::size_t j = 0; j < c; ++j) mean += xi[j];
      mean /= static_cast<T>(c);
      T var = 0;
      for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
      var /= static_cast<T>(c);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[i] = is;
      for (std::size_t j = 0; j < c; ++j) {
        const T h = (xi[j] - mean) * is;
        xhat(i, j) = h;
        out(i, j) = h * Gm.data[j] + Bt.data[j];
      }
    }
    Var r = push(std::move(out), needs(x) || needs(gamma) || needs(beta));
    set_backprop(r, [this, x, gamma, beta, r, m, c, cache] {
      const auto& G = nodes_[r.id].grad;
      const auto& xh = cache->first;
      const auto& is = cache->second;
      const auto& Gm = value(gamma);
      if (needs(gamma) || needs(beta)) {
        auto* dg = needs(gamma) ? &grad_buffer(gamma.id) : nullptr;
        auto* db = needs(beta) ? &grad_buffer(beta.id) : nullptr;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            if (dg) dg->data[j] += G(i, j) * xh(i, j);
            if (db) db->data[j] += G(i, j);
          }
        }
      }
      if (needs(x)) {
        auto& dX = grad_buffer(x.id);
        const T inv_c = T(1) / static_cast<T>(c);
        for (std::size_t i = 0; i < m; ++i) {
          T mean_d = 0;
          T mean_dx = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T d = G(i, j) * Gm.data[j];
            mean_d += d;
            mean_dx += d * xh(i, j);
          }
          mean_d *= inv_c;
          mean_dx *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            const T d = G(i, j) * Gm.data[j];
            dX(i, j) += is[i] * (d - mean_d - xh(i, j) * mean_dx);
          }
        }
      }
    });
    return r;
  }

  /// Exact (erf-based) GELU.
  Var gelu(Var x) {
    const auto& X = value(x);
    Matrix<T> out(X.rows, X.cols);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const T v = X.data[i];
      out.data[i] = T(0.5) * v * (T(1) + std::erf(v * T(0.5 * std::numbers::sqrt2)));
    }
    Var r = push(std::move(out), needs(x));
    set_backprop(r, [this, x, r] {
      if (!needs(x)) return;
      const auto& G = nodes_[r.id].grad;
      const auto& Xv = value(x);
      auto& dX = grad_buffer(x.id);
      const T inv_sqrt_2pi = T(std::numbers::inv_sqrtpi * 0.5 * std::numbers::sqrt2);
      for (std::size_t i = 0; i < Xv.size(); ++i) {
        const T v = Xv.data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(0.5 * std::numbers::sqrt2)));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        dX.data[i] += G.data[i] * (cdf + v * pdf);
      }
    });
    return r;
  }

  /// Builds rows from groups of source rows. Output row r is the concatenation
  /// of source rows index[r*group .. r*group+group-1]; index -1 yields zeros.
  /// Covers permutation (group 1), zero padding and 2x2 patch merging (group 4).
  Var gather_rows(Var x, std::shared_ptr<const std::vector<std::int64_t>> index,
                  std::size_t group = 1) {
    const auto& X = value(x);
    if (group == 0 || index->size() % group != 0) throw ContractError("gather_rows: bad group");
    const std::size_t out_rows = index->size() / group;
    const std::size_t c = X.cols;
    Matrix<T> out(out_rows, c * group);
    for (std::size_t k = 0; k < index->size(); ++k) {
      const auto src = (*index)[k];
      if (src < 0) continue;
      if (static_cast<std::size_t>(src) >= X.rows) throw ContractError("gather_rows: index out of range");
      std::copy_n(X.data.data() + static_cast<std::size_t>(src) * c, c, out.data.data() + k * c);
    }
    Var r = push(std::move(out), needs(x));
    set_backprop(r, [this, x, r, index, c] {
      if (!needs(x)) return;
      const auto& G = nodes_[r.id].grad;
      auto& dX = grad_buffer(x.id);
      for (std::size_t k = 0; k < index->size(); ++k) {
        const auto src = (*index)[k];
        if (src < 0) continue;
        T* d = dX.data.data() + static_cast<std::size_t>(src) * c;
        const T* g = G.data.data() + k * c;
        for (std::size_t j = 0; j < c; ++j) d[j] += g[j];
      }
    });
    return r;
  }

  /// Column-wise mean over all rows: (m x c) -> (1 x c).
  Var mean_rows(Var x) {
    const auto& X = value(x);
    Matrix<T> out(1, X.cols);
    for (std::size_t i = 0; i < X.rows; ++i) {
      for (std::size_t j = 0; j < X.cols; ++j) out.data[j] += X(i, j);
    }
    const T inv = T(1) / static_cast<T>(X.rows);
    for (auto& v : out.data) v *= inv;
    Var r = push(std::move(out), needs(x));
    set_backprop(r, [this, x, r, inv] {
      if (!needs(x)) return;
      const auto& G = nodes_[r.id].grad;
      auto& dX = grad_buffer(x.id);
      for (std::size_t i = 0; i < dX.rows; ++i) {
        for (std::size_t j = 0; j < dX.cols; ++j) dX(i, j) += G.data[j] * inv;
      }
    });
    return r;
  }

  /// Horizontal concatenation of matrices with equal row counts.
  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t m = value(parts[0]).rows;
    std::size_t total = 0;
    bool any = false;
    for (Var p : parts) {
      if (value(p).rows != m) throw ContractError("concat_cols: row count mismatch");
      total += value(p).cols;
      any = any || needs(p);
    }
    Matrix<T> out(m, total);
    std::size_t offset = 0;
    for (Var p : parts) {
      const auto& P = value(p);
      for (std::size_t i = 0; i < m; ++i) {
        std::copy(P.row(i).begin(), P.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(offset));
      }
      offset += P.cols;
    }
    std::vector<Var> saved(parts.begin(), parts.end());
    Var r = push(std::move(out), any);
    set_backprop(r, [this, saved, r, m] {
      const auto& G = nodes_[r.id].grad;
      std::size_t off = 0;
      for (Var p : saved) {
        const std::size_t c = value(p).cols;
        if (needs(p)) {
          auto& dp = grad_buffer(p.id);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < c; ++j) dp(i, j) += G(i, off + j);
          }
        }
        off += c;
      }
    });
    return r;
  }

  /// Multi-head self-attention inside windows.
  ///
  /// qkv holds, per gathered row, [q | k | v] each `channels` wide. bias_table is
  /// ((2w-1)^2 x heads). Output is (rows x channels). When `probabilities` is
  /// given it receives the softmax weights laid out [window][head][query][key].
  Var window_attention(Var qkv, Var bias_table, std::shared_ptr<const AttentionLayout> layout,
                       std::size_t heads, std::vector<T>* probabilities = nullptr) {
    const auto& QKV = value(qkv);
    const auto& table = value(bias_table);
    const std::size_t L = layout->tokens;
    const std::size_t nw = layout->windows;
    if (QKV.rows != nw * L || QKV.cols % 3 != 0) throw ContractError("window_attention: qkv shape");
    const std::size_t channels = QKV.cols / 3;
    if (heads == 0 || channels % heads != 0) throw ContractError("window_attention: heads must divide channels");
    if (table.cols != heads) throw ContractError("window_attention: bias table width");
    const std::size_t hd = channels / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const std::size_t stride = QKV.cols;
    const bool masked = !layout->allowed.empty();

    auto probs = std::make_shared<std::vector<T>>(nw * heads * L * L, T(0));
    Matrix<T> out(nw * L, channels);
    std::vector<T> logits(L);
    for (std::size_t w = 0; w < nw; ++w) {
      for (std::size_t h = 0; h < heads; ++h) {
        T* P = probs->data() + (w * heads + h) * L * L;
        for (std::size_t i = 0; i < L; ++i) {
          const T* q = QKV.data.data() + (w * L + i) * stride + h * hd;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < L; ++j) {
            if (masked && !layout->allowed[(w * L + i) * L + j]) continue;
            const T* k = QKV.data.data() + (w * L + j) * stride + channels + h * hd;
            T s = 0;
            for (std::size_t d = 0; d < hd; ++d) s += q[d] * k[d];
            s = s * scale + table(layout->bias_index[i * L + j], h);
            logits[j] = s;
            mx = std::max(mx, s);
          }
          if (mx == -std::numeric_limits<T>::infinity()) continue;  // fully masked padding row
          T z = 0;
          for (std::size_t j = 0; j < L; ++j) {
            if (masked && !layout->allowed[(w * L + i) * L + j]) continue;
            const T e = std::exp(logits[j] - mx);
            P[i * L + j] = e;
            z += e;
          }
          T* o = out.data.data() + (w * L + i) * channels + h * hd;
          for (std::size_t j = 0; j < L; ++j) {
            T& p = P[i * L + j];
            if (p == T(0)) continue;
            p /= z;
            const T* v = QKV.data.data() + (w * L + j) * stride + 2 * channels + h * hd;
            for (std::size_t d = 0; d < hd; ++d) o[d] += p * v[d];
          }
        }
      }
    }
    if (probabilities) *probabilities = *probs;

    Var r = push(std::move(out), needs(qkv) || needs(bias_table));
    set_backprop(r, [this, qkv, bias_table, r, layout, probs, heads, hd, channels, scale] {
      const auto& G = nodes_[r.id].grad;
      const auto& Q = value(qkv);
      const std::size_t L = layout->tokens;
      const std::size_t nw = layout->windows;
      const std::size_t stride = Q.cols;
      Matrix<T>* dQKV = needs(qkv) ? &grad_buffer(qkv.id) : nullptr;
      Matrix<T>* dTable = needs(bias_table) ? &grad_buffer(bias_table.id) : nullptr;
      std::vector<T> dS(L);
      for (std::size_t w = 0; w < nw; ++w) {
        for (std::size_t h = 0; h < heads; ++h) {
          const T* P = probs->data() + (w * heads + h) * L * L;
          for (std::size_t i = 0; i < L; ++i) {
            const T* g = G.data.data() + (w * L + i) * channels + h * hd;
            // dP_ij = g_i . v_j ; dS = P * (dP - sum_j P_ij dP_ij)
            T dot = 0;
            for (std::size_t j = 0; j < L; ++j) {
              const T p = P[i * L + j];
              if (p == T(0)) {
                dS[j] = 0;
                continue;
              }
              const T* v = Q.data.data() + (w * L + j) * stride + 2 * channels + h * hd;
              T dp = 0;
              for (std::size_t d = 0; d < hd; ++d) dp += g[d] * v[d];
              dS[j] = dp;
              dot += p * dp;
              if (dQKV) {
                T* dv = dQKV->data.data() + (w * L + j) * stride + 2 * channels + h * hd;
                for (std::size_t d = 0; d < hd; ++d) dv[d] += p * g[d];
              }
            }
            const T* q = Q.data.data() + (w * L + i) * stride + h * hd;
            for (std::size_t j = 0; j < L; ++j) {
              const T p = P[i * L + j];
              if (p == T(0)) continue;
              const T ds = p * (dS[j] - dot);
              if (dTable) (*dTable)(layout->bias_index[i * L + j], h) += ds;
              if (dQKV) {
                const T* k = Q.data.data() + (w * L + j) * stride + channels + h * hd;
                T* dq = dQKV->data.data() + (w * L + i) * stride + h * hd;
                T* dk = dQKV->data.data() + (w * L + j) * stride + channels + h * hd;
                const T s = ds * scale;
                for (std::size_t d = 0; d < hd; ++d) {
                  dq[d] += s * k[d];
                  dk[d] += s * q[d];
                }
              }
            }
          }
        }
      }
    });
    return r;
  }

 private:
  struct Node {
    Matrix<T> owned;
    const Matrix<T>* borrowed = nullptr;
    Matrix<T> grad;
    bool needs_grad = false;
    long slot = -1;
    std::function<void()> backprop;

    [[nodiscard]] const Matrix<T>& value() const { return borrowed ? *borrowed : owned; }
  };

  Var push(Matrix<T> value, bool needs_grad) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  template <typename Fn>
  void set_backprop(Var r, Fn&& fn) {
    if (nodes_[r.id].needs_grad) nodes_[r.id].backprop = std::forward<Fn>(fn);
  }

  [[nodiscard]] bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  Matrix<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) {
      const auto& v = n.value();
      n.grad = Matrix<T>(v.rows, v.cols);
    }
    return n.grad;
  }

  std::vector<Node> nodes_;
};

}  // namespace msiqa
