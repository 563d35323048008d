// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small building blocks shared by the encoder, bridge and decoder.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "layalign/ops.hpp"

namespace layalign {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], may be undefined

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

/// Gaussian weights with stddev `init_std`; zero bias if requested.
template <class T>
Linear<T> make_linear(std::size_t in, std::size_t out, bool with_bias, double init_std,
                      std::mt19937_64& rng, bool trainable) {
  Linear<T> l;
  l.weight = Tensor<T>::randn({in, out}, init_std, rng, trainable);
  if (with_bias) l.bias = Tensor<T>::zeros({out}, trainable);
  return l;
}

template <class T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNormParams make(std::size_t d, bool trainable) {
    return {Tensor<T>::full({d}, T(1), trainable), Tensor<T>::zeros({d}, trainable)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

/// Additive mask value for disallowed attention entries. Large enough that
/// exp() underflows to exactly zero after max subtraction.
template <class T>
constexpr T kMaskedScore = T(-1e9);

/// [B, L, d] -> [B, H, L, d/H]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  return permute(reshape(x, {b, l, heads, d / heads}), {0, 2, 1, 3});
}

/// [B, H, L, dh] -> [B, L, H*dh]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), l = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, l, h * dh});
}

/// Scaled dot-product attention over already projected, head-split inputs.
/// q [B,H,Lq,dh], k/v [B,H,Lk,dh], mask_bias [B,1,Lq,Lk] (0 or kMaskedScore).
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                 const Tensor<T>& mask_bias) {
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(3))));
  Tensor<T> scores = add(scale(matmul_bt(q, k), inv_sqrt), mask_bias);
  return matmul(softmax(scores, -1), v);
}

/// Key-padding mask, optionally causal: entry (b, i, j) is open iff key j is
/// valid in row b and (!causal || j <= i).
template <class T>
Tensor<T> self_attention_mask(std::size_t batch, std::size_t len,
                              const std::vector<std::uint8_t>& valid, bool causal) {
  std::vector<T> m(batch * len * len, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        const bool open = valid[b * len + j] != 0 && (!causal || j <= i);
        if (!open) m[(b * len + i) * len + j] = kMaskedScore<T>;
      }
    }
  }
  return Tensor<T>({batch, 1, len, len}, std::move(m));
}

/// Every query may read every valid key.
template <class T>
Tensor<T> cross_attention_mask(std::size_t batch, std::size_t q_len, std::size_t k_len,
                               const std::vector<std::uint8_t>& key_valid) {
  std::vector<T> m(batch * q_len * k_len, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < q_len; ++i) {
      for (std::size_t j = 0; j < k_len; ++j) {
        if (key_valid[b * k_len + j] == 0) m[(b * q_len + i) * k_len + j] = kMaskedScore<T>;
      }
    }
  }
  return Tensor<T>({batch, 1, q_len, k_len}, std::move(m));
}

/// Converts every parameter of a module built for float into U (or back).
template <class U, class T>
Linear<U> cast_linear(const Linear<T>& l) {
  Linear<U> out;
  out.weight = cast<U>(l.weight);
  if (l.bias.defined()) out.bias = cast<U>(l.bias);
  return out;
}

}  // namespace layalign
