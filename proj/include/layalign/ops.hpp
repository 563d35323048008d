// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable tensor operations. Each op records a backward rule on the
// active Tape when at least one input requires a gradient.

#include <cstdint>
#include <span>
#include <vector>

#include "layalign/tensor.hpp"

namespace layalign {

/// a[..., p, q] x b[..., q, r] -> [..., p, r]. Batch extents broadcast
/// numpy-style; a rank-2 b is applied to every row of a.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// a[..., p, q] x b[..., r, q]^T -> [..., p, r] without materializing b^T.
template <class T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise with numpy broadcasting.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> silu(const Tensor<T>& x);
template <class T>
Tensor<T> tanh(const Tensor<T>& x);

/// Max-subtracted softmax along `axis` (negative counts from the end).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

/// Normalizes over the last extent, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// Half-open range [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end);

/// Row lookup: result shape is `leading` + [table.dim(1)], with
/// numel(leading) == ids.size().
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape leading);

template <class T>
Tensor<T> sum(const Tensor<T>& x);
template <class T>
Tensor<T> mean(const Tensor<T>& x);

/// Mean token negative log-likelihood over rows with mask != 0.
/// logits is [..., V]; targets and mask have one entry per row.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask);

}  // namespace layalign
