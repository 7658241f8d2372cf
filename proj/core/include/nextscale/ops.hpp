#pragma once

#include <cstdint>
#include <vector>

#include "nextscale/autograd.hpp"

namespace nextscale {

// Differentiable operations. Layout conventions:
//   images / feature grids  [B, C, H, W]
//   token sequences         [B, L, D]
//   attention scores        [B, H, L, L']
// Every op checks its input shapes and throws ContractError on mismatch.

// Elementwise
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T factor);
template <class T> Var<T> add_constant(const Var<T>& a, const Tensor<T>& offset);
template <class T> Var<T> stop_gradient(const Var<T>& a);
template <class T> Var<T> relu(const Var<T>& a);
template <class T> Var<T> silu(const Var<T>& a);
template <class T> Var<T> gelu(const Var<T>& a);  // tanh approximation
template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> reshape(const Var<T>& a, Shape shape);

// Reductions and losses (scalar results)
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);
template <class T> Var<T> mse(const Var<T>& a, const Var<T>& b);
/// Summed cross-entropy of logits [N, V] against integer targets.
template <class T> Var<T> cross_entropy_sum(const Var<T>& logits, const std::vector<int>& targets);

// Dense layers
/// [M, K] x [K, N] -> [M, N]
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x [..., in] W [in, out] (+ bias [out]) -> [..., out]; pass an undefined bias to skip it.
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
/// Batched product over a shared leading group: a [G, M, K] (or [G, K, M] when
/// trans_a), b [G, K, N] (or [G, N, K] when trans_b).
template <class T> Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b);
/// Row gather: table [V, D], indices -> [n, D].
template <class T> Var<T> embedding(const Var<T>& table, const std::vector<int>& indices);

// Normalization and conditioning
/// Layer normalization over the last dimension without affine terms.
template <class T> Var<T> layer_norm(const Var<T>& x, T eps = T(1e-6));
/// Unit L2 norm over the last dimension; all-zero rows stay zero.
template <class T> Var<T> l2_normalize(const Var<T>& x);
/// x [B, L, D] * (1 + scale [B, D]) + shift [B, D]
template <class T> Var<T> modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scale);
/// x [B, L, D] * gate [B, D]
template <class T> Var<T> mul_rows(const Var<T>& x, const Var<T>& gate);
/// x [B, n * D] -> the index-th [B, D] block.
template <class T> Var<T> chunk(const Var<T>& x, std::size_t index, std::size_t count);
/// x [B, L, D] + e [L, D] broadcast over the batch.
template <class T> Var<T> add_broadcast(const Var<T>& x, const Var<T>& e);
/// Rows [begin, end) of the first dimension.
template <class T> Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end);
/// Concatenate [B, L_i, D] along L.
template <class T> Var<T> concat_seq(const std::vector<Var<T>>& parts);

// Attention
/// [B, L, H * dh] -> [B, H, L, dh]
template <class T> Var<T> split_heads(const Var<T>& x, std::size_t heads);
/// [B, H, L, dh] -> [B, L, H * dh]
template <class T> Var<T> merge_heads(const Var<T>& x);
/// scores [B, H, L, L'] * temperature [H]
template <class T> Var<T> scale_heads(const Var<T>& scores, const Var<T>& temperature);
/// Softmax over the last dimension of [..., L, L'] restricted to entries where
/// allow[i * L' + j] != 0. Disallowed entries are exactly zero.
template <class T>
Var<T> masked_softmax(const Var<T>& scores, const std::vector<std::uint8_t>& allow);

// Convolutions and resampling
/// x [B, Ci, H, W], weight [Co, Ci, k, k], bias [Co]
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t pad);
/// x [B, Ci, H, W], weight [Ci, Co, k, k], bias [Co]; output (H-1)*stride - 2*pad + k.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        std::size_t stride, std::size_t pad);
/// Bilinear resize of [B, C, H, W] to [B, C, out_h, out_w] with sample points at
/// pixel centres ((i + 0.5) * in / out - 0.5), edge-clamped.
template <class T> Var<T> resize_bilinear(const Var<T>& x, std::size_t out_h, std::size_t out_w);

/// Per-axis interpolation weights used by resize_bilinear: an [out, in] matrix
/// in row-major order whose rows are convex combinations.
std::vector<double> bilinear_weights(std::size_t in, std::size_t out);

}  // namespace nextscale
