#pragma once

// Differentiable tensor ops. Every op validates shapes (ShapeError naming
// both shapes) and rejects non-finite results (NumericError naming the op).
//
// Broadcasting is limited to leading-batch expansion: a binary op accepts
// `b` whose shape equals a trailing suffix of `a`'s shape, and the result
// has `a`'s shape. Anything else needs an explicit reshape.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "acebert/tensor.hpp"

namespace acebert::ops {

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T offset);

// Swaps the last two axes.
template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a);
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis = 0);
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);

// out[i] = table[indices[i]]; gradients scatter-add back into the table.
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const std::int64_t> indices);

// out[i] = a[i, indices[i]] for a 2-D `a`.
template <class T>
BasicTensor<T> pick(const BasicTensor<T>& a, std::span<const std::int64_t> indices);

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a);
template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a);
template <class T>
BasicTensor<T> log(const BasicTensor<T>& a);
template <class T>
BasicTensor<T> clamp(const BasicTensor<T>& a, T lo, T hi);

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps = T(1e-5));
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& a);
template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a);
template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a);
// Reduces the last axis.
template <class T>
BasicTensor<T> sum_last(const BasicTensor<T>& a);

// Unit-normalises rows of the last axis. A zero row maps to the uniform
// unit vector and passes no gradient.
template <class T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& a);

template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& a, double rate, std::mt19937_64& rng);

// Fused multi-head self-attention over packed rows.
//   qkv: (batch*seq, 3*D) holding Q | K | V column blocks.
//   key_mask: batch*seq flags; 0 marks padding, which receives -inf logits
//   from every query position.
// Returns (batch*seq, D). When `probabilities` is non-null it receives the
// attention matrices laid out as [batch][head][query][key].
template <class T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& qkv, std::size_t batch, std::size_t seq,
                                    std::size_t heads, std::span<const std::uint8_t> key_mask,
                                    std::vector<T>* probabilities = nullptr);

}  // namespace acebert::ops
