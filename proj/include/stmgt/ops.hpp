#pragma once

#include <vector>

#include "stmgt/tensor.hpp"

namespace stmgt {

// Differentiable tensor operations. Every op checks shapes and throws
// DimensionError naming the offending shapes.

/// (m x k) . (k x n)
Tensor matmul(const Tensor& a, const Tensor& b);

/// Dense layer over the last axis of any-rank x: (... x k) . (k x n) [+ b].
/// `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

/// Batched product over axis 0: alpha * (B x m x k) . (B x k x n), or with
/// `transpose_b` alpha * (B x m x k) . (B x n x k)^T.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false, double alpha = 1.0);

/// softmax(scale * q k^T + mask) v per batch entry, as one tape node that
/// keeps only the attention weights: q (B x Lq x d), k (B x Lk x d),
/// v (B x Lk x dv), mask (Lq x Lk) or undefined. NaN scores throw NumericError.
Tensor fused_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask, double scale);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// x + y where y's shape equals the trailing dimensions of x (bias rows,
/// positional encodings, additive masks).
Tensor add_broadcast(const Tensor& x, const Tensor& y);

Tensor relu(const Tensor& x);

/// Numerically stable softmax over each row of a matrix. NaN input throws
/// NumericError.
Tensor softmax_rows(const Tensor& x);

/// Softmax over the last axis of a tensor of any rank.
Tensor softmax_last(const Tensor& x);

/// Normalises the last axis to zero mean / unit variance (biased variance,
/// eps added), then applies gain and bias of length d.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // 2-D only

/// Concatenates tensors whose leading dims agree along the last axis.
Tensor concat_last(const std::vector<Tensor>& parts);

/// Stacks `times` copies of x along axis 0.
Tensor tile_rows(const Tensor& x, std::size_t times);

/// (S x L x n*dk) -> (S*n x L x dk), head-major within each sequence.
Tensor split_heads(const Tensor& x, std::size_t heads);
/// Inverse of split_heads.
Tensor merge_heads(const Tensor& x, std::size_t heads);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// mean((pred - target)^2) over all elements.
Tensor mse_loss(const Tensor& pred, const Tensor& target);

}  // namespace stmgt
