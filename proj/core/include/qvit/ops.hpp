#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "qvit/tensor.hpp"

namespace qvit {

// Elementwise binary ops broadcast numpy-style (right-aligned, size-1 axes
// stretch). Incompatible shapes raise DimensionError. Division by an exact
// zero yields +/-inf (NumericError when debug checks are on).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor add_scalar(const Tensor& x, float s);
Tensor mul_scalar(const Tensor& x, float s);
Tensor neg(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// Exact (erf) form.
Tensor gelu(const Tensor& x);

// Full reductions return shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Population variance (divides by n).
Tensor variance(const Tensor& x);
// Reductions over the last axis drop it; a rank-1 input gives shape [1].
Tensor sum_lastdim(const Tensor& x);
Tensor mean_lastdim(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose_last2(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);

// [m,k]x[k,n], or batched [...,m,k]x[...,k,n] with equal leading axes. A
// rank-2 right operand is shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// a . b^T over the last two axes: [...,m,k]x[...,n,k] -> [...,m,n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x[...,in] . w[out,in]^T + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Max-subtracted softmax over the last axis.
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);
// Mean over the batch of -log softmax(logits)[label]. Labels outside
// [0, C) raise IndexError.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Rows of the last axis scaled to unit l2 norm; all-zero rows stay zero.
Tensor l2_normalize_lastdim(const Tensor& x);
// Frobenius norm of each matrix formed by the last two axes. The gradient at
// a zero matrix is taken as zero.
Tensor frobenius_norm_last2(const Tensor& x);

}  // namespace qvit
