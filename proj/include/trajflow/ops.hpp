#pragma once

// Differentiable primitives over Tensor.
//
// Broadcasting is limited to two patterns, anything else throws
// std::invalid_argument:
//   leading-batch   b.shape is a suffix of a.shape (a scalar is the empty suffix)
//   trailing-scalar b.shape == a.shape with the last extent replaced by 1
// Either operand may be the smaller one.

#include "trajflow/tensor.hpp"

#include <vector>

namespace trajflow {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double k);
Tensor add_scalar(const Tensor& a, double k);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& a);
Tensor square(const Tensor& a);
/// Clamps elementwise; the gradient is zero outside [lo, hi].
Tensor clamp(const Tensor& a, double lo, double hi);

/// [m, k] x [k, n] -> [m, n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [b, m, k] x [b, k, n] -> [b, m, n].
Tensor batch_matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose_last(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sums the last axis: [..., n] -> [...].
Tensor sum_last(const Tensor& a);
/// Sums over the leading axis of a 2D tensor: [m, n] -> [n].
Tensor sum_rows(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// Columns [begin, begin + count) of the collapsed [rows, cols] view.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
/// Leading-axis slice [begin, begin + count).
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Selects rows of the collapsed view; indices may repeat.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

/// Softmax along the last axis.
Tensor softmax(const Tensor& a);
/// Softmax along the last axis restricted to entries where mask != 0. Rows
/// with no admissible entry produce all zeros.
Tensor masked_softmax(const Tensor& a, const RowMatrix& mask);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double k) { return scale(a, k); }
inline Tensor operator*(double k, const Tensor& a) { return scale(a, k); }
inline Tensor operator+(const Tensor& a, double k) { return add_scalar(a, k); }

}  // namespace trajflow
