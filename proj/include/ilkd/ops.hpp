// Differentiable primitives over Tensor.
//
// Rank-2 operands are (rows x cols); rank-1 operands behave as a single row.
// Every function records a graph node when an input requires grad.

#pragma once

#include "ilkd/tensor.hpp"

#include <vector>

namespace ilkd {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// a + row for every row of a; `row` has a.cols() elements.
Tensor add_rowwise(const Tensor& a, const Tensor& row);
/// a * row (elementwise) for every row of a.
Tensor mul_rowwise(const Tensor& a, const Tensor& row);

/// Subgradient at 0 is 0.
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
/// Throws DomainError on a non-positive element; use log_softmax_rows for probabilities.
Tensor log(const Tensor& a);
/// max(a, floor) elementwise; no gradient flows where the floor is active.
Tensor clamp_min(const Tensor& a, double floor);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
/// Per-row standardization (no affine part).
Tensor layer_norm_rows(const Tensor& a, double eps = 1e-5);

/// Column of per-row maxima; ties resolve to the lowest column. Gradient flows
/// only to the selected entry of each row.
Tensor row_max(const Tensor& a);
std::vector<Index> row_argmax(const Matrix& a);

/// Euclidean norm of each row as a column. The gradient of a zero row is 0.
Tensor row_l2norm(const Tensor& a);
/// Divides each row by its norm; rows with norm below eps become zero rows
/// and pass no gradient.
Tensor row_normalize(const Tensor& a, double eps);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Keeps the listed rows in order.
Tensor select_rows(const Tensor& a, std::span<const Index> rows);
/// Zeroes rows whose flag is false.
Tensor mask_rows(const Tensor& a, const std::vector<bool>& keep);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor concat_cols(std::span<const Tensor> parts);

/// Time-axis patch extraction for 1-D convolution over frame-major input
/// (frames x channels). Output frame j gathers input frames
/// j*stride - (kernel-1)/2 + t for t in [0, kernel), zero outside the input,
/// giving ceil(frames/stride) rows of kernel*channels features.
Tensor im2col_time(const Tensor& a, Index kernel, Index stride);

inline Tensor detach(const Tensor& a) { return a.detach(); }

}  // namespace ilkd
