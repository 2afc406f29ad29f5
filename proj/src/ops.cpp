#include "ilkd/ops.hpp"

#include <cmath>
#include <limits>

namespace ilkd {

namespace {

using detail::BackwardRule;

Shape matrix_shape(Index rows, Index cols) { return {rows, cols}; }

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

Tensor unary(const char* op, const Tensor& a, Matrix value,
             std::function<Matrix(const Matrix& upstream)> local) {
  return Tensor::make_result(op, std::move(value), a.shape(), {a},
                             [local = std::move(local)](const Matrix& g, const std::vector<bool>& needs,
                                                        std::vector<Matrix>& out) {
                               if (needs[0]) out[0] = local(g);
                             });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  Matrix value = a.value() * b.value();
  Shape shape = a.rank() == 1 ? Shape{value.cols()} : matrix_shape(value.rows(), value.cols());
  // Each side's gradient only needs the other operand's value.
  Matrix av = b.requires_grad() ? a.value() : Matrix();
  Matrix bv = a.requires_grad() ? b.value() : Matrix();
  return Tensor::make_result(
      "matmul", std::move(value), std::move(shape), {a, b},
      [av = std::move(av), bv = std::move(bv)](const Matrix& g, const std::vector<bool>& needs,
                                               std::vector<Matrix>& out) {
        if (needs[0]) out[0].noalias() = g * bv.transpose();
        if (needs[1]) out[1].noalias() = av.transpose() * g;
      });
}

Tensor transpose(const Tensor& a) {
  Matrix value = a.value().transpose();
  Shape shape = matrix_shape(value.rows(), value.cols());
  return Tensor::make_result("transpose", std::move(value), std::move(shape), {a},
                             [](const Matrix& g, const std::vector<bool>& needs, std::vector<Matrix>& out) {
                               if (needs[0]) out[0] = g.transpose();
                             });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  Index count = 1;
  for (Index d : shape) count *= d;
  if (count != a.numel() || shape.size() > 2)
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  Index rows = shape.size() == 2 ? shape[0] : 1;
  Index cols = count / rows;
  Matrix value = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const Index in_rows = a.rows(), in_cols = a.cols();
  return Tensor::make_result("reshape", std::move(value), shape, {a},
                             [in_rows, in_cols](const Matrix& g, const std::vector<bool>& needs,
                                                std::vector<Matrix>& out) {
                               if (needs[0]) out[0] = Eigen::Map<const Matrix>(g.data(), in_rows, in_cols);
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  return Tensor::make_result("add", a.value() + b.value(), a.shape(), {a, b},
                             [](const Matrix& g, const std::vector<bool>& needs, std::vector<Matrix>& out) {
                               if (needs[0]) out[0] = g;
                               if (needs[1]) out[1] = g;
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  return Tensor::make_result("sub", a.value() - b.value(), a.shape(), {a, b},
                             [](const Matrix& g, const std::vector<bool>& needs, std::vector<Matrix>& out) {
                               if (needs[0]) out[0] = g;
                               if (needs[1]) out[1] = -g;
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  return Tensor::make_result(
      "mul", a.value().cwiseProduct(b.value()), a.shape(), {a, b},
      [av = a.value(), bv = b.value()](const Matrix& g, const std::vector<bool>& needs,
                                       std::vector<Matrix>& out) {
        if (needs[0]) out[0] = g.cwiseProduct(bv);
        if (needs[1]) out[1] = g.cwiseProduct(av);
      });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, a.value() * factor, [factor](const Matrix& g) -> Matrix { return g * factor; });
}

Tensor add_rowwise(const Tensor& a, const Tensor& row) {
  if (row.numel() != a.cols())
    throw ShapeError("add_rowwise: row " + shape_string(row.shape()) + " does not fit " +
                     shape_string(a.shape()));
  Matrix value = a.value();
  value.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(row.value().data(), row.numel());
  const Index rr = row.rows(), rc = row.cols();
  return Tensor::make_result("add_rowwise", std::move(value), a.shape(), {a, row},
                             [rr, rc](const Matrix& g, const std::vector<bool>& needs, std::vector<Matrix>& out) {
                               if (needs[0]) out[0] = g;
                               if (needs[1]) {
                                 Eigen::RowVectorXd s = g.colwise().sum();
                                 out[1] = Eigen::Map<const Matrix>(s.data(), rr, rc);
                               }
                             });
}

Tensor mul_rowwise(const Tensor& a, const Tensor& row) {
  if (row.numel() != a.cols())
    throw ShapeError("mul_rowwise: row " + shape_string(row.shape()) + " does not fit " +
                     shape_string(a.shape()));
  Eigen::RowVectorXd r = Eigen::Map<const Eigen::RowVectorXd>(row.value().data(), row.numel());
  Matrix value = a.value().array().rowwise() * r.array();
  const Index rr = row.rows(), rc = row.cols();
  return Tensor::make_result(
      "mul_rowwise", std::move(value), a.shape(), {a, row},
      [r, av = a.value(), rr, rc](const Matrix& g, const std::vector<bool>& needs, std::vector<Matrix>& out) {
        if (needs[0]) out[0] = g.array().rowwise() * r.array();
        if (needs[1]) {
          Eigen::RowVectorXd s = g.cwiseProduct(av).colwise().sum();
          out[1] = Eigen::Map<const Matrix>(s.data(), rr, rc);
        }
      });
}

Tensor relu(const Tensor& a) {
  Matrix value = a.value().cwiseMax(0.0);
  Matrix gate = (a.value().array() > 0.0).cast<double>().matrix();
  return unary("relu", a, std::move(value),
               [gate = std::move(gate)](const Matrix& g) -> Matrix { return g.cwiseProduct(gate); });
}

Tensor exp(const Tensor& a) {
  Matrix value = a.value().array().exp().matrix();
  return unary("exp", a, value, [value](const Matrix& g) -> Matrix { return g.cwiseProduct(value); });
}

Tensor log(const Tensor& a) {
  if ((a.value().array() <= 0.0).any())
    throw DomainError("log: non-positive input in tensor of shape " + shape_string(a.shape()) +
                      "; use log_softmax_rows for probabilities");
  return unary("log", a, a.value().array().log().matrix(),
               [av = a.value()](const Matrix& g) -> Matrix { return g.cwiseQuotient(av); });
}

Tensor clamp_min(const Tensor& a, double floor) {
  Matrix value = a.value().cwiseMax(floor);
  Matrix gate = (a.value().array() >= floor).cast<double>().matrix();
  return unary("clamp_min", a, std::move(value),
               [gate = std::move(gate)](const Matrix& g) -> Matrix { return g.cwiseProduct(gate); });
}

Tensor softmax_rows(const Tensor& a) {
  Matrix value = (a.value().colwise() - a.value().rowwise().maxCoeff()).array().exp().matrix();
  value.array().colwise() /= value.rowwise().sum().array();
  return unary("softmax_rows", a, value, [value](const Matrix& g) -> Matrix {
    Vector dot = g.cwiseProduct(value).rowwise().sum();
    return value.cwiseProduct(g - dot.replicate(1, g.cols()));
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  Vector row_max = a.value().rowwise().maxCoeff();
  Matrix shifted = a.value().colwise() - row_max;
  Vector lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix value = shifted.colwise() - lse;
  Matrix prob = value.array().exp().matrix();
  return unary("log_softmax_rows", a, std::move(value), [prob = std::move(prob)](const Matrix& g) -> Matrix {
    Vector total = g.rowwise().sum();
    return g - prob.cwiseProduct(total.replicate(1, g.cols()));
  });
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
  const double n = static_cast<double>(a.cols());
  Vector mu = a.value().rowwise().mean();
  Matrix centered = a.value().colwise() - mu;
  Vector inv_std = ((centered.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
  Matrix normed = centered.array().colwise() * inv_std.array();
  return unary("layer_norm_rows", a, normed, [normed, inv_std, n](const Matrix& g) -> Matrix {
    Vector g_mean = g.rowwise().mean();
    Vector gx_mean = g.cwiseProduct(normed).rowwise().sum() / n;
    Matrix r = g.colwise() - g_mean;
    r -= normed.cwiseProduct(gx_mean.replicate(1, g.cols()));
    return r.array().colwise() * inv_std.array();
  });
}

std::vector<Index> row_argmax(const Matrix& a) {
  std::vector<Index> idx(static_cast<size_t>(a.rows()));
  for (Index r = 0; r < a.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < a.cols(); ++c)
      if (a(r, c) > a(r, best)) best = c;
    idx[static_cast<size_t>(r)] = best;
  }
  return idx;
}

Tensor row_max(const Tensor& a) {
  auto idx = row_argmax(a.value());
  Matrix value(a.rows(), 1);
  for (Index r = 0; r < a.rows(); ++r) value(r, 0) = a.value()(r, idx[static_cast<size_t>(r)]);
  const Index cols = a.cols();
  return Tensor::make_result("row_max", std::move(value), matrix_shape(a.rows(), 1), {a},
                             [idx = std::move(idx), cols](const Matrix& g, const std::vector<bool>& needs,
                                                          std::vector<Matrix>& out) {
                               if (!needs[0]) return;
                               out[0] = Matrix::Zero(g.rows(), cols);
                               for (Index r = 0; r < g.rows(); ++r) out[0](r, idx[static_cast<size_t>(r)]) = g(r, 0);
                             });
}

Tensor row_l2norm(const Tensor& a) {
  Vector norms = a.value().rowwise().norm();
  Matrix value = norms;
  return Tensor::make_result("row_l2norm", std::move(value), matrix_shape(a.rows(), 1), {a},
                             [av = a.value(), norms](const Matrix& g, const std::vector<bool>& needs,
                                                     std::vector<Matrix>& out) {
                               if (!needs[0]) return;
                               out[0] = Matrix::Zero(av.rows(), av.cols());
                               for (Index r = 0; r < av.rows(); ++r)
                                 if (norms(r) > 0) out[0].row(r) = av.row(r) * (g(r, 0) / norms(r));
                             });
}

Tensor row_normalize(const Tensor& a, double eps) {
  Vector norms = a.value().rowwise().norm();
  Matrix value = Matrix::Zero(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r)
    if (norms(r) >= eps) value.row(r) = a.value().row(r) / norms(r);
  return unary("row_normalize", a, value, [value, norms, eps](const Matrix& g) -> Matrix {
    Matrix out = Matrix::Zero(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      if (norms(r) < eps) continue;
      const double along = g.row(r).dot(value.row(r));
      out.row(r) = (g.row(r) - along * value.row(r)) / norms(r);
    }
    return out;
  });
}

Tensor sum(const Tensor& a) {
  const Index rows = a.rows(), cols = a.cols();
  return Tensor::make_result("sum", Matrix::Constant(1, 1, a.value().sum()), {}, {a},
                             [rows, cols](const Matrix& g, const std::vector<bool>& needs,
                                          std::vector<Matrix>& out) {
                               if (needs[0]) out[0] = Matrix::Constant(rows, cols, g(0, 0));
                             });
}

Tensor mean(const Tensor& a) {
  const Index rows = a.rows(), cols = a.cols();
  const double n = static_cast<double>(a.numel());
  return Tensor::make_result("mean", Matrix::Constant(1, 1, a.value().sum() / n), {}, {a},
                             [rows, cols, n](const Matrix& g, const std::vector<bool>& needs,
                                             std::vector<Matrix>& out) {
                               if (needs[0]) out[0] = Matrix::Constant(rows, cols, g(0, 0) / n);
                             });
}

Tensor select_rows(const Tensor& a, std::span<const Index> rows) {
  Matrix value(static_cast<Index>(rows.size()), a.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows())
      throw ShapeError("select_rows: row " + std::to_string(rows[i]) + " out of range for " +
                       shape_string(a.shape()));
    value.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> picked(rows.begin(), rows.end());
  const Index in_rows = a.rows();
  Shape shape = matrix_shape(value.rows(), value.cols());
  return Tensor::make_result("select_rows", std::move(value), std::move(shape), {a},
                             [picked = std::move(picked), in_rows](const Matrix& g, const std::vector<bool>& needs,
                                                                   std::vector<Matrix>& out) {
                               if (!needs[0]) return;
                               out[0] = Matrix::Zero(in_rows, g.cols());
                               for (size_t i = 0; i < picked.size(); ++i)
                                 out[0].row(picked[i]) += g.row(static_cast<Index>(i));
                             });
}

Tensor mask_rows(const Tensor& a, const std::vector<bool>& keep) {
  if (static_cast<Index>(keep.size()) != a.rows())
    throw ShapeError("mask_rows: mask of length " + std::to_string(keep.size()) + " for " +
                     shape_string(a.shape()));
  Matrix value = a.value();
  for (Index r = 0; r < value.rows(); ++r)
    if (!keep[static_cast<size_t>(r)]) value.row(r).setZero();
  return unary("mask_rows", a, std::move(value), [keep](const Matrix& g) -> Matrix {
    Matrix out = g;
    for (Index r = 0; r < out.rows(); ++r)
      if (!keep[static_cast<size_t>(r)]) out.row(r).setZero();
    return out;
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.cols())
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_string(a.shape()));
  Matrix value = a.value().middleCols(start, count);
  const Index cols = a.cols();
  Shape shape = matrix_shape(value.rows(), value.cols());
  return Tensor::make_result("slice_cols", std::move(value), std::move(shape), {a},
                             [start, count, cols](const Matrix& g, const std::vector<bool>& needs,
                                                  std::vector<Matrix>& out) {
                               if (!needs[0]) return;
                               out[0] = Matrix::Zero(g.rows(), cols);
                               out[0].middleCols(start, count) = g;
                             });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw ShapeError("concat_cols: row count mismatch " + shape_string(parts.front().shape()) + " vs " +
                       shape_string(p.shape()));
    widths.push_back(p.cols());
    cols += p.cols();
  }
  Matrix value(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    value.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return Tensor::make_result("concat_cols", std::move(value), matrix_shape(rows, cols),
                             std::vector<Tensor>(parts.begin(), parts.end()),
                             [widths = std::move(widths)](const Matrix& g, const std::vector<bool>& needs,
                                                          std::vector<Matrix>& out) {
                               Index at = 0;
                               for (size_t i = 0; i < widths.size(); ++i) {
                                 if (needs[i]) out[i] = g.middleCols(at, widths[i]);
                                 at += widths[i];
                               }
                             });
}

Tensor im2col_time(const Tensor& a, Index kernel, Index stride) {
  if (kernel < 1 || stride < 1)
    throw ShapeError("im2col_time: kernel and stride must be positive, got " + std::to_string(kernel) + ", " +
                     std::to_string(stride));
  const Index frames = a.rows(), channels = a.cols();
  const Index out_frames = (frames + stride - 1) / stride;
  const Index pad = (kernel - 1) / 2;
  Matrix value = Matrix::Zero(out_frames, kernel * channels);
  for (Index j = 0; j < out_frames; ++j)
    for (Index t = 0; t < kernel; ++t) {
      const Index src = j * stride - pad + t;
      if (src >= 0 && src < frames) value.block(j, t * channels, 1, channels) = a.value().row(src);
    }
  Shape shape = matrix_shape(value.rows(), value.cols());
  return Tensor::make_result("im2col_time", std::move(value), std::move(shape), {a},
                             [frames, channels, kernel, stride, pad, out_frames](
                                 const Matrix& g, const std::vector<bool>& needs, std::vector<Matrix>& out) {
                               if (!needs[0]) return;
                               out[0] = Matrix::Zero(frames, channels);
                               for (Index j = 0; j < out_frames; ++j)
                                 for (Index t = 0; t < kernel; ++t) {
                                   const Index src = j * stride - pad + t;
                                   if (src >= 0 && src < frames)
                                     out[0].row(src) += g.block(j, t * channels, 1, channels);
                                 }
                             });
}

}  // namespace ilkd
