#include "ilkd/ops.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <random>

namespace ilkd {
namespace {

Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor::from_matrix(Matrix::Zero(2, 3), Shape{4, 2}), ShapeError);
  Tensor t = Tensor::from_matrix(Matrix::Zero(2, 3));
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
  EXPECT_EQ(t.numel(), 6);
}

TEST(Ops, ReluDefinition) {
  Tensor r = relu(Tensor::vector({-1.0, 0.0, 2.0}));
  EXPECT_EQ(r.value(), (Matrix(1, 3) << 0.0, 0.0, 2.0).finished());
}

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
  Tensor s = softmax_rows(Tensor::vector({0.0, 0.0}));
  EXPECT_DOUBLE_EQ(s.value()(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s.value()(0, 1), 0.5);
}

TEST(Ops, MatmulByIdentity) {
  std::mt19937_64 rng(1);
  Matrix x = random_matrix(3, 3, rng);
  Tensor out = matmul(Tensor::from_matrix(Matrix::Identity(3, 3)), Tensor::from_matrix(x));
  EXPECT_EQ(out.value(), x);
}

TEST(Ops, ShapeErrorNamesOpAndShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

TEST(Ops, LogRejectsNonPositive) {
  EXPECT_THROW(log(Tensor::vector({1.0, 0.0})), DomainError);
  EXPECT_THROW(log(Tensor::vector({-2.0})), DomainError);
}

TEST(Ops, SoftmaxRowsSumToOneAndLogSoftmaxStaysFinite) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix z = random_matrix(4, 6, rng, -700.0, 700.0);
    Matrix p = softmax_rows(Tensor::from_matrix(z)).value();
    for (Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
    Matrix lp = log_softmax_rows(Tensor::from_matrix(z)).value();
    EXPECT_TRUE(lp.allFinite());
  }
}

TEST(Backward, SumOfSquares) {
  Tensor x = Tensor::vector({1.0, 2.0, 3.0}, true);
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.grad().has_value());
  EXPECT_EQ(*x.grad(), (Matrix(1, 3) << 2.0, 4.0, 6.0).finished());
}

TEST(Backward, LogSoftmaxJacobian) {
  // d/dz log softmax(z)_0 = e_0 - softmax(z) = [0.5, -0.5] at z = 0.
  Tensor z = Tensor::vector({0.0, 0.0}, true);
  backward(sum(slice_cols(log(softmax_rows(z)), 0, 1)));
  EXPECT_NEAR((*z.grad())(0, 0), 0.5, 1e-15);
  EXPECT_NEAR((*z.grad())(0, 1), -0.5, 1e-15);

  auto f = [](const Tensor& t) { return sum(slice_cols(log(softmax_rows(t)), 0, 1)); };
  EXPECT_LT(finite_diff_check(f, Matrix::Zero(1, 2)), 1e-9);
}

TEST(Backward, DetachBlocksGradient) {
  Tensor y = Tensor::vector({1.0, -2.0}, true);
  Tensor d = detach(y);
  EXPECT_EQ(d.value(), y.value());
  EXPECT_FALSE(d.requires_grad());
  Tensor w = Tensor::vector({3.0, 4.0}, true);
  backward(sum(mul(w, d)));
  EXPECT_FALSE(y.grad().has_value());
  EXPECT_EQ(*w.grad(), y.value());
  // A root built only from detached values has no graph to differentiate.
  EXPECT_THROW(backward(sum(mul(d, d))), GraphError);
}

TEST(Backward, RootMustBeScalar) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, AccumulatesAcrossCallsAndReleasesGraph) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  Tensor root = sum(mul(x, x));
  backward(root);
  EXPECT_THROW(backward(root), GraphError);
  backward(sum(mul(x, x)));
  EXPECT_EQ(*x.grad(), (Matrix(1, 2) << 4.0, 8.0).finished());
  x.zero_grad();
  EXPECT_FALSE(x.grad().has_value());
}

TEST(Backward, FanOutSumsPerPathGradients) {
  std::mt19937_64 rng(3);
  Matrix x0 = random_matrix(3, 4, rng);
  auto f = [](const Tensor& x) {
    Tensor a = relu(x);
    Tensor b = exp(x);
    Tensor c = matmul(x, transpose(x));
    return add(add(sum(mul(a, b)), sum(c)), mean(softmax_rows(x)));
  };
  EXPECT_LT(finite_diff_check(f, x0), 1e-6);

  // y = x + x has dy/dx = 2 exactly.
  Tensor x = Tensor::from_matrix(x0, true);
  Matrix g = gradient(sum(add(x, x)), x);
  EXPECT_TRUE((g.array() == 2.0).all());
}

TEST(Gradient, IntermediateTargetsAndNoSideEffects) {
  Tensor x = Tensor::vector({0.5, -1.5, 2.0}, true);
  Tensor h = exp(x);
  Tensor root = sum(mul(h, h));
  Matrix dh = gradient(root, h);
  EXPECT_TRUE(dh.isApprox(2.0 * h.value()));
  EXPECT_FALSE(x.grad().has_value());
  // Graph survives gradient().
  backward(root);
  EXPECT_TRUE(x.grad()->isApprox((2.0 * h.value().array().square()).matrix()));
}

TEST(FiniteDiff, SquaresAndConstants) {
  std::mt19937_64 rng(11);
  Matrix x = random_matrix(1, 8, rng);
  EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(mul(t, t)); }, x), 1e-7);
  EXPECT_EQ(finite_diff_check([](const Tensor& t) { return sum(scale(t, 0.0)); }, x), 0.0);
  Matrix pos = random_matrix(1, 8, rng, 0.1, 2.0);
  EXPECT_LT(finite_diff_check([](const Tensor& t) { return sum(relu(t)); }, pos), 1e-7);
}

// Every differentiable primitive, checked at random non-degenerate points.
TEST(FiniteDiff, EveryPrimitive) {
  std::mt19937_64 rng(2024);
  const Matrix w = random_matrix(4, 5, rng);
  const Matrix row = random_matrix(1, 5, rng);
  const std::vector<Index> picks{2, 0, 2};
  const std::vector<bool> keep{true, false, true, true};
  using Fn = std::function<Tensor(const Tensor&)>;
  // A fixed random projection makes every output element matter.
  auto project = [&](const Tensor& t) {
    Matrix p = Matrix::Zero(t.rows(), t.cols());
    std::mt19937_64 local(5);
    std::uniform_real_distribution<double> u(-1, 1);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(local);
    return sum(mul(t, Tensor::from_matrix(p)));
  };
  const std::vector<std::pair<std::string, Fn>> cases{
      {"matmul_left", [&](const Tensor& t) { return project(matmul(t, Tensor::from_matrix(w.transpose()))); }},
      {"matmul_right", [&](const Tensor& t) { return project(matmul(Tensor::from_matrix(w), transpose(t))); }},
      {"reshape", [&](const Tensor& t) { return project(reshape(t, {5, 4})); }},
      {"sub", [&](const Tensor& t) { return project(sub(Tensor::from_matrix(w), t)); }},
      {"scale", [&](const Tensor& t) { return project(scale(t, -1.7)); }},
      {"add_rowwise_row", [&](const Tensor& t) { return project(add_rowwise(Tensor::from_matrix(w), select_rows(t, std::vector<Index>{3}))); }},
      {"add_rowwise_mat", [&](const Tensor& t) { return project(add_rowwise(t, Tensor::from_matrix(row))); }},
      {"mul_rowwise_row", [&](const Tensor& t) { return project(mul_rowwise(Tensor::from_matrix(w), select_rows(t, std::vector<Index>{1}))); }},
      {"mul_rowwise_mat", [&](const Tensor& t) { return project(mul_rowwise(t, Tensor::from_matrix(row))); }},
      {"relu", [&](const Tensor& t) { return project(relu(t)); }},
      {"exp", [&](const Tensor& t) { return project(exp(t)); }},
      {"log", [&](const Tensor& t) { return project(log(exp(t))); }},
      {"softmax", [&](const Tensor& t) { return project(softmax_rows(t)); }},
      {"log_softmax", [&](const Tensor& t) { return project(log_softmax_rows(t)); }},
      {"layer_norm", [&](const Tensor& t) { return project(layer_norm_rows(t)); }},
      {"row_max", [&](const Tensor& t) { return project(row_max(t)); }},
      {"row_l2norm", [&](const Tensor& t) { return project(row_l2norm(t)); }},
      {"row_normalize", [&](const Tensor& t) { return project(row_normalize(t, 1e-8)); }},
      {"mean", [&](const Tensor& t) { return mean(mul(t, t)); }},
      {"select_rows", [&](const Tensor& t) { return project(select_rows(t, picks)); }},
      {"mask_rows", [&](const Tensor& t) { return project(mask_rows(t, keep)); }},
      {"concat", [&](const Tensor& t) {
         std::vector<Tensor> parts{slice_cols(t, 3, 2), t, exp(slice_cols(t, 0, 1))};
         return project(concat_cols(parts));
       }},
      {"im2col", [&](const Tensor& t) { return project(im2col_time(t, 3, 2)); }},
  };
  for (const auto& [name, f] : cases) {
    Matrix x = random_matrix(4, 5, rng);
    EXPECT_LT(finite_diff_check(f, x), 1e-6) << name;
  }
}

TEST(Ops, Im2colCeilingLength) {
  Tensor x = Tensor::from_matrix(Matrix::Ones(7, 2));
  EXPECT_EQ(im2col_time(x, 3, 2).rows(), 4);
  EXPECT_EQ(im2col_time(x, 3, 1).rows(), 7);
  // Frame 0 sees zero padding on its left.
  Matrix cols = im2col_time(x, 3, 2).value();
  EXPECT_EQ(cols(0, 0), 0.0);
  EXPECT_EQ(cols(0, 2), 1.0);
}

TEST(Ops, RowNormalizeZeroRowPassesNoGradient) {
  Tensor x = Tensor::from_matrix((Matrix(2, 2) << 0.0, 0.0, 3.0, 4.0).finished(), true);
  Tensor n = row_normalize(x, 1e-8);
  EXPECT_EQ(n.value().row(0).norm(), 0.0);
  EXPECT_NEAR(n.value().row(1).norm(), 1.0, 1e-15);
  Matrix g = gradient(sum(n), x);
  EXPECT_EQ(g.row(0).norm(), 0.0);
  Matrix gn = gradient(sum(row_l2norm(x)), x);
  EXPECT_EQ(gn.row(0).norm(), 0.0);
}

TEST(Ops, RowMaxTiesPickLowestIndex) {
  Tensor x = Tensor::from_matrix((Matrix(1, 3) << 0.4, 0.4, 0.2).finished(), true);
  Matrix g = gradient(sum(row_max(x)), x);
  EXPECT_EQ(g, (Matrix(1, 3) << 1.0, 0.0, 0.0).finished());
}

}  // namespace
}  // namespace ilkd
