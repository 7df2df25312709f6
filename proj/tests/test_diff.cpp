#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "dimekit/diff.hpp"
#include "test_util.hpp"

using namespace dimekit;
using namespace dimekit::diff;
using dimekit::testing::fd_gradient;
using dimekit::testing::random_matrix;
using dimekit::testing::rel_error;

namespace {

using UnaryOp = std::function<Tensor(const Tensor&)>;

/// Weighted sum so every output entry contributes a distinct amount.
Tensor reduce(const Tensor& t, const Matrix& weights) { return sum_all(mul(t, constant(weights))); }

void check_unary(const UnaryOp& op, const Matrix& x0, std::mt19937_64& rng, double tol = 1e-6) {
  const Matrix w = random_matrix(op(constant(x0)).rows(), op(constant(x0)).cols(), rng);
  const Tensor x = variable(x0);
  const Matrix g = grad(reduce(op(x), w), {x})[0].value();
  const Matrix fd = fd_gradient([&](const Matrix& v) { return reduce(op(constant(v)), w).item(); }, x0);
  EXPECT_LT(rel_error(g, fd), tol);
}

/// d/dx of sum(w * (d reduce(op(x)) / dx)^2): exercises every backward rule
/// under a second differentiation.
void check_second_order(const UnaryOp& op, const Matrix& x0, std::mt19937_64& rng, double tol = 1e-6) {
  const Matrix w = random_matrix(op(constant(x0)).rows(), op(constant(x0)).cols(), rng);
  auto inner = [&](const Tensor& x) {
    const Tensor g = grad(reduce(op(x), w), {x}, true)[0];
    return sum_all(mul(g, g));
  };
  const Tensor x = variable(x0);
  const Matrix g2 = grad(inner(x), {x})[0].value();
  const Matrix fd = fd_gradient([&](const Matrix& v) { return inner(variable(v)).item(); }, x0);
  EXPECT_LT(rel_error(g2, fd), tol);
}

}  // namespace

TEST(DiffPrimitives, SegmentSumIncludesEmptySegments) {
  Matrix v(3, 1);
  v << 1, 2, 3;
  const Tensor out = segment_sum(constant(v), make_index({0, 0, 1}), 3);
  ASSERT_EQ(out.rows(), 3);
  EXPECT_EQ(out.value()(0, 0), 3.0);
  EXPECT_EQ(out.value()(1, 0), 3.0);
  EXPECT_EQ(out.value()(2, 0), 0.0);
}

TEST(DiffPrimitives, HadamardWithOnesIsIdentity) {
  std::mt19937_64 rng(1);
  const Matrix x = random_matrix(4, 6, rng);
  EXPECT_EQ(mul(constant(x), constant(Matrix::Ones(4, 6))).value(), x);
}

TEST(DiffPrimitives, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(2);
  const Matrix a = random_matrix(7, 5, rng), b = random_matrix(5, 3, rng);
  Matrix expected = Matrix::Zero(7, 3);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 5; ++k) expected(i, j) += a(i, k) * b(k, j);
  EXPECT_LT((matmul(constant(a), constant(b)).value() - expected).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((matmul(constant(Matrix(a.transpose())), constant(b), true, false).value() - expected)
                .cwiseAbs()
                .maxCoeff(),
            1e-14);
  EXPECT_LT((matmul(constant(a), constant(Matrix(b.transpose())), false, true).value() - expected)
                .cwiseAbs()
                .maxCoeff(),
            1e-14);
}

TEST(DiffPrimitives, ContractViolations) {
  const Tensor a = variable(Matrix::Ones(2, 3));
  EXPECT_THROW(add(a, constant(Matrix::Ones(3, 2))), ContractViolation);
  EXPECT_THROW(matmul(a, a), ContractViolation);
  EXPECT_THROW(segment_sum(a, make_index({0, 5}), 2), ContractViolation);
  EXPECT_THROW(gather_rows(a, make_index({2})), ContractViolation);
  EXPECT_THROW(grad(a, {a}), ContractViolation);                             // non-scalar output
  EXPECT_THROW(grad(sum_all(a), {constant(Matrix::Ones(1, 1))}), ContractViolation);  // not on record
  EXPECT_THROW(silu_derivative(a, 4), ContractViolation);
}

TEST(DiffGrad, SquareAtThree) {
  const Tensor x = variable(Matrix::Constant(1, 1, 3.0));
  EXPECT_DOUBLE_EQ(grad(mul(x, x), {x})[0].item(), 6.0);
}

TEST(DiffGrad, SecondDerivativeOfSine) {
  for (double v : {-2.0, 0.3, 1.7}) {
    const Tensor x = variable(Matrix::Constant(1, 1, v));
    const Tensor g = grad(sin(x), {x}, true)[0];
    EXPECT_NEAR(grad(g, {x})[0].item(), -std::sin(v), 1e-10);
  }
}

TEST(DiffGrad, CompositeMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Matrix x0 = random_matrix(6, 4, rng);
  const Matrix w = random_matrix(4, 5, rng);
  const auto ids = make_index({0, 2, 2, 1, 0, 2});
  auto f = [&](const Tensor& x) { return sum_all(silu(segment_sum(silu(matmul(x, constant(w))), ids, 3))); };
  const Tensor x = variable(x0);
  const Matrix g = grad(f(x), {x})[0].value();
  const Matrix fd = fd_gradient([&](const Matrix& v) { return f(constant(v)).item(); }, x0);
  EXPECT_LT(rel_error(g, fd), 1e-6);
}

TEST(DiffGrad, EveryPrimitiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const Matrix x0 = random_matrix(5, 4, rng);
  const Matrix pos = random_matrix(5, 4, rng, 0.5, 2.0);
  const Matrix other = random_matrix(5, 4, rng);
  const Matrix row = random_matrix(1, 4, rng);
  const Matrix col = random_matrix(5, 1, rng);
  const Matrix rhs = random_matrix(4, 3, rng);
  const auto idx = make_index({4, 0, 0, 2, 1, 3, 3});
  const auto seg = make_index({1, 1, 0, 3, 1});

  const std::vector<std::pair<const char*, UnaryOp>> ops = {
      {"matmul_lhs", [&](const Tensor& x) { return matmul(x, constant(rhs)); }},
      {"matmul_rhs", [&](const Tensor& x) { return matmul(constant(Matrix(rhs.transpose())), x, false, true); }},
      {"matmul_tt", [&](const Tensor& x) { return matmul(x, constant(Matrix(other.transpose())), true, true); }},
      {"add", [&](const Tensor& x) { return add(x, constant(other)); }},
      {"sub", [&](const Tensor& x) { return sub(constant(other), x); }},
      {"hadamard", [&](const Tensor& x) { return mul(x, x); }},
      {"scale", [&](const Tensor& x) { return scale(x, -2.5); }},
      {"add_scalar", [&](const Tensor& x) { return mul(add_scalar(x, 0.7), x); }},
      {"add_row", [&](const Tensor& x) { return mul(add_row(x, constant(row)), x); }},
      {"mul_row", [&](const Tensor& x) { return mul_row(x, slice_rows(x, 2, 1)); }},
      {"mul_col", [&](const Tensor& x) { return mul_col(x, slice_cols(x, 1, 1)); }},
      {"sum_rows", [&](const Tensor& x) { return mul(sum_rows(x), sum_rows(x)); }},
      {"sum_cols", [&](const Tensor& x) { return mul(sum_cols(x), sum_cols(x)); }},
      {"broadcast", [&](const Tensor& x) { return mul(broadcast_rows(sum_rows(x), 3), broadcast_rows(sum_rows(x), 3)); }},
      {"broadcast_cols", [&](const Tensor& x) { return sin(broadcast_cols(sum_cols(x), 2)); }},
      {"expand", [&](const Tensor& x) { return mul(expand(sum_all(x), 2, 2), expand(sum_all(x), 2, 2)); }},
      {"gather", [&](const Tensor& x) { return sin(gather_rows(x, idx)); }},
      {"segment_sum", [&](const Tensor& x) { return sin(segment_sum(x, seg, 4)); }},
      {"concat", [&](const Tensor& x) { return sin(concat_cols({x, constant(col), mul(x, x)})); }},
      {"slice_pad", [&](const Tensor& x) { return sin(pad_cols(slice_cols(x, 1, 2), 3, 6)); }},
      {"slice_pad_rows", [&](const Tensor& x) { return sin(pad_rows(slice_rows(x, 1, 3), 2, 7)); }},
      {"sin", [&](const Tensor& x) { return sin(x); }},
      {"cos", [&](const Tensor& x) { return cos(x); }},
      {"exp", [&](const Tensor& x) { return exp(x); }},
      {"sigmoid", [&](const Tensor& x) { return sigmoid(x); }},
      {"softplus", [&](const Tensor& x) { return softplus(x); }},
      {"silu", [&](const Tensor& x) { return silu(x); }},
      {"silu_d1", [&](const Tensor& x) { return silu_derivative(x, 1); }},
      {"silu_d2", [&](const Tensor& x) { return silu_derivative(x, 2); }},
      {"powi", [&](const Tensor& x) { return powi(x, 3); }},
      {"abs", [&](const Tensor& x) { return abs(x); }},
  };
  for (const auto& [name, op] : ops) {
    SCOPED_TRACE(name);
    check_unary(op, x0, rng);
    // abs has a kink; silu_d2 would need a fourth derivative
    if (std::string(name) != "abs" && std::string(name) != "silu_d2") check_second_order(op, x0, rng);
  }
  const std::vector<std::pair<const char*, UnaryOp>> positive_ops = {
      {"log", [&](const Tensor& x) { return log(x); }},
      {"sqrt", [&](const Tensor& x) { return sqrt(x); }},
      {"reciprocal", [&](const Tensor& x) { return reciprocal(x); }},
  };
  for (const auto& [name, op] : positive_ops) {
    SCOPED_TRACE(name);
    check_unary(op, pos, rng);
    check_second_order(op, pos, rng);
  }
}

TEST(DiffGrad, SiluClosedFormDerivatives) {
  // Finite differences of each closed-form order against the next one.
  Matrix x(1, 7);
  x << -6, -2, -0.5, 0, 0.4, 1.5, 5;
  for (int k = 0; k < 3; ++k) {
    for (Eigen::Index i = 0; i < x.cols(); ++i) {
      const double h = 1e-5;
      Matrix p = x, m = x;
      p(0, i) += h;
      m(0, i) -= h;
      const double fd = (silu_derivative(constant(p), k).value()(0, i) - silu_derivative(constant(m), k).value()(0, i)) /
                        (2 * h);
      EXPECT_NEAR(silu_derivative(constant(x), k + 1).value()(0, i), fd, 1e-8);
    }
  }
}

TEST(DiffGrad, Linearity) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3, 3);
  const Matrix x0 = random_matrix(4, 3, rng);
  const Matrix w = random_matrix(3, 2, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const double a = u(rng), b = u(rng);
    const Tensor x = variable(x0);
    auto f = [&](const Tensor& v) { return sum_all(silu(matmul(v, constant(w)))); };
    auto g = [&](const Tensor& v) { return sum_all(mul(sin(v), v)); };
    const Matrix combined = grad(add(scale(f(x), a), scale(g(x), b)), {x})[0].value();
    const Matrix separate = a * grad(f(x), {x})[0].value() + b * grad(g(x), {x})[0].value();
    EXPECT_LT((combined - separate).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DiffGrad, SegmentSumScattersUpstreamGradient) {
  std::mt19937_64 rng(6);
  const Tensor x = variable(random_matrix(5, 2, rng));
  Matrix w(3, 2);
  w << 1, 2, 3, 4, 5, 6;
  const Tensor y = sum_all(mul(segment_sum(x, make_index({2, 0, 2, 0, 0}), 3), constant(w)));
  const Matrix g = grad(y, {x})[0].value();
  EXPECT_EQ(g.row(0), w.row(2));
  EXPECT_EQ(g.row(1), w.row(0));
  EXPECT_EQ(g.row(2), w.row(2));
  EXPECT_EQ(g.row(3), w.row(0));
  EXPECT_EQ(g.row(4), w.row(0));
  // segment 1 is empty: nothing flows from w.row(1)
}

TEST(DiffGrad, SecondOrderPolynomialClosedForm) {
  // g(x) = x^3 - 2x^2 + x, f(x) = g'(x)^2 = (3x^2 - 4x + 1)^2, f' = 2 g' (6x - 4)
  for (double v : {-1.3, 0.0, 0.4, 2.2}) {
    const Tensor x = variable(Matrix::Constant(1, 1, v));
    const Tensor g = sub(powi(x, 3), scale(powi(x, 2), 2.0)) + x;
    const Tensor dg = grad(g, {x}, true)[0];
    const double df = grad(mul(dg, dg), {x})[0].item();
    const double gp = 3 * v * v - 4 * v + 1;
    EXPECT_NEAR(df, 2 * gp * (6 * v - 4), 1e-8);
  }
}

TEST(DiffGrad, UnusedInputGetsZeros) {
  const Tensor x = variable(Matrix::Ones(2, 2));
  const Tensor unused = variable(Matrix::Ones(3, 1));
  const auto g = grad(sum_all(x), {x, unused});
  EXPECT_EQ(g[1].value(), Matrix::Zero(3, 1));
}

TEST(DiffGrad, NoRecordingWhenDisabled) {
  const Tensor x = variable(Matrix::Ones(2, 2));
  GradModeGuard off(false);
  EXPECT_FALSE(mul(x, x).requires_grad());
}
