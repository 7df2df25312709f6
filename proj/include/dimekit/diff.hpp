#pragma once

// Reverse-mode differentiation over dense row-major 2D tensors.
//
// Every primitive records its inputs and a backward rule. Backward rules are
// themselves written in terms of recorded primitives, so when `grad` is asked
// for `create_graph = true` the adjoint computation lands on the record and can
// be differentiated again (reverse-over-reverse). Training on forces relies on
// this: forces are a first gradient, the force loss gradient is a second one.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dimekit/errors.hpp"

namespace dimekit::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexList = std::shared_ptr<const std::vector<int>>;

inline IndexList make_index(std::vector<int> ids) {
  return std::make_shared<const std::vector<int>>(std::move(ids));
}

class Tensor;
struct Node;

/// Maps the upstream gradient to one gradient per input. Entries whose
/// `needed` flag is false may be left empty.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad, const std::vector<bool>& needed)>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  /// Value of a 1x1 tensor.
  double item() const;
  Node* node() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Matrix value;
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  const char* op = "leaf";
};

inline const Matrix& Tensor::value() const {
  expects(defined(), "tensor: access to undefined tensor");
  return node_->value;
}
inline bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
inline double Tensor::item() const {
  expects(rows() == 1 && cols() == 1, "tensor: item() on non-scalar");
  return value()(0, 0);
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() noexcept { return detail::grad_enabled; }

/// Scoped override of recording. `GradModeGuard g(false)` turns every op in
/// scope into a constant.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_enabled) { detail::grad_enabled = enabled; }
  ~GradModeGuard() { detail::grad_enabled = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

inline Tensor constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Tensor(std::move(node));
}

/// Leaf that gradients can be taken with respect to.
inline Tensor variable(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Tensor(std::move(node));
}

inline Tensor scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

inline Tensor zeros(Eigen::Index rows, Eigen::Index cols) { return constant(Matrix::Zero(rows, cols)); }

/// Builds an op result. Extension point for custom primitives: the inputs and
/// backward rule are only kept when recording is on and some input needs grad.
inline Tensor make_op(Matrix value, std::vector<Tensor> inputs, BackwardFn backward, const char* op) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (detail::grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
      node->op = op;
    }
  }
  return Tensor(std::move(node));
}

namespace detail {
inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractViolation(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + ")");
}
}  // namespace detail

// ---- forward declarations (backward rules reference each other) ----
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor mul_row(const Tensor& a, const Tensor& row);
Tensor mul_col(const Tensor& a, const Tensor& col);
Tensor sum_rows(const Tensor& a);
Tensor sum_cols(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor broadcast_rows(const Tensor& row, Eigen::Index rows);
Tensor broadcast_cols(const Tensor& col, Eigen::Index cols);
Tensor expand(const Tensor& s, Eigen::Index rows, Eigen::Index cols);
Tensor gather_rows(const Tensor& a, const IndexList& index);
Tensor segment_sum(const Tensor& a, const IndexList& segment_ids, Eigen::Index num_segments);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, Eigen::Index offset, Eigen::Index width);
Tensor pad_cols(const Tensor& a, Eigen::Index offset, Eigen::Index total);
Tensor slice_rows(const Tensor& a, Eigen::Index offset, Eigen::Index height);
Tensor pad_rows(const Tensor& a, Eigen::Index offset, Eigen::Index total);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor powi(const Tensor& a, int n);
Tensor abs(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor silu_derivative(const Tensor& a, int order);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  const auto inner_a = ta ? A.rows() : A.cols();
  const auto inner_b = tb ? B.cols() : B.rows();
  if (inner_a != inner_b) throw ContractViolation("matmul: inner dimensions differ");
  Matrix out;
  if (!ta && !tb)
    out.noalias() = A * B;
  else if (ta && !tb)
    out.noalias() = A.transpose() * B;
  else if (!ta && tb)
    out.noalias() = A * B.transpose();
  else
    out.noalias() = A.transpose() * B.transpose();
  return make_op(
      std::move(out), {a, b},
      [a, b, ta, tb](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> r(2);
        if (need[0]) r[0] = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
        if (need[1]) r[1] = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
        return r;
      },
      "matmul");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  return make_op(
      a.value() + b.value(), {a, b}, [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{g, g}; },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  return make_op(
      a.value() - b.value(), {a, b},
      [](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> r{g, Tensor()};
        if (need[1]) r[1] = scale(g, -1.0);
        return r;
      },
      "sub");
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_op(
      std::move(out), {a, b},
      [a, b](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> r(2);
        if (need[0]) r[0] = mul(g, b);
        if (need[1]) r[1] = mul(g, a);
        return r;
      },
      "hadamard");
}

inline Tensor scale(const Tensor& a, double factor) {
  return make_op(
      a.value() * factor, {a},
      [factor](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{scale(g, factor)}; }, "scale");
}

inline Tensor add_scalar(const Tensor& a, double offset) {
  return make_op(
      (a.value().array() + offset).matrix(), {a},
      [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{g}; }, "add_scalar");
}

inline Tensor add_row(const Tensor& a, const Tensor& row) {
  expects(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1 x cols");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_op(
      std::move(out), {a, row},
      [](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> r{g, Tensor()};
        if (need[1]) r[1] = sum_rows(g);
        return r;
      },
      "add_row");
}

/// Scales column c of `a` by row(0, c).
inline Tensor mul_row(const Tensor& a, const Tensor& row) {
  expects(row.rows() == 1 && row.cols() == a.cols(), "mul_row: row must be 1 x cols");
  Matrix out = a.value();
  out.array().rowwise() *= row.value().row(0).array();
  return make_op(
      std::move(out), {a, row},
      [a, row](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> r(2);
        if (need[0]) r[0] = mul_row(g, row);
        if (need[1]) r[1] = sum_rows(mul(g, a));
        return r;
      },
      "mul_row");
}

/// Scales row r of `a` by col(r, 0).
inline Tensor mul_col(const Tensor& a, const Tensor& col) {
  expects(col.cols() == 1 && col.rows() == a.rows(), "mul_col: col must be rows x 1");
  Matrix out = a.value();
  out.array().colwise() *= col.value().col(0).array();
  return make_op(
      std::move(out), {a, col},
      [a, col](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> r(2);
        if (need[0]) r[0] = mul_col(g, col);
        if (need[1]) r[1] = sum_cols(mul(g, a));
        return r;
      },
      "mul_col");
}

// ---- reductions and broadcasts ----

inline Tensor sum_rows(const Tensor& a) {
  const Eigen::Index n = a.rows();
  Matrix out = Matrix::Zero(1, a.cols());
  for (Eigen::Index r = 0; r < n; ++r) out.row(0) += a.value().row(r);
  return make_op(
      std::move(out), {a},
      [n](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{broadcast_rows(g, n)}; },
      "sum_rows");
}

inline Tensor sum_cols(const Tensor& a) {
  const Eigen::Index m = a.cols();
  Matrix out = a.value().rowwise().sum();
  return make_op(
      std::move(out), {a},
      [m](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{broadcast_cols(g, m)}; },
      "sum_cols");
}

inline Tensor sum_all(const Tensor& a) {
  const Eigen::Index n = a.rows(), m = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op(
      std::move(out), {a},
      [n, m](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{expand(g, n, m)}; }, "sum_all");
}

inline Tensor broadcast_rows(const Tensor& row, Eigen::Index rows) {
  expects(row.rows() == 1, "broadcast_rows: expects a single row");
  Matrix out = row.value().replicate(rows, 1);
  return make_op(
      std::move(out), {row}, [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{sum_rows(g)}; },
      "broadcast_rows");
}

inline Tensor broadcast_cols(const Tensor& col, Eigen::Index cols) {
  expects(col.cols() == 1, "broadcast_cols: expects a single column");
  Matrix out = col.value().replicate(1, cols);
  return make_op(
      std::move(out), {col}, [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{sum_cols(g)}; },
      "broadcast_cols");
}

inline Tensor expand(const Tensor& s, Eigen::Index rows, Eigen::Index cols) {
  expects(s.rows() == 1 && s.cols() == 1, "expand: expects a 1x1 tensor");
  Matrix out = Matrix::Constant(rows, cols, s.value()(0, 0));
  return make_op(
      std::move(out), {s}, [](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{sum_all(g)}; },
      "expand");
}

// ---- indexing ----

inline Tensor gather_rows(const Tensor& a, const IndexList& index) {
  const Eigen::Index n = a.rows();
  const auto& idx = *index;
  Matrix out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= n) throw ContractViolation("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = a.value().row(idx[r]);
  }
  return make_op(
      std::move(out), {a},
      [index, n](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{segment_sum(g, index, n)}; },
      "gather_rows");
}

/// Row r of the result is the sum of all rows of `a` whose segment id is r,
/// accumulated in ascending row order. Empty segments give zero rows.
inline Tensor segment_sum(const Tensor& a, const IndexList& segment_ids, Eigen::Index num_segments) {
  const auto& ids = *segment_ids;
  if (static_cast<Eigen::Index>(ids.size()) != a.rows())
    throw ContractViolation("segment_sum: one segment id per row required");
  Matrix out = Matrix::Zero(num_segments, a.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= num_segments) throw ContractViolation("segment_sum: segment id out of range");
    out.row(ids[r]) += a.value().row(static_cast<Eigen::Index>(r));
  }
  return make_op(
      std::move(out), {a},
      [segment_ids](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{gather_rows(g, segment_ids)};
      },
      "segment_sum");
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  expects(!parts.empty(), "concat_cols: nothing to concatenate");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ContractViolation("concat_cols: row counts differ");
    total += p.cols();
  }
  Matrix out(rows, total);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) widths.push_back(p.cols());
  return make_op(
      std::move(out), parts,
      [offsets, widths](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> r(offsets.size());
        for (std::size_t i = 0; i < offsets.size(); ++i)
          if (need[i]) r[i] = slice_cols(g, offsets[i], widths[i]);
        return r;
      },
      "concat_cols");
}

inline Tensor slice_cols(const Tensor& a, Eigen::Index offset, Eigen::Index width) {
  const Eigen::Index total = a.cols();
  expects(offset >= 0 && width >= 0 && offset + width <= total, "slice_cols: range out of bounds");
  Matrix out = a.value().middleCols(offset, width);
  return make_op(
      std::move(out), {a},
      [offset, total](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{pad_cols(g, offset, total)};
      },
      "slice_cols");
}

inline Tensor pad_cols(const Tensor& a, Eigen::Index offset, Eigen::Index total) {
  const Eigen::Index width = a.cols();
  expects(offset >= 0 && offset + width <= total, "pad_cols: range out of bounds");
  Matrix out = Matrix::Zero(a.rows(), total);
  out.middleCols(offset, width) = a.value();
  return make_op(
      std::move(out), {a},
      [offset, width](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{slice_cols(g, offset, width)};
      },
      "pad_cols");
}

inline Tensor slice_rows(const Tensor& a, Eigen::Index offset, Eigen::Index height) {
  const Eigen::Index total = a.rows();
  expects(offset >= 0 && height >= 0 && offset + height <= total, "slice_rows: range out of bounds");
  Matrix out = a.value().middleRows(offset, height);
  return make_op(
      std::move(out), {a},
      [offset, total](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{pad_rows(g, offset, total)};
      },
      "slice_rows");
}

inline Tensor pad_rows(const Tensor& a, Eigen::Index offset, Eigen::Index total) {
  const Eigen::Index height = a.rows();
  expects(offset >= 0 && offset + height <= total, "pad_rows: range out of bounds");
  Matrix out = Matrix::Zero(total, a.cols());
  out.middleRows(offset, height) = a.value();
  return make_op(
      std::move(out), {a},
      [offset, height](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{slice_rows(g, offset, height)};
      },
      "pad_rows");
}

// ---- elementwise functions ----

namespace detail {
template <class F>
Matrix map(const Matrix& x, F f) {
  Matrix out(x.rows(), x.cols());
  const double* src = x.data();
  double* dst = out.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) dst[i] = f(src[i]);
  return out;
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// k-th derivative of x * logistic(x), k in [0, 3].
inline double silu_kth(double x, int k) {
  const double s = logistic(x);
  const double q = s * (1.0 - s);
  switch (k) {
    case 0:
      return x * s;
    case 1:
      return s + x * q;
    case 2:
      return q * (2.0 + x * (1.0 - 2.0 * s));
    case 3:
      return q * ((1.0 - 2.0 * s) * (3.0 + x * (1.0 - 2.0 * s)) - 2.0 * x * q);
    default:
      throw ContractViolation("silu: derivative order above 3 is not available");
  }
}
}  // namespace detail

inline Tensor sin(const Tensor& a) {
  return make_op(
      detail::map(a.value(), [](double x) { return std::sin(x); }), {a},
      [a](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{mul(g, cos(a))}; }, "sin");
}

inline Tensor cos(const Tensor& a) {
  return make_op(
      detail::map(a.value(), [](double x) { return std::cos(x); }), {a},
      [a](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{-mul(g, sin(a))}; }, "cos");
}

inline Tensor exp(const Tensor& a) {
  return make_op(
      detail::map(a.value(), [](double x) { return std::exp(x); }), {a},
      [a](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{mul(g, exp(a))}; }, "exp");
}

inline Tensor log(const Tensor& a) {
  return make_op(
      detail::map(a.value(), [](double x) { return std::log(x); }), {a},
      [a](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{mul(g, reciprocal(a))}; }, "log");
}

inline Tensor sqrt(const Tensor& a) {
  return make_op(
      detail::map(a.value(), [](double x) { return std::sqrt(x); }), {a},
      [a](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{scale(mul(g, reciprocal(sqrt(a))), 0.5)};
      },
      "sqrt");
}

inline Tensor reciprocal(const Tensor& a) {
  return make_op(
      detail::map(a.value(), [](double x) { return 1.0 / x; }), {a},
      [a](const Tensor& g, const std::vector<bool>&) {
        const Tensor r = reciprocal(a);
        return std::vector<Tensor>{-mul(g, mul(r, r))};
      },
      "reciprocal");
}

/// x^n for integer n >= 0.
inline Tensor powi(const Tensor& a, int n) {
  expects(n >= 0, "powi: exponent must be non-negative");
  return make_op(
      detail::map(a.value(), [n](double x) { return n == 0 ? 1.0 : std::pow(x, n); }), {a},
      [a, n](const Tensor& g, const std::vector<bool>&) {
        if (n == 0) return std::vector<Tensor>{zeros(g.rows(), g.cols())};
        if (n == 1) return std::vector<Tensor>{g};
        return std::vector<Tensor>{scale(mul(g, powi(a, n - 1)), static_cast<double>(n))};
      },
      "powi");
}

/// |x| with derivative sign(x) (0 at the origin).
inline Tensor abs(const Tensor& a) {
  return make_op(
      a.value().cwiseAbs(), {a},
      [a](const Tensor& g, const std::vector<bool>&) {
        Matrix sign = detail::map(a.value(), [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
        return std::vector<Tensor>{mul(g, constant(std::move(sign)))};
      },
      "abs");
}

inline Tensor sigmoid(const Tensor& a) {
  return make_op(
      detail::map(a.value(), detail::logistic), {a},
      [a](const Tensor& g, const std::vector<bool>&) {
        const Tensor s = sigmoid(a);
        return std::vector<Tensor>{mul(g, s - mul(s, s))};
      },
      "sigmoid");
}

/// ln(1 + e^x), evaluated without overflow.
inline Tensor softplus(const Tensor& a) {
  return make_op(
      detail::map(a.value(), [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }),
      {a}, [a](const Tensor& g, const std::vector<bool>&) { return std::vector<Tensor>{mul(g, sigmoid(a))}; },
      "softplus");
}

/// k-th derivative of the self-gated activation x * sigmoid(x). Orders up to
/// 3 are evaluated in closed form, enough for forces (1) and force training (2).
inline Tensor silu_derivative(const Tensor& a, int order) {
  expects(order >= 0 && order <= 3, "silu: derivative order above 3 is not available");
  return make_op(
      detail::map(a.value(), [order](double x) { return detail::silu_kth(x, order); }), {a},
      [a, order](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, silu_derivative(a, order + 1))};
      },
      "silu");
}

inline Tensor silu(const Tensor& a) { return silu_derivative(a, 0); }

// ---- differentiation ----

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned tensors are themselves on the record and
/// can be fed into further ops and a second `grad`. Inputs that require grad
/// but do not influence `output` receive zeros.
inline std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs, bool create_graph = false) {
  expects(output.defined() && output.rows() == 1 && output.cols() == 1, "grad: output must be a scalar tensor");
  for (const auto& in : inputs) expects(in.requires_grad(), "grad: input is not on the record");

  std::vector<Tensor> result(inputs.size());
  if (!output.requires_grad()) {
    for (std::size_t i = 0; i < inputs.size(); ++i) result[i] = zeros(inputs[i].rows(), inputs[i].cols());
    return result;
  }

  // Post-order DFS: every node appears after all of its recorded inputs.
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> visited;
  {
    std::vector<std::pair<Node*, std::size_t>> stack{{output.node(), 0}};
    visited[output.node()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].node();
        if (child->requires_grad && !visited[child]) {
          visited[child] = true;
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  // Only propagate through nodes that lead to a requested input.
  std::unordered_map<Node*, bool> leads_to_input;
  for (const auto& in : inputs) leads_to_input[in.node()] = true;
  for (Node* node : order) {
    if (leads_to_input[node]) continue;
    for (const auto& in : node->inputs)
      if (in.requires_grad() && leads_to_input[in.node()]) {
        leads_to_input[node] = true;
        break;
      }
  }

  std::unordered_map<Node*, bool> is_target;
  for (const auto& in : inputs) is_target[in.node()] = true;

  GradModeGuard mode(create_graph);
  std::unordered_map<Node*, Tensor> grads;
  grads[output.node()] = scalar(1.0);
  std::unordered_map<Node*, Tensor> collected;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto g_it = grads.find(node);
    if (g_it == grads.end()) continue;
    Tensor g = std::move(g_it->second);
    grads.erase(g_it);
    if (is_target[node]) collected[node] = g;
    if (!node->backward || !leads_to_input[node]) continue;
    std::vector<bool> need(node->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < need.size(); ++i) {
      const auto& in = node->inputs[i];
      need[i] = in.requires_grad() && leads_to_input[in.node()];
      any = any || need[i];
    }
    if (!any) continue;
    std::vector<Tensor> input_grads = node->backward(g, need);
    for (std::size_t i = 0; i < need.size(); ++i) {
      if (!need[i] || !input_grads[i].defined()) continue;
      Node* in = node->inputs[i].node();
      auto existing = grads.find(in);
      if (existing == grads.end())
        grads.emplace(in, std::move(input_grads[i]));
      else
        existing->second = add(existing->second, input_grads[i]);
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto c = collected.find(inputs[i].node());
    result[i] = c != collected.end() ? c->second : zeros(inputs[i].rows(), inputs[i].cols());
  }
  return result;
}

}  // namespace dimekit::diff
