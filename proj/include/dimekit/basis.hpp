#pragma once

// Radial sine-Bessel basis per edge and spherical 2D Fourier-Bessel basis per
// triplet, both damped by a polynomial envelope that vanishes with its first
// derivative at the cutoff.

#include <cmath>
#include <numbers>
#include <vector>

#include "dimekit/diff.hpp"
#include "dimekit/errors.hpp"

namespace dimekit {

struct BasisConfig {
  int num_radial = 6;
  int num_spherical = 7;
  double cutoff = 5.0;
  int envelope_exponent = 6;

  void validate() const {
    if (num_radial < 1 || num_spherical < 1 || !(cutoff > 0.0) || envelope_exponent < 1)
      throw InputError("basis config: num_radial, num_spherical, envelope_exponent must be >= 1 and cutoff > 0");
  }
  int spherical_size() const { return num_radial * num_spherical; }
};

/// u(t) = 1 - (p+1)(p+2)/2 t^p + p(p+2) t^(p+1) - p(p+1)/2 t^(p+2) for t < 1, else 0.
inline double envelope(double t, int p) {
  if (t >= 1.0) return 0.0;
  const double a = -(p + 1.0) * (p + 2.0) / 2.0;
  const double b = p * (p + 2.0);
  const double c = -p * (p + 1.0) / 2.0;
  const double tp = std::pow(t, p);
  return 1.0 + tp * (a + t * (b + t * c));
}

/// Spherical Bessel function of the first kind. Power series below x = l + 1,
/// upward recurrence from j_0 and j_1 above.
inline double spherical_bessel_j(int l, double x) {
  expects(l >= 0, "spherical_bessel_j: order must be non-negative");
  if (x < static_cast<double>(l) + 1.0) {
    double lead = 1.0;
    for (int k = 1; k <= l; ++k) lead *= x / (2.0 * k + 1.0);
    const double y = -0.5 * x * x;
    double term = 1.0, sum = 1.0;
    for (int k = 1; k < 200; ++k) {
      term *= y / (k * (2.0 * l + 2.0 * k + 1.0));
      sum += term;
      if (std::abs(term) < 1e-17 * std::abs(sum)) break;
    }
    return lead * sum;
  }
  const double s = std::sin(x), c = std::cos(x);
  double jm = s / x;
  if (l == 0) return jm;
  double j = s / (x * x) - c / x;
  for (int k = 1; k < l; ++k) {
    const double next = (2.0 * k + 1.0) / x * j - jm;
    jm = j;
    j = next;
  }
  return j;
}

inline double legendre(int l, double x) {
  if (l == 0) return 1.0;
  double pm = 1.0, p = x;
  for (int k = 1; k < l; ++k) {
    const double next = ((2.0 * k + 1.0) * x * p - k * pm) / (k + 1.0);
    pm = p;
    p = next;
  }
  return p;
}

/// First `count` positive roots of j_l, strictly increasing. Roots of j_l are
/// bracketed by consecutive roots of j_{l-1}, starting from z_{0,n} = n*pi.
inline std::vector<double> bessel_roots(int l, int count) {
  expects(l >= 0 && count >= 1, "bessel_roots: need l >= 0 and count >= 1");
  std::vector<double> roots(static_cast<std::size_t>(count + l));
  for (std::size_t n = 0; n < roots.size(); ++n) roots[n] = (n + 1.0) * std::numbers::pi;
  for (int order = 1; order <= l; ++order) {
    std::vector<double> next(roots.size() - 1);
    for (std::size_t n = 0; n + 1 < roots.size(); ++n) {
      double lo = roots[n], hi = roots[n + 1];
      double flo = spherical_bessel_j(order, lo);
      while (hi - lo > 1e-13) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        const double fmid = spherical_bessel_j(order, mid);
        if ((fmid < 0) == (flo < 0)) {
          lo = mid;
          flo = fmid;
        } else {
          hi = mid;
        }
      }
      next[n] = 0.5 * (lo + hi);
    }
    roots = std::move(next);
  }
  roots.resize(static_cast<std::size_t>(count));
  return roots;
}

/// Root and normalizer tables for one BasisConfig; immutable after construction.
class BasisTables {
 public:
  explicit BasisTables(const BasisConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const double c = cfg.cutoff;
    for (int l = 0; l < cfg.num_spherical; ++l) {
      const auto z = bessel_roots(l, cfg.num_radial);
      for (int n = 0; n < cfg.num_radial; ++n) {
        roots_.push_back(z[n]);
        // unit L2 norm of j_l(z r / c) Y_l on the ball of radius c
        normalizers_.push_back(std::sqrt(2.0 / (c * c * c)) / std::abs(spherical_bessel_j(l + 1, z[n])));
      }
    }
  }

  const BasisConfig& config() const { return cfg_; }
  double root(int l, int n) const { return roots_[index(l, n)]; }
  double normalizer(int l, int n) const { return normalizers_[index(l, n)]; }
  std::size_t index(int l, int n) const { return static_cast<std::size_t>(l * cfg_.num_radial + n); }

 private:
  BasisConfig cfg_;
  std::vector<double> roots_;
  std::vector<double> normalizers_;
};

/// Order-zero spherical harmonic as a function of the polar angle.
inline double spherical_harmonic_m0(int l, double alpha) {
  return std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi)) * legendre(l, std::cos(alpha));
}

inline std::vector<double> radial_basis(double d, const BasisConfig& cfg) {
  if (!(d > 0.0)) throw DegenerateGeometryError("radial_basis: distance must be positive");
  std::vector<double> out(static_cast<std::size_t>(cfg.num_radial), 0.0);
  const double c = cfg.cutoff;
  if (d >= c) return out;
  const double u = envelope(d / c, cfg.envelope_exponent);
  const double pref = std::sqrt(2.0 / c);
  for (int n = 1; n <= cfg.num_radial; ++n)
    out[n - 1] = pref * std::sin(n * std::numbers::pi * d / c) / d * u;
  return out;
}

/// Entry l * num_radial + n is N_ln j_l(z_ln d / c) Y_l(alpha) u(d / c).
inline std::vector<double> spherical_basis(double d, double alpha, const BasisTables& tables) {
  if (!(d > 0.0)) throw DegenerateGeometryError("spherical_basis: distance must be positive");
  const auto& cfg = tables.config();
  std::vector<double> out(static_cast<std::size_t>(cfg.spherical_size()), 0.0);
  const double c = cfg.cutoff;
  if (d >= c) return out;
  const double u = envelope(d / c, cfg.envelope_exponent);
  for (int l = 0; l < cfg.num_spherical; ++l) {
    const double y = spherical_harmonic_m0(l, alpha);
    for (int n = 0; n < cfg.num_radial; ++n)
      out[tables.index(l, n)] =
          tables.normalizer(l, n) * spherical_bessel_j(l, tables.root(l, n) * d / c) * y * u;
  }
  return out;
}

// ---- differentiable counterparts used by the model ----

namespace basis_ops {

using diff::Matrix;
using diff::Tensor;

/// Elementwise j_{l_c}(x) where column c uses order orders[c]. The derivative
/// j_l' = (l / x) j_l - j_{l+1} keeps the op closed under differentiation.
inline Tensor spherical_bessel(const Tensor& x, std::vector<int> orders) {
  expects(static_cast<Eigen::Index>(orders.size()) == x.cols(), "spherical_bessel: one order per column");
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = spherical_bessel_j(orders[c], x.value()(r, c));
  return diff::make_op(
      std::move(out), {x},
      [x, orders](const Tensor& g, const std::vector<bool>&) {
        Matrix lrow(1, x.cols());
        std::vector<int> up(orders);
        for (std::size_t c = 0; c < orders.size(); ++c) {
          lrow(0, static_cast<Eigen::Index>(c)) = orders[c];
          ++up[c];
        }
        const Tensor d = diff::mul_row(diff::mul(diff::reciprocal(x), spherical_bessel(x, orders)),
                                       diff::constant(std::move(lrow))) -
                         spherical_bessel(x, std::move(up));
        return std::vector<Tensor>{diff::mul(g, d)};
      },
      "spherical_bessel");
}

/// Envelope of a column of scaled distances t = d / c.
inline Tensor envelope(const Tensor& t, int p) {
  const double a = -(p + 1.0) * (p + 2.0) / 2.0;
  const double b = p * (p + 2.0);
  const double c = -p * (p + 1.0) / 2.0;
  Tensor u = diff::add_scalar(diff::scale(diff::powi(t, p), a) + diff::scale(diff::powi(t, p + 1), b) +
                                  diff::scale(diff::powi(t, p + 2), c),
                              1.0);
  Matrix inside = (t.value().array() < 1.0).cast<double>().matrix();
  return diff::mul(u, diff::constant(std::move(inside)));
}

/// E x 1 distances -> E x num_radial.
inline Tensor radial_basis(const Tensor& d, const BasisConfig& cfg) {
  const double c = cfg.cutoff;
  Matrix freq(1, cfg.num_radial);
  for (int n = 0; n < cfg.num_radial; ++n) freq(0, n) = (n + 1) * std::numbers::pi / c;
  Tensor s = diff::sin(diff::matmul(d, diff::constant(std::move(freq))));
  Tensor scaled = diff::mul_col(s, diff::scale(diff::reciprocal(d), std::sqrt(2.0 / c)));
  return diff::mul_col(scaled, envelope(diff::scale(d, 1.0 / c), cfg.envelope_exponent));
}

/// T x 1 distances and T x 1 cos(alpha) -> T x (num_spherical * num_radial).
/// Works with cos(alpha) directly so collinear triplets stay differentiable.
inline Tensor spherical_basis(const Tensor& d, const Tensor& cos_alpha, const BasisTables& tables) {
  const auto& cfg = tables.config();
  const int L = cfg.num_spherical, N = cfg.num_radial, LN = L * N;
  const double c = cfg.cutoff;
  Matrix zrow(1, LN), norm_row(1, LN), select = Matrix::Zero(L, LN);
  std::vector<int> orders(static_cast<std::size_t>(LN));
  for (int l = 0; l < L; ++l)
    for (int n = 0; n < N; ++n) {
      const auto k = static_cast<Eigen::Index>(tables.index(l, n));
      zrow(0, k) = tables.root(l, n) / c;
      norm_row(0, k) = tables.normalizer(l, n) * std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi));
      select(l, k) = 1.0;
      orders[static_cast<std::size_t>(k)] = l;
    }
  Tensor bessel = spherical_bessel(diff::matmul(d, diff::constant(std::move(zrow))), std::move(orders));

  std::vector<Tensor> poly{diff::constant(Matrix::Ones(d.rows(), 1))};
  if (L > 1) poly.push_back(cos_alpha);
  for (int l = 1; l + 1 < L; ++l)
    poly.push_back(diff::scale(diff::scale(diff::mul(cos_alpha, poly[l]), 2.0 * l + 1.0) -
                                   diff::scale(poly[l - 1], static_cast<double>(l)),
                               1.0 / (l + 1.0)));
  Tensor angular = diff::matmul(diff::concat_cols(poly), diff::constant(std::move(select)));

  Tensor out = diff::mul_row(diff::mul(bessel, angular), diff::constant(std::move(norm_row)));
  return diff::mul_col(out, envelope(diff::scale(d, 1.0 / c), cfg.envelope_exponent));
}

}  // namespace basis_ops
}  // namespace dimekit
