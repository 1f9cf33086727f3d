#pragma once

// Dense kernels shared by the local and global pruning solvers. Everything
// here is a pure function of its arguments and runs in double precision.

#include <sparsellm/error.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace sparsellm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

namespace numkit {

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw InvalidInputError(std::string(what) + " contains non-finite entries");
  }
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// Moore-Penrose pseudo-inverse through a thin SVD. Singular values at or
/// below `tol` are treated as zero; `tol == 0` selects
/// eps * max(rows, cols) * sigma_max.
inline Matrix pinv(const Matrix& a, double tol = 0.0) {
  if (a.size() == 0) throw ShapeError("pinv: empty matrix");
  if (tol < 0) throw InvalidInputError("pinv: negative tolerance");
  require_finite(a, "pinv input");

  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) {
    throw InvalidInputError("pinv: singular value decomposition failed");
  }
  const Vector& sigma = svd.singularValues();
  const double sigma_max = sigma.size() > 0 ? sigma(0) : 0.0;
  const double cutoff =
      tol > 0 ? tol
              : std::numeric_limits<double>::epsilon() *
                    static_cast<double>(std::max(a.rows(), a.cols())) * sigma_max;

  Vector inv(sigma.size());
  for (Index i = 0; i < sigma.size(); ++i) {
    inv(i) = sigma(i) > cutoff ? 1.0 / sigma(i) : 0.0;
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Solves (alpha * W^T W + beta * I) X = rhs with a Cholesky factorization.
inline Matrix spd_solve(const Matrix& w, double alpha, double beta, const Matrix& rhs) {
  if (alpha < 0) throw InvalidInputError("spd_solve: alpha must be >= 0");
  if (!(beta > 0)) throw InvalidInputError("spd_solve: beta must be > 0");
  if (rhs.rows() != w.cols()) {
    throw ShapeError("spd_solve: W is " + shape_str(w) + " but rhs is " + shape_str(rhs));
  }
  require_finite(w, "spd_solve W");
  require_finite(rhs, "spd_solve rhs");

  Matrix gram = Matrix::Identity(w.cols(), w.cols()) * beta;
  gram.selfadjointView<Eigen::Lower>().rankUpdate(w.transpose(), alpha);
  Eigen::LLT<Matrix> llt(gram.selfadjointView<Eigen::Lower>());
  if (llt.info() != Eigen::Success) {
    throw NumericalError("spd_solve: factorization failed");
  }
  Matrix x = llt.solve(rhs);
  if (!x.allFinite()) throw NumericalError("spd_solve: non-finite solution");
  return x;
}

/// Least-squares refit of one weight row with its support fixed.
///
/// Minimizes |w_row X - w_hat X|^2 over rows w_hat that vanish outside
/// `support`. With damp > 0 the normal equations receive a ridge term of
/// damp * mean(diag(X_S X_S^T)); when the support is wider than the sample
/// count the equivalent n x n dual system is solved instead. damp == 0 gives
/// the minimum-norm least-squares solution via a rank-revealing
/// decomposition, so rank deficiency is handled by the pseudo-inverse.
inline RowVector masked_row_lstsq(const RowVector& w_row, const Matrix& x,
                                  std::span<const Index> support, double damp) {
  if (x.rows() != w_row.cols()) {
    throw ShapeError("masked_row_lstsq: row has " + std::to_string(w_row.cols()) +
                     " entries but X is " + shape_str(x));
  }
  if (damp < 0) throw InvalidInputError("masked_row_lstsq: damp must be >= 0");

  RowVector out = RowVector::Zero(w_row.cols());
  const auto s = static_cast<Index>(support.size());
  if (s == 0) return out;

  const Index n = x.cols();
  Matrix xs(s, n);
  for (Index k = 0; k < s; ++k) {
    const Index j = support[static_cast<std::size_t>(k)];
    if (j < 0 || j >= x.rows()) throw ShapeError("masked_row_lstsq: support index out of range");
    xs.row(k) = x.row(j);
  }
  const RowVector target = w_row * x;
  // every supported input is identically zero: any refit is optimal
  if (xs.isZero(0.0)) return out;

  Vector coef;
  if (damp == 0.0) {
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(xs.transpose());
    coef = cod.solve(target.transpose());
  } else if (s <= n) {
    Matrix gram = xs * xs.transpose();
    const double lambda = damp * gram.diagonal().mean();
    gram.diagonal().array() += lambda;
    Eigen::LLT<Matrix> llt(gram);
    if (llt.info() != Eigen::Success) throw NumericalError("masked_row_lstsq: factorization failed");
    coef = llt.solve(xs * target.transpose());
  } else {
    // (X_S X_S^T + l I)^{-1} X_S y = X_S (X_S^T X_S + l I)^{-1} y
    Matrix gram = xs.transpose() * xs;
    const double lambda = damp * gram.trace() / static_cast<double>(s);
    gram.diagonal().array() += lambda;
    Eigen::LLT<Matrix> llt(gram);
    if (llt.info() != Eigen::Success) throw NumericalError("masked_row_lstsq: factorization failed");
    coef = xs * llt.solve(target.transpose());
  }
  if (!coef.allFinite()) throw NumericalError("masked_row_lstsq: non-finite solution");
  for (Index k = 0; k < s; ++k) out(support[static_cast<std::size_t>(k)]) = coef(k);
  return out;
}

inline double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline double silu(double v) { return v * sigmoid(v); }

inline double silu_derivative(double v) {
  const double sg = sigmoid(v);
  return sg * (1.0 + v * (1.0 - sg));
}

inline double silu_second_derivative(double v) {
  const double sg = sigmoid(v);
  const double dsg = sg * (1.0 - sg);
  return 2.0 * dsg + v * dsg * (1.0 - 2.0 * sg);
}

inline Matrix relu(const Matrix& z) { return z.cwiseMax(0.0); }

inline Matrix silu(const Matrix& z) {
  return z.unaryExpr([](double v) { return silu(v); });
}

/// f(s) = beta * (a - silu(s) * z)^2 + alpha * (s - w)^2
struct ScalarObjective {
  double a_entry = 0;
  double z_entry = 0;
  double w_entry = 0;
  double alpha = 1;
  double beta = 1;

  double operator()(double s) const {
    const double r = a_entry - silu(s) * z_entry;
    const double d = s - w_entry;
    return beta * r * r + alpha * d * d;
  }

  double derivative(double s) const {
    const double r = a_entry - silu(s) * z_entry;
    return -2.0 * beta * r * z_entry * silu_derivative(s) + 2.0 * alpha * (s - w_entry);
  }

  double second_derivative(double s) const {
    const double r = a_entry - silu(s) * z_entry;
    const double ds = silu_derivative(s);
    return 2.0 * beta * z_entry * z_entry * ds * ds -
           2.0 * beta * r * z_entry * silu_second_derivative(s) + 2.0 * alpha;
  }
};

namespace detail {

inline double golden_section(const ScalarObjective& f, double lo, double hi, double tol) {
  constexpr double kInvPhi = 0.6180339887498949;
  double c = hi - kInvPhi * (hi - lo);
  double d = lo + kInvPhi * (hi - lo);
  double fc = f(c), fd = f(d);
  while (hi - lo > tol) {
    if (fc <= fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - kInvPhi * (hi - lo);
      fc = f(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + kInvPhi * (hi - lo);
      fd = f(d);
    }
  }
  return fc <= fd ? c : d;
}

/// Safeguarded Newton descent on [a, b] starting from s; keeps the bracket
/// on the downhill side and never accepts an increase.
inline double newton_polish(const ScalarObjective& obj, double s, double a, double b, double tol) {
  double fs = obj(s);
  for (int it = 0; it < 60; ++it) {
    const double g = obj.derivative(s);
    const double h = obj.second_derivative(s);
    double cand = h > 0 ? s - g / h : s;
    if (!(cand > a && cand < b)) cand = 0.5 * (s + (g > 0 ? a : b));
    const double fcand = obj(cand);
    if (!(fcand <= fs)) break;
    const bool done = std::abs(cand - s) <= tol;
    (g > 0 ? b : a) = s;
    s = cand;
    fs = fcand;
    if (done) break;
  }
  return s;
}

}  // namespace detail

/// Beyond this magnitude silu(s) equals s (right) or 0 (left) to within
/// s * exp(-|s|), so the objective is a convex quadratic there.
inline constexpr double kSiluLinearRegion = 40.0;
/// Scan spacing inside the nonlinear region of silu.
inline constexpr double kScanStep = 0.1;

/// Global minimizer of a ScalarObjective on [w - halfwidth, w + halfwidth].
///
/// Inside |s| <= kSiluLinearRegion a uniform scan locates every basin, which
/// is narrowed by golden section and finished with Newton steps. Outside it
/// the objective is quadratic, and the closed-form minimizer of that
/// quadratic seeds a Newton refinement on the exact objective.
inline double scalar_minimize(const ScalarObjective& obj, double bracket_halfwidth, double tol) {
  if (!(bracket_halfwidth > 0)) throw InvalidInputError("scalar_minimize: halfwidth must be > 0");
  if (!(tol > 0)) throw InvalidInputError("scalar_minimize: tol must be > 0");
  if (!(obj.alpha > 0) || !(obj.beta > 0)) {
    throw InvalidInputError("scalar_minimize: alpha and beta must be > 0");
  }

  const double lo = obj.w_entry - bracket_halfwidth;
  const double hi = obj.w_entry + bracket_halfwidth;
  double best_s = std::clamp(obj.w_entry, lo, hi);
  double best_f = obj(best_s);
  auto consider = [&](double s) {
    const double fs = obj(s);
    if (fs < best_f) {
      best_f = fs;
      best_s = s;
    }
  };

  const double core_lo = std::max(lo, -kSiluLinearRegion);
  const double core_hi = std::min(hi, kSiluLinearRegion);
  if (core_lo < core_hi) {
    const int n = std::max(8, static_cast<int>(std::ceil((core_hi - core_lo) / kScanStep)));
    const double step = (core_hi - core_lo) / n;
    std::vector<double> fx(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) fx[static_cast<std::size_t>(i)] = obj(core_lo + step * i);
    for (int i = 0; i <= n; ++i) {
      const double fi = fx[static_cast<std::size_t>(i)];
      const bool left_ok = i == 0 || fi <= fx[static_cast<std::size_t>(i - 1)];
      const bool right_ok = i == n || fi <= fx[static_cast<std::size_t>(i + 1)];
      if (!left_ok || !right_ok) continue;
      const double a = std::max(core_lo, core_lo + step * (i - 1));
      const double b = std::min(core_hi, core_lo + step * (i + 1));
      const double s = detail::golden_section(obj, a, b, std::max(tol, 1e-3 * step));
      consider(detail::newton_polish(obj, s, a, b, tol));
    }
  }
  if (hi > kSiluLinearRegion) {
    // silu(s) ~ s: beta (t - z s)^2 + alpha (s - w)^2
    const double a = std::max(lo, kSiluLinearRegion);
    const double q = (obj.beta * obj.z_entry * obj.a_entry + obj.alpha * obj.w_entry) /
                     (obj.beta * obj.z_entry * obj.z_entry + obj.alpha);
    const double s0 = std::clamp(q, a, hi);
    consider(s0);
    consider(detail::newton_polish(obj, s0, a, hi, tol));
  }
  if (lo < -kSiluLinearRegion) {
    // silu(s) ~ 0: beta t^2 + alpha (s - w)^2
    const double b = std::min(hi, -kSiluLinearRegion);
    const double s0 = std::clamp(obj.w_entry, lo, b);
    consider(s0);
    consider(detail::newton_polish(obj, s0, lo, b, tol));
  }
  return best_s;
}

}  // namespace numkit
}  // namespace sparsellm
