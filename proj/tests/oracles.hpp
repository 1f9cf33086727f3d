#pragma once

// Test-only reference computations. Deliberately naive: plain loops and
// textbook elimination, sharing no code path with the library kernels.

#include <sparsellm/numkit.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using sparsellm::Index;
using sparsellm::Matrix;

inline Matrix random_matrix(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c = Matrix::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index k = 0; k < a.cols(); ++k)
      for (Index j = 0; j < b.cols(); ++j) c(i, j) += a(i, k) * b(k, j);
  return c;
}

inline double sum_sq(const Matrix& m) {
  double s = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) s += m(i, j) * m(i, j);
  return s;
}

/// Gauss-Jordan elimination with partial pivoting; solves A x = b.
inline std::vector<double> gauss_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
    std::swap(a[p], a[c]);
    std::swap(b[p], b[c]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  for (std::size_t i = 0; i < n; ++i) b[i] /= a[i][i];
  return b;
}

/// Damped normal-equation refit of one row on `support`, written out longhand.
inline std::vector<double> normal_equation_row(const Matrix& w_row, const Matrix& x,
                                               const std::vector<Index>& support, double damp) {
  const std::size_t s = support.size();
  std::vector<double> y(static_cast<std::size_t>(x.cols()), 0.0);
  for (Index t = 0; t < x.cols(); ++t)
    for (Index j = 0; j < x.rows(); ++j) y[static_cast<std::size_t>(t)] += w_row(0, j) * x(j, t);

  std::vector<std::vector<double>> g(s, std::vector<double>(s, 0.0));
  std::vector<double> rhs(s, 0.0);
  double diag = 0;
  for (std::size_t a = 0; a < s; ++a) {
    for (std::size_t b = 0; b < s; ++b)
      for (Index t = 0; t < x.cols(); ++t) g[a][b] += x(support[a], t) * x(support[b], t);
    for (Index t = 0; t < x.cols(); ++t) rhs[a] += x(support[a], t) * y[static_cast<std::size_t>(t)];
    diag += g[a][a];
  }
  const double lambda = damp * diag / static_cast<double>(s);
  for (std::size_t a = 0; a < s; ++a) g[a][a] += lambda;
  return gauss_solve(g, rhs);
}

/// Minimum of f over `points` equally spaced samples of [lo, hi].
inline double grid_min(const std::function<double(double)>& f, double lo, double hi, int points) {
  double best = f(lo);
  for (int i = 1; i < points; ++i) best = std::min(best, f(lo + (hi - lo) * i / (points - 1)));
  return best;
}

inline double central_difference(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

}  // namespace oracle
