#pragma once

// Layer-wise pruning: saliency scores, mask construction and least-squares
// weight reconstruction with the mask held fixed.

#include <sparsellm/error.hpp>
#include <sparsellm/numkit.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

namespace sparsellm {

enum class Criterion { Magnitude, Wanda };

/// Zero out `fraction` of the matrix entries.
struct Unstructured {
  double fraction = 0.5;
  bool operator==(const Unstructured&) const = default;
};

/// Keep exactly `n` entries in every run of `m` consecutive inputs of a row.
struct SemiStructured {
  int n = 2;
  int m = 4;
  bool operator==(const SemiStructured&) const = default;
};

using SparsityPattern = std::variant<Unstructured, SemiStructured>;

using KeepMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct Mask {
  KeepMatrix keep;  // 1 = kept, 0 = pruned
  SparsityPattern pattern = Unstructured{0.0};

  Index rows() const { return keep.rows(); }
  Index cols() const { return keep.cols(); }
  Index zeros() const { return keep.size() - keep.cast<Index>().sum(); }

  Matrix as_matrix() const { return keep.cast<double>(); }

  static Mask all_ones(Index rows, Index cols) {
    return Mask{KeepMatrix::Ones(rows, cols), Unstructured{0.0}};
  }
};

inline std::string to_string(const SparsityPattern& p) {
  if (const auto* u = std::get_if<Unstructured>(&p)) {
    return "unstructured(" + std::to_string(u->fraction) + ")";
  }
  const auto& s = std::get<SemiStructured>(p);
  return std::to_string(s.n) + ":" + std::to_string(s.m);
}

/// Pattern parameters are in range and compatible with `cols` columns.
inline void validate_pattern(const SparsityPattern& p, Index cols = -1) {
  if (const auto* u = std::get_if<Unstructured>(&p)) {
    if (!(u->fraction >= 0.0 && u->fraction <= 1.0)) {
      throw ConfigError("sparsity", "fraction must lie in [0, 1]");
    }
    return;
  }
  const auto& s = std::get<SemiStructured>(p);
  if (s.m < 1 || s.n < 0 || s.n > s.m) throw ConfigError("nm", "need 0 <= n <= m and m >= 1");
  if (cols >= 0 && cols % s.m != 0) {
    throw ConfigError("nm", "input dimension " + std::to_string(cols) +
                                " is not divisible by m = " + std::to_string(s.m));
  }
}

/// Number of entries an unstructured pattern removes from `numel` entries.
inline Index unstructured_zero_count(double fraction, Index numel) {
  return static_cast<Index>(std::llround(fraction * static_cast<double>(numel)));
}

/// Saliency of every weight: |W| for Magnitude, |W_ij| * ||X_j||_2 for Wanda.
inline Matrix compute_scores(const Matrix& w, Criterion c, const Matrix& x = Matrix()) {
  if (c == Criterion::Magnitude) return w.cwiseAbs();
  if (x.size() == 0) throw MissingInputError("wanda scores need calibration activations");
  if (x.rows() != w.cols()) {
    throw ShapeError("wanda: W has " + std::to_string(w.cols()) + " inputs but X has " +
                     std::to_string(x.rows()) + " rows");
  }
  const RowVector norms = x.rowwise().norm().transpose();
  return w.cwiseAbs().array().rowwise() * norms.array();
}

/// Keeps the highest scores under `pattern`; ties keep the lower row-major
/// flat index first.
inline Mask build_mask(const Matrix& scores, const SparsityPattern& pattern) {
  validate_pattern(pattern, scores.cols());
  Mask mask{KeepMatrix::Zero(scores.rows(), scores.cols()), pattern};
  const Index rows = scores.rows();
  const Index cols = scores.cols();

  // higher score first, lower flat index on ties
  auto rank_before = [&](Index a, Index b) {
    const double sa = scores(a / cols, a % cols);
    const double sb = scores(b / cols, b % cols);
    if (sa != sb) return sa > sb;
    return a < b;
  };

  if (const auto* u = std::get_if<Unstructured>(&pattern)) {
    const Index numel = rows * cols;
    const Index keep = numel - unstructured_zero_count(u->fraction, numel);
    std::vector<Index> order(static_cast<std::size_t>(numel));
    std::iota(order.begin(), order.end(), Index{0});
    if (keep > 0 && keep < numel) {
      std::nth_element(order.begin(), order.begin() + keep, order.end(), rank_before);
    }
    for (Index k = 0; k < keep; ++k) {
      const Index flat = order[static_cast<std::size_t>(k)];
      mask.keep(flat / cols, flat % cols) = 1;
    }
    return mask;
  }

  const auto& nm = std::get<SemiStructured>(pattern);
  std::vector<Index> group(static_cast<std::size_t>(nm.m));
  for (Index i = 0; i < rows; ++i) {
    for (Index g = 0; g < cols; g += nm.m) {
      for (int k = 0; k < nm.m; ++k) group[static_cast<std::size_t>(k)] = i * cols + g + k;
      std::sort(group.begin(), group.end(), rank_before);
      for (int k = 0; k < nm.n; ++k) {
        const Index flat = group[static_cast<std::size_t>(k)];
        mask.keep(i, flat % cols) = 1;
      }
    }
  }
  return mask;
}

/// Refits each row of W on its kept entries so that (M . W_hat) X tracks W X.
/// The result is zero wherever the mask is zero.
inline Matrix reconstruct_weights(const Matrix& w, const Matrix& x, const Mask& mask, double damp) {
  if (mask.rows() != w.rows() || mask.cols() != w.cols()) {
    throw ShapeError("mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                     " does not match weight " + numkit::shape_str(w));
  }
  if (x.rows() != w.cols()) {
    throw ShapeError("reconstruct: W has " + std::to_string(w.cols()) + " inputs but X has " +
                     std::to_string(x.rows()) + " rows");
  }
  if (x.cols() < 1) throw ShapeError("reconstruct: calibration needs at least one sample");

  Matrix out = Matrix::Zero(w.rows(), w.cols());
  std::vector<Index> support;
  support.reserve(static_cast<std::size_t>(w.cols()));
  for (Index i = 0; i < w.rows(); ++i) {
    support.clear();
    for (Index j = 0; j < w.cols(); ++j) {
      if (mask.keep(i, j)) support.push_back(j);
    }
    // The damped refit is only a regularized estimate; fall back to the
    // zero-filled row whenever that leaves a smaller residual.
    RowVector masked = RowVector::Zero(w.cols());
    for (Index j : support) masked(j) = w(i, j);
    const RowVector refit = numkit::masked_row_lstsq(w.row(i), x, support, damp);
    const double refit_err = ((w.row(i) - refit) * x).squaredNorm();
    const double masked_err = ((w.row(i) - masked) * x).squaredNorm();
    out.row(i) = refit_err < masked_err ? refit : masked;
  }
  return out;
}

/// ||W X - W_hat X||_F^2
inline double layer_error(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  return ((w - w_hat) * x).squaredNorm();
}

struct LocalConfig {
  Criterion criterion = Criterion::Wanda;
  SparsityPattern pattern = Unstructured{0.5};
  double damp = 0.01;
};

struct LocalResult {
  Mask mask;
  Matrix weight;  // reconstructed, already masked
  double error = 0;
};

/// scores -> mask -> reconstruction for one dense layer against inputs X.
inline LocalResult prune_layer_local(const Matrix& w, const Matrix& x, const LocalConfig& cfg) {
  LocalResult r;
  r.mask = build_mask(compute_scores(w, cfg.criterion, x), cfg.pattern);
  r.weight = reconstruct_weights(w, x, r.mask, cfg.damp);
  r.error = layer_error(w, r.weight, x);
  return r;
}

}  // namespace sparsellm
