#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hcv/error.hpp"

// =============================================================================
// Kernel functions, Gram matrices and bandwidth selection.
//
// Sample matrices are n x p with one sample per row.
// =============================================================================

namespace hcv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct KernelSpec {
  enum class Kind { gaussian, delta };

  Kind kind = Kind::gaussian;
  /// Inverse squared length scale; only meaningful for the Gaussian kernel.
  double gamma = 1.0;

  static KernelSpec gaussian(double gamma) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) {
      throw InvalidInput("gaussian kernel: gamma must be a finite positive number, got " +
                         std::to_string(gamma));
    }
    return KernelSpec{Kind::gaussian, gamma};
  }

  static KernelSpec delta() { return KernelSpec{Kind::delta, 0.0}; }

  bool is_gaussian() const { return kind == Kind::gaussian; }

  friend bool operator==(const KernelSpec& a, const KernelSpec& b) {
    if (a.kind != b.kind) return false;
    return a.kind == Kind::delta || a.gamma == b.gamma;
  }
};

namespace detail {

inline void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw InvalidInput(std::string(what) + ": non-finite input");
}

inline void check_integer_codes(const Matrix& m, const char* what) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double x = m(i, j);
      if (std::floor(x) != x) {
        throw InvalidInput(std::string(what) + ": delta kernel requires integer-coded labels");
      }
    }
  }
}

// Samples as contiguous columns (p x n) so pairwise loops read contiguous memory.
inline double column_sq_dist(const Matrix& cols, Eigen::Index i, Eigen::Index j) {
  const double* a = cols.data() + i * cols.rows();
  const double* b = cols.data() + j * cols.rows();
  double sq = 0.0;
  for (Eigen::Index k = 0; k < cols.rows(); ++k) {
    const double diff = a[k] - b[k];
    sq += diff * diff;
  }
  return sq;
}

}  // namespace detail

template <class DerivedU, class DerivedV>
double kernel_eval(const KernelSpec& spec, const Eigen::MatrixBase<DerivedU>& u,
                   const Eigen::MatrixBase<DerivedV>& v) {
  if (u.size() != v.size()) {
    throw InvalidInput("kernel_eval: dimension mismatch (" + std::to_string(u.size()) + " vs " +
                       std::to_string(v.size()) + ")");
  }
  if (!u.allFinite() || !v.allFinite()) throw InvalidInput("kernel_eval: non-finite input");
  if (spec.is_gaussian()) {
    double sq = 0.0;
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      const double diff = u(i) - v(i);
      sq += diff * diff;
    }
    return std::exp(-spec.gamma * sq);
  }
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    if (u(i) != v(i)) return 0.0;
  }
  return 1.0;
}

/// Dense n x n Gram matrix. Each unordered pair is evaluated once and mirrored.
inline Matrix gram_matrix(const KernelSpec& spec, const Matrix& samples) {
  const Eigen::Index n = samples.rows();
  if (n == 0) throw InvalidInput("gram_matrix: no samples");
  detail::check_finite(samples, "gram_matrix");
  if (!spec.is_gaussian()) detail::check_integer_codes(samples, "gram_matrix");

  const Matrix cols = samples.transpose();
  Matrix gram(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    gram(j, j) = 1.0;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double value;
      if (spec.is_gaussian()) {
        value = std::exp(-spec.gamma * detail::column_sq_dist(cols, i, j));
      } else {
        value = cols.col(i) == cols.col(j) ? 1.0 : 0.0;
      }
      gram(i, j) = value;
      gram(j, i) = value;
    }
  }
  return gram;
}

/// Rectangular kernel matrix between the rows of `x` and the rows of `y`.
inline Matrix cross_gram_matrix(const KernelSpec& spec, const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols()) throw InvalidInput("cross_gram_matrix: dimension mismatch");
  detail::check_finite(x, "cross_gram_matrix");
  detail::check_finite(y, "cross_gram_matrix");
  if (!spec.is_gaussian()) {
    detail::check_integer_codes(x, "cross_gram_matrix");
    detail::check_integer_codes(y, "cross_gram_matrix");
  }
  const Matrix xc = x.transpose();
  const Matrix yc = y.transpose();
  Matrix out(x.rows(), y.rows());
  for (Eigen::Index j = 0; j < y.rows(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (spec.is_gaussian()) {
        double sq = 0.0;
        for (Eigen::Index k = 0; k < xc.rows(); ++k) {
          const double diff = xc(k, i) - yc(k, j);
          sq += diff * diff;
        }
        out(i, j) = std::exp(-spec.gamma * sq);
      } else {
        out(i, j) = xc.col(i) == yc.col(j) ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

/// gamma = 1 / median of squared distances over distinct-index pairs.
/// An even-length list uses the mean of its two central order statistics.
inline double median_heuristic(const Matrix& samples) {
  const Eigen::Index n = samples.rows();
  if (n < 2) throw InvalidInput("median_heuristic: need at least 2 samples");
  detail::check_finite(samples, "median_heuristic");

  const Matrix cols = samples.transpose();
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = j + 1; i < n; ++i) dists.push_back(detail::column_sq_dist(cols, i, j));
  }

  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  double median = dists[mid];
  if (dists.size() % 2 == 0) {
    const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (lower + median);
  }
  if (!(median > 0.0)) {
    throw NumericalError("median_heuristic: degenerate bandwidth (median pairwise distance is 0)");
  }
  return 1.0 / median;
}

}  // namespace hcv
