#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hcv/error.hpp"
#include "hcv/kernels.hpp"

// =============================================================================
// Biased V-statistic estimators: HSIC, dHSIC, squared MMD, and the weighted
// MMD decomposition of HSIC against a discrete label. Plus the summed Pearson
// correlation and a permutation test used to validate the estimators.
// =============================================================================

namespace hcv {

/// n joint samples of one variable (rows) together with the kernel used on it.
struct SampleBlock {
  Matrix data;
  KernelSpec kernel;

  Eigen::Index size() const { return data.rows(); }
};

/// Gaussian block whose bandwidth comes from the median heuristic.
inline SampleBlock median_block(Matrix data) {
  const double gamma = median_heuristic(data);
  return SampleBlock{std::move(data), KernelSpec::gaussian(gamma)};
}

inline SampleBlock delta_block(Matrix codes) { return SampleBlock{std::move(codes), KernelSpec::delta()}; }

namespace detail {

// Rounding slack tolerated below zero before a negative estimate counts as a bug.
inline constexpr double kNegativeSlack = 1e-12;

inline double clamp_rounding(double value, const char* what) {
  if (value >= 0.0) return value;
  if (value >= -kNegativeSlack) return 0.0;
  throw NumericalError(std::string(what) + ": negative estimate " + std::to_string(value) +
                       " beyond rounding slack");
}

// Eq.-6 three-term V-statistic from precomputed Gram matrices.
inline double hsic_from_grams(const Matrix& k, const Matrix& l) {
  const double n = static_cast<double>(k.rows());
  const double t1 = k.cwiseProduct(l).sum() / (n * n);
  const double t2 = k.sum() * l.sum() / (n * n * n * n);
  const double t3 = 2.0 * k.rowwise().sum().dot(l.rowwise().sum()) / (n * n * n);
  return t1 + t2 - t3;
}

}  // namespace detail

inline double hsic_v_statistic(const SampleBlock& u, const SampleBlock& v) {
  if (u.size() != v.size()) {
    throw InvalidInput("hsic: sample counts differ (" + std::to_string(u.size()) + " vs " +
                       std::to_string(v.size()) + ")");
  }
  if (u.size() < 2) throw InvalidInput("hsic: need at least 2 samples");
  const Matrix k = gram_matrix(u.kernel, u.data);
  const Matrix l = gram_matrix(v.kernel, v.data);
  return detail::clamp_rounding(detail::hsic_from_grams(k, l), "hsic");
}

/// d-variable V-statistic. The sums over index tuples with repetition factor
/// into Gram elementwise products, Gram means and products of row sums.
inline double dhsic_v_statistic(std::span<const SampleBlock> blocks) {
  if (blocks.size() < 2) throw InvalidInput("dhsic: need at least 2 blocks");
  const Eigen::Index n = blocks.front().size();
  for (const auto& b : blocks) {
    if (b.size() != n) throw InvalidInput("dhsic: inconsistent sample counts across blocks");
  }
  if (n < 2) throw InvalidInput("dhsic: need at least 2 samples");

  const double nn = static_cast<double>(n);
  Matrix joint = Matrix::Ones(n, n);
  Vector row_product = Vector::Ones(n);
  double mean_product = 1.0;
  for (const auto& b : blocks) {
    const Matrix k = gram_matrix(b.kernel, b.data);
    joint.array() *= k.array();
    row_product.array() *= k.rowwise().sum().array();
    mean_product *= k.mean();
  }
  const double d = static_cast<double>(blocks.size());
  const double t1 = joint.sum() / (nn * nn);
  const double t3 = 2.0 * row_product.sum() / std::pow(nn, d + 1.0);
  return detail::clamp_rounding(t1 + mean_product - t3, "dhsic");
}

inline double dhsic_v_statistic(std::initializer_list<SampleBlock> blocks) {
  return dhsic_v_statistic(std::span<const SampleBlock>(blocks.begin(), blocks.size()));
}

/// Squared-MMD V-statistic between two samples under a shared kernel.
inline double mmd_v_statistic(const SampleBlock& x, const SampleBlock& y) {
  if (!(x.kernel == y.kernel)) throw InvalidInput("mmd: samples use different kernels");
  if (x.size() < 1 || y.size() < 1) throw InvalidInput("mmd: empty sample");
  if (x.data.cols() != y.data.cols()) throw InvalidInput("mmd: dimension mismatch");
  const double nx = static_cast<double>(x.size());
  const double ny = static_cast<double>(y.size());
  const double kxx = gram_matrix(x.kernel, x.data).sum();
  const double kyy = gram_matrix(y.kernel, y.data).sum();
  const double kxy = cross_gram_matrix(x.kernel, x.data, y.data).sum();
  return detail::clamp_rounding(kxx / (nx * nx) + kyy / (ny * ny) - 2.0 * kxy / (nx * ny), "mmd");
}

namespace detail {

inline Matrix select_rows(const Matrix& m, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace detail

/// Weight of the pair (a, b) in the MMD decomposition of delta-kernel HSIC:
/// p_a p_b (p_a + p_b - sum_c p_c^2) with p the empirical label frequencies.
inline double mmd_pair_weight(double p_a, double p_b, double sum_sq_p) {
  return p_a * p_b * (p_a + p_b - sum_sq_p);
}

/// HSIC between `z` and integer labels under a delta kernel, expressed as a
/// weighted sum of pairwise class-conditional MMDs. `declared_classes`, when
/// given, lists labels that must each have at least one member.
inline double weighted_mmd_sum(const SampleBlock& z, std::span<const std::int64_t> labels,
                               std::span<const std::int64_t> declared_classes = {}) {
  if (static_cast<Eigen::Index>(labels.size()) != z.size()) {
    throw InvalidInput("weighted_mmd_sum: label count does not match sample count");
  }
  if (z.size() < 1) throw InvalidInput("weighted_mmd_sum: no samples");

  std::map<std::int64_t, std::vector<Eigen::Index>> classes;
  for (std::int64_t c : declared_classes) classes[c];
  for (std::size_t i = 0; i < labels.size(); ++i) classes[labels[i]].push_back(static_cast<Eigen::Index>(i));
  for (const auto& [label, members] : classes) {
    if (members.empty()) {
      throw InvalidInput("weighted_mmd_sum: declared class " + std::to_string(label) + " has no members");
    }
  }

  const double total = static_cast<double>(z.size());
  std::vector<Matrix> parts;
  std::vector<double> freq;
  for (const auto& [label, members] : classes) {
    parts.push_back(detail::select_rows(z.data, members));
    freq.push_back(static_cast<double>(members.size()) / total);
  }
  const double sum_sq = std::inner_product(freq.begin(), freq.end(), freq.begin(), 0.0);

  double result = 0.0;
  for (std::size_t a = 0; a < parts.size(); ++a) {
    for (std::size_t b = a + 1; b < parts.size(); ++b) {
      const double mmd = mmd_v_statistic(SampleBlock{parts[a], z.kernel}, SampleBlock{parts[b], z.kernel});
      result += mmd_pair_weight(freq[a], freq[b], sum_sq) * mmd;
    }
  }
  return detail::clamp_rounding(result, "weighted_mmd_sum");
}

/// Sum over column pairs of |Pearson correlation| between u's and v's columns.
inline double pearson_correlation_sum(const Matrix& u, const Matrix& v) {
  if (u.rows() != v.rows()) throw InvalidInput("pearson: row counts differ");
  if (u.rows() < 2) throw InvalidInput("pearson: need at least 2 rows");
  detail::check_finite(u, "pearson");
  detail::check_finite(v, "pearson");

  auto standardize = [](const Matrix& m) {
    Matrix c = m.rowwise() - m.colwise().mean();
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      const double norm = c.col(j).norm();
      if (!(norm > 0.0)) throw InvalidInput("pearson: column " + std::to_string(j) + " has zero variance");
      c.col(j) /= norm;
    }
    return c;
  };
  const Matrix cu = standardize(u);
  const Matrix cv = standardize(v);
  return (cu.transpose() * cv).cwiseAbs().sum();
}

struct PermutationTestResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// HSIC permutation test: v's rows are permuted with a seeded generator.
/// p = (1 + #{permuted >= observed}) / (1 + n_permutations).
inline PermutationTestResult permutation_test(const SampleBlock& u, const SampleBlock& v, int n_permutations,
                                              std::uint64_t seed) {
  if (u.size() != v.size()) throw InvalidInput("permutation_test: sample counts differ");
  if (u.size() < 8) throw InvalidInput("permutation_test: need at least 8 samples");
  if (n_permutations < 99) throw InvalidInput("permutation_test: need at least 99 permutations");

  const Eigen::Index n = u.size();
  const Matrix k = gram_matrix(u.kernel, u.data);
  const Matrix l = gram_matrix(v.kernel, v.data);
  const Vector k_rows = k.rowwise().sum();
  const Vector l_rows = l.rowwise().sum();
  const double nn = static_cast<double>(n);
  const double t2 = k.sum() * l.sum() / (nn * nn * nn * nn);

  // HSIC with v's rows reordered by perm; the Gram-sum term is invariant.
  auto statistic = [&](const std::vector<Eigen::Index>& perm) {
    double t1 = 0.0;
    double t3 = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const Eigen::Index pj = perm[static_cast<std::size_t>(j)];
      for (Eigen::Index i = 0; i < n; ++i) t1 += k(i, j) * l(perm[static_cast<std::size_t>(i)], pj);
      t3 += k_rows(j) * l_rows(pj);
    }
    return t1 / (nn * nn) + t2 - 2.0 * t3 / (nn * nn * nn);
  };

  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  const double observed = statistic(perm);

  std::mt19937_64 rng(seed);
  int exceed = 0;
  for (int r = 0; r < n_permutations; ++r) {
    std::shuffle(perm.begin(), perm.end(), rng);
    if (statistic(perm) >= observed) ++exceed;
  }
  return {detail::clamp_rounding(observed, "permutation_test"),
          (1.0 + exceed) / (1.0 + static_cast<double>(n_permutations))};
}

}  // namespace hcv
