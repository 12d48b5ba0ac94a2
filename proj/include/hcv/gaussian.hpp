#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "hcv/error.hpp"

namespace hcv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

/// rows x cols matrix of iid standard normal draws, filled row by row.
inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = normal(rng);
  }
  return out;
}

/// Cholesky factor of a symmetric positive definite matrix; throws when it is not.
inline Eigen::LLT<Matrix> spd_cholesky(const Matrix& m, const std::string& what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError(what + ": matrix is not positive definite");
  const Vector diag = llt.matrixLLT().diagonal();
  if (!(diag.array() > 0.0).all() || !diag.allFinite()) {
    throw NumericalError(what + ": matrix is not positive definite");
  }
  return llt;
}

inline double log_det_from_cholesky(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// Multivariate normal with either a full or a diagonal covariance.
class GaussianDistribution {
 public:
  GaussianDistribution() = default;

  static GaussianDistribution full(Vector mean, Matrix covariance) {
    if (covariance.rows() != mean.size() || covariance.cols() != mean.size()) {
      throw InvalidInput("gaussian: covariance shape does not match mean");
    }
    if (!mean.allFinite() || !covariance.allFinite()) throw InvalidInput("gaussian: non-finite parameters");
    const double scale = std::max(1.0, covariance.cwiseAbs().maxCoeff());
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
      throw InvalidInput("gaussian: covariance is not symmetric");
    }
    GaussianDistribution g;
    g.mean_ = std::move(mean);
    g.cov_ = 0.5 * (covariance + covariance.transpose());
    g.diagonal_ = false;
    return g;
  }

  static GaussianDistribution diagonal(Vector mean, Vector variances) {
    if (variances.size() != mean.size()) throw InvalidInput("gaussian: variance length does not match mean");
    if (!mean.allFinite() || !variances.allFinite()) throw InvalidInput("gaussian: non-finite parameters");
    if ((variances.array() < 0.0).any()) throw InvalidInput("gaussian: negative variance");
    GaussianDistribution g;
    g.mean_ = std::move(mean);
    g.var_ = std::move(variances);
    g.diagonal_ = true;
    return g;
  }

  static GaussianDistribution standard(Eigen::Index dim) {
    return diagonal(Vector::Zero(dim), Vector::Ones(dim));
  }

  Eigen::Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  bool is_diagonal() const { return diagonal_; }

  /// Variances (the covariance diagonal), valid for both representations.
  Vector variances() const { return diagonal_ ? var_ : Vector(cov_.diagonal()); }

  Matrix covariance() const { return diagonal_ ? Matrix(var_.asDiagonal()) : cov_; }

  bool is_standard_normal() const {
    return diagonal_ && (mean_.array() == 0.0).all() && (var_.array() == 1.0).all();
  }

  /// Marginal over the contiguous coordinate range [start, start + size).
  GaussianDistribution marginal(Eigen::Index start, Eigen::Index size) const {
    if (start < 0 || size < 1 || start + size > dim()) throw InvalidInput("gaussian: marginal out of range");
    if (diagonal_) return diagonal(mean_.segment(start, size), var_.segment(start, size));
    return full(mean_.segment(start, size), cov_.block(start, start, size, size));
  }

  double log_density(const Vector& x) const {
    if (x.size() != dim()) throw InvalidInput("gaussian: log_density dimension mismatch");
    const Vector diff = x - mean_;
    if (diagonal_) {
      if (!(var_.array() > 0.0).all()) throw NumericalError("gaussian: log_density needs positive variances");
      return -0.5 * (static_cast<double>(dim()) * kLog2Pi + var_.array().log().sum() +
                     (diff.array().square() / var_.array()).sum());
    }
    const auto llt = spd_cholesky(cov_, "gaussian log_density");
    const Vector white = llt.matrixL().solve(diff);
    return -0.5 * (static_cast<double>(dim()) * kLog2Pi + log_det_from_cholesky(llt) + white.squaredNorm());
  }

  Vector sample(std::mt19937_64& rng) const {
    const Vector eps = standard_normal(dim(), 1, rng);
    if (diagonal_) return mean_ + (var_.array().sqrt() * eps.array()).matrix();
    const auto llt = spd_cholesky(cov_, "gaussian sample");
    return mean_ + llt.matrixL() * eps;
  }

 private:
  Vector mean_;
  Matrix cov_;
  Vector var_;
  bool diagonal_ = true;
};

/// KL(q || p) in closed form.
inline double gaussian_kl(const GaussianDistribution& q, const GaussianDistribution& p) {
  if (q.dim() != p.dim()) throw InvalidInput("gaussian_kl: dimension mismatch");
  const double k = static_cast<double>(q.dim());
  double kl;
  if (q.is_diagonal() && p.is_diagonal()) {
    const Vector qv = q.variances();
    const Vector pv = p.variances();
    if (!(pv.array() > 0.0).all() || !(qv.array() > 0.0).all()) {
      throw NumericalError("gaussian_kl: variances must be positive");
    }
    if (p.is_standard_normal()) {
      kl = 0.5 * (qv.sum() + q.mean().squaredNorm() - k - qv.array().log().sum());
    } else {
      const Eigen::ArrayXd ratio = qv.array() / pv.array();
      const Eigen::ArrayXd diff = (p.mean() - q.mean()).array();
      kl = 0.5 * (ratio.sum() + (diff.square() / pv.array()).sum() - k - ratio.log().sum());
    }
  } else {
    const auto lp = spd_cholesky(p.covariance(), "gaussian_kl p");
    const auto lq = spd_cholesky(q.covariance(), "gaussian_kl q");
    const Matrix lq_dense = lq.matrixL();
    const Matrix solved = lp.matrixL().solve(lq_dense);
    const Vector diff = lp.matrixL().solve(p.mean() - q.mean());
    kl = 0.5 * (solved.squaredNorm() + diff.squaredNorm() - k + log_det_from_cholesky(lp) -
                log_det_from_cholesky(lq));
  }
  if (kl < 0.0) {
    if (kl >= -1e-10 * std::max(1.0, k)) return 0.0;
    throw NumericalError("gaussian_kl: negative divergence " + std::to_string(kl));
  }
  return kl;
}

}  // namespace hcv
