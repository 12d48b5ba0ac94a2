#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hcv/error.hpp"
#include "hcv/gaussian.hpp"

// =============================================================================
// Linear-Gaussian system with two independent latent groups:
//
//   v ~ N(0, I_n),  u ~ N(0, I_m),  x | u, v ~ N(A v + B u, s I_d + C C^T)
//
// where s is the observation noise scale. Everything here is exact: sampling,
// the joint posterior p(v, u | x), the marginal likelihood p(x), and the
// split of the variational gap into marginal and mean-field coupling parts.
// =============================================================================

namespace hcv {

/// Latent/observed sizes: n (v), m (u), k (rank of the structured noise), d (x).
struct LinGaussDims {
  int latent_v = 4;
  int latent_u = 4;
  int noise_rank = 4;
  int observed = 16;

  friend bool operator==(const LinGaussDims&, const LinGaussDims&) = default;
};

struct LinGaussModel {
  Matrix a;  // d x n, loads v
  Matrix b;  // d x m, loads u
  Matrix c;  // d x k, structured noise factor
  double noise_scale = 1.0;

  LinGaussDims dims() const {
    return {static_cast<int>(a.cols()), static_cast<int>(b.cols()), static_cast<int>(c.cols()),
            static_cast<int>(a.rows())};
  }

  void validate() const {
    if (a.rows() < 1 || b.rows() != a.rows() || c.rows() != a.rows()) {
      throw InvalidInput("lingauss model: A, B, C must share the observed dimension");
    }
    if (a.cols() < 1 || b.cols() < 1 || c.cols() < 1) throw InvalidInput("lingauss model: empty latent block");
    if (!(noise_scale > 0.0) || !std::isfinite(noise_scale)) {
      throw InvalidInput("lingauss model: noise_scale must be positive");
    }
    if (!a.allFinite() || !b.allFinite() || !c.allFinite()) throw InvalidInput("lingauss model: non-finite entries");
  }

  /// s I_d + C C^T
  Matrix noise_covariance() const {
    const auto d = a.rows();
    return noise_scale * Matrix::Identity(d, d) + c * c.transpose();
  }

  /// s I_d + C C^T + A A^T + B B^T
  Matrix marginal_covariance() const { return noise_covariance() + a * a.transpose() + b * b.transpose(); }

  /// [A, B]: v columns first.
  Matrix loadings() const {
    Matrix w(a.rows(), a.cols() + b.cols());
    w << a, b;
    return w;
  }
};

/// Observations with the latent draws that generated them.
struct LabeledDataset {
  Matrix x;  // N x d
  Matrix u;  // N x m
  Matrix v;  // N x n
  std::uint64_t seed = 0;

  Eigen::Index size() const { return x.rows(); }
};

namespace detail {

inline void check_dims(const LinGaussDims& dims) {
  if (dims.latent_v < 1 || dims.latent_u < 1 || dims.noise_rank < 1 || dims.observed < 1) {
    throw InvalidInput("lingauss: all dimensions must be >= 1");
  }
}

}  // namespace detail

/// Columns of A, B, C drawn iid from N(0, I_d / n), N(0, I_d / m), N(0, I_d / k).
inline LinGaussModel sample_model(const LinGaussDims& dims, std::uint64_t seed, double noise_scale = 1.0) {
  detail::check_dims(dims);
  std::mt19937_64 rng(seed);
  LinGaussModel model;
  model.a = standard_normal(dims.observed, dims.latent_v, rng) / std::sqrt(static_cast<double>(dims.latent_v));
  model.b = standard_normal(dims.observed, dims.latent_u, rng) / std::sqrt(static_cast<double>(dims.latent_u));
  model.c = standard_normal(dims.observed, dims.noise_rank, rng) / std::sqrt(static_cast<double>(dims.noise_rank));
  model.noise_scale = noise_scale;
  model.validate();
  return model;
}

/// Draws N iid rows (v, u, x). The structured noise is realized as C w with w ~ N(0, I_k).
inline LabeledDataset generate_data(const LinGaussModel& model, Eigen::Index rows, std::uint64_t seed) {
  model.validate();
  if (rows < 1) throw InvalidInput("generate_data: need at least one row");
  const auto dims = model.dims();
  std::mt19937_64 rng(seed);
  LabeledDataset data;
  data.seed = seed;
  data.v = standard_normal(rows, dims.latent_v, rng);
  data.u = standard_normal(rows, dims.latent_u, rng);
  const Matrix w = standard_normal(rows, dims.noise_rank, rng);
  const Matrix eps = standard_normal(rows, dims.observed, rng);
  data.x = data.v * model.a.transpose() + data.u * model.b.transpose() + w * model.c.transpose() +
           std::sqrt(model.noise_scale) * eps;
  return data;
}

/// Block of the stacked latent vector. The stacked order is (v, u).
enum class LatentBlock { v, u };

/// x -> N(gain x, covariance): the exact posterior of the stacked (v, u).
struct PosteriorOperator {
  Matrix gain;        // (n + m) x d
  Matrix covariance;  // (n + m) x (n + m)
  int latent_v = 0;
  int latent_u = 0;

  Eigen::Index offset(LatentBlock block) const { return block == LatentBlock::v ? 0 : latent_v; }
  Eigen::Index size(LatentBlock block) const { return block == LatentBlock::v ? latent_v : latent_u; }

  GaussianDistribution at(const Vector& x) const {
    if (x.size() != gain.cols()) throw InvalidInput("exact_posterior: x has the wrong dimension");
    return GaussianDistribution::full(gain * x, covariance);
  }

  /// Posterior means for every row of `x` (N x (n + m)).
  Matrix means(const Matrix& x) const {
    if (x.cols() != gain.cols()) throw InvalidInput("exact_posterior: x has the wrong dimension");
    return x * gain.transpose();
  }
};

/// Precision I + W^T N^{-1} W with W = [A, B], N = s I + C C^T; gain = Sigma W^T N^{-1}.
/// Only Cholesky solves are used.
inline PosteriorOperator posterior_operator(const LinGaussModel& model) {
  model.validate();
  const Matrix w = model.loadings();
  const auto noise_llt = spd_cholesky(model.noise_covariance(), "exact_posterior noise covariance");
  const Matrix whitened = noise_llt.matrixL().solve(w);          // L^{-1} W
  const Matrix noise_inv_w = noise_llt.matrixU().solve(whitened);  // N^{-1} W
  const auto q = w.cols();
  const Matrix precision = Matrix::Identity(q, q) + whitened.transpose() * whitened;
  const auto prec_llt = spd_cholesky(precision, "exact_posterior precision");
  Matrix cov = prec_llt.solve(Matrix::Identity(q, q));
  cov = 0.5 * (cov + cov.transpose());

  PosteriorOperator op;
  op.covariance = cov;
  op.gain = cov * noise_inv_w.transpose();
  op.latent_v = static_cast<int>(model.a.cols());
  op.latent_u = static_cast<int>(model.b.cols());
  return op;
}

inline GaussianDistribution exact_posterior(const LinGaussModel& model, const Vector& x) {
  return posterior_operator(model).at(x);
}

/// log N(x_i; 0, marginal covariance) for each row.
inline Vector marginal_log_likelihood_per_point(const LinGaussModel& model, const Matrix& x) {
  model.validate();
  if (x.cols() != model.a.rows()) {
    throw InvalidInput("marginal_log_likelihood: rows have length " + std::to_string(x.cols()) + ", model expects " +
                       std::to_string(model.a.rows()));
  }
  const auto llt = spd_cholesky(model.marginal_covariance(), "marginal covariance");
  const double constant = static_cast<double>(x.cols()) * kLog2Pi + log_det_from_cholesky(llt);
  const Matrix white = llt.matrixL().solve(x.transpose());
  return (-0.5 * (white.colwise().squaredNorm().array() + constant)).matrix().transpose();
}

/// Mean per-point exact log-likelihood.
inline double marginal_log_likelihood(const LinGaussModel& model, const Matrix& x) {
  if (x.rows() < 1) throw InvalidInput("marginal_log_likelihood: empty dataset");
  return marginal_log_likelihood_per_point(model, x).mean();
}

/// Factorized approximation q(u | x) q(v | x) for one data point.
struct MeanFieldPosterior {
  GaussianDistribution u;
  GaussianDistribution v;
};

/// Joint (v, u) Gaussian of a mean-field pair, in the exact posterior's order.
inline GaussianDistribution stacked_joint(const MeanFieldPosterior& q) {
  const auto nv = q.v.dim();
  const auto nu = q.u.dim();
  Vector mean(nv + nu);
  mean << q.v.mean(), q.u.mean();
  if (q.u.is_diagonal() && q.v.is_diagonal()) {
    Vector var(nv + nu);
    var << q.v.variances(), q.u.variances();
    return GaussianDistribution::diagonal(std::move(mean), std::move(var));
  }
  Matrix cov = Matrix::Zero(nv + nu, nv + nu);
  cov.topLeftCorner(nv, nv) = q.v.covariance();
  cov.bottomRightCorner(nu, nu) = q.u.covariance();
  return GaussianDistribution::full(std::move(mean), std::move(cov));
}

/// Dataset-averaged split of KL(q || p) into marginal fits plus coupling.
struct GapDecomposition {
  double total_gap = 0.0;
  double marginal_kl_sum = 0.0;
  double coupling_term = 0.0;
};

inline GapDecomposition decompose_variational_gap(const LinGaussModel& model, const std::vector<MeanFieldPosterior>& q,
                                                  const Matrix& x) {
  if (static_cast<Eigen::Index>(q.size()) != x.rows()) {
    throw InvalidInput("decompose_variational_gap: one posterior per data row required");
  }
  if (q.empty()) throw InvalidInput("decompose_variational_gap: empty dataset");
  const auto op = posterior_operator(model);
  for (const auto& qi : q) {
    if (qi.v.dim() != op.latent_v || qi.u.dim() != op.latent_u) {
      throw InvalidInput("decompose_variational_gap: posterior dimensions do not match the model");
    }
  }

  double total = 0.0;
  double marginal = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto& qi = q[static_cast<std::size_t>(i)];
    const auto exact = op.at(x.row(i).transpose());
    total += gaussian_kl(stacked_joint(qi), exact);
    marginal += gaussian_kl(qi.v, exact.marginal(op.offset(LatentBlock::v), op.size(LatentBlock::v)));
    marginal += gaussian_kl(qi.u, exact.marginal(op.offset(LatentBlock::u), op.size(LatentBlock::u)));
  }
  const double n = static_cast<double>(x.rows());
  GapDecomposition out;
  out.total_gap = total / n;
  out.marginal_kl_sum = marginal / n;
  out.coupling_term = out.total_gap - out.marginal_kl_sum;
  return out;
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

/// Monte Carlo estimate of E_q[log p(v|x) + log p(u|x) - log p(v, u|x)],
/// averaged over the rows of x with `samples_per_point` draws each.
inline MonteCarloEstimate coupling_term_monte_carlo(const LinGaussModel& model, const std::vector<MeanFieldPosterior>& q,
                                                    const Matrix& x, int samples_per_point, std::uint64_t seed) {
  if (static_cast<Eigen::Index>(q.size()) != x.rows() || q.empty()) {
    throw InvalidInput("coupling_term_monte_carlo: one posterior per data row required");
  }
  if (samples_per_point < 2) throw InvalidInput("coupling_term_monte_carlo: need at least 2 samples per point");
  const auto op = posterior_operator(model);
  std::mt19937_64 rng(seed);
  const auto nv = op.latent_v;
  const auto nu = op.latent_u;

  double mean_sum = 0.0;
  double var_sum = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto& qi = q[static_cast<std::size_t>(i)];
    const auto exact = op.at(x.row(i).transpose());
    const auto pv = exact.marginal(op.offset(LatentBlock::v), nv);
    const auto pu = exact.marginal(op.offset(LatentBlock::u), nu);
    const auto joint_llt = spd_cholesky(exact.covariance(), "coupling joint");
    const auto v_llt = spd_cholesky(pv.covariance(), "coupling v marginal");
    const auto u_llt = spd_cholesky(pu.covariance(), "coupling u marginal");
    const double log_det_diff =
        log_det_from_cholesky(joint_llt) - log_det_from_cholesky(v_llt) - log_det_from_cholesky(u_llt);

    double s1 = 0.0;
    double s2 = 0.0;
    Vector z(nv + nu);
    for (int s = 0; s < samples_per_point; ++s) {
      z << qi.v.sample(rng), qi.u.sample(rng);
      const Vector diff = z - exact.mean();
      const double quad_joint = joint_llt.matrixL().solve(diff).squaredNorm();
      const double quad_v = v_llt.matrixL().solve(diff.head(nv)).squaredNorm();
      const double quad_u = u_llt.matrixL().solve(diff.tail(nu)).squaredNorm();
      // log p_v + log p_u - log p_joint; the 2*pi constants cancel.
      const double f = 0.5 * (log_det_diff + quad_joint - quad_v - quad_u);
      s1 += f;
      s2 += f * f;
    }
    const double m = s1 / samples_per_point;
    const double var = (s2 - samples_per_point * m * m) / (samples_per_point - 1);
    mean_sum += m;
    var_sum += var / samples_per_point;
  }
  const double n = static_cast<double>(x.rows());
  return {mean_sum / n, std::sqrt(var_sum) / n};
}

}  // namespace hcv
