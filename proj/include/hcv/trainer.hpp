#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "hcv/diff.hpp"
#include "hcv/error.hpp"
#include "hcv/independence.hpp"
#include "hcv/io.hpp"
#include "hcv/kernels.hpp"
#include "hcv/lingauss.hpp"

// =============================================================================
// Mean-field AEVB on the linear-Gaussian task.
//
// Objectives (all maximized):
//   vae       E_q log p(x|z) - KL(q(u|x) || N(0,I)) - KL(q(v|x) || N(0,I))
//   beta_vae  E_q log p(x|z) - beta * KL
//   hcv       ELBO - lambda * HSIC(z_u, z_v) on the minibatch's reparameterized draws
// =============================================================================

namespace hcv {

enum class Objective { vae, beta_vae, hcv };
enum class BandwidthMode { per_batch_median, fixed };
enum class PenaltyGrouping { groups, coordinates };
/// learned: MLP decoder. true_model: the generating likelihood p(x | u, v), held fixed.
enum class DecoderKind { learned, true_model };

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::vae: return "vae";
    case Objective::beta_vae: return "beta_vae";
    case Objective::hcv: return "hcv";
  }
  return "vae";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "vae") return Objective::vae;
  if (s == "beta_vae" || s == "beta-vae") return Objective::beta_vae;
  if (s == "hcv") return Objective::hcv;
  throw ConfigError("objective: unknown value '" + s + "' (expected vae, beta_vae or hcv)");
}

inline const char* to_string(BandwidthMode b) {
  return b == BandwidthMode::per_batch_median ? "per_batch_median" : "fixed";
}

inline const char* to_string(PenaltyGrouping g) { return g == PenaltyGrouping::groups ? "groups" : "coordinates"; }

inline const char* to_string(DecoderKind d) { return d == DecoderKind::learned ? "learned" : "true_model"; }

struct TrainConfig {
  Objective objective = Objective::vae;
  double beta = 1.0;
  double penalty_weight = 0.0;  // lambda for hcv
  BandwidthMode bandwidth = BandwidthMode::per_batch_median;
  double fixed_gamma = 1.0;
  PenaltyGrouping grouping = PenaltyGrouping::groups;

  int batch_size = 128;
  int epochs = 30;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::vector<int> encoder_hidden{64, 64};
  std::vector<int> decoder_hidden{64, 64};
  /// Evaluate every this many optimizer steps; 0 means once per epoch.
  int eval_every = 0;
  bool learn_decoder_variance = true;
  DecoderKind decoder = DecoderKind::true_model;

  // Experiment data: the model and both splits are fixed by data_seed.
  LinGaussDims dims;
  double noise_scale = 1.0;
  int n_train = 10000;
  int n_test = 2000;
  std::uint64_t data_seed = 0;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
    if (!(beta > 0.0) || !std::isfinite(beta)) fail("beta", "must be a finite positive number");
    if (!(penalty_weight >= 0.0) || !std::isfinite(penalty_weight)) fail("penalty_weight", "must be >= 0");
    if (!(fixed_gamma > 0.0) || !std::isfinite(fixed_gamma)) fail("fixed_gamma", "must be positive");
    if (batch_size < 2) fail("batch_size", "must be >= 2");
    if (objective == Objective::hcv && batch_size < 16) fail("batch_size", "must be >= 16 for the hcv objective");
    if (epochs < 1) fail("epochs", "must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr", "must be positive");
    for (int w : encoder_hidden) {
      if (w < 1) fail("encoder_hidden", "widths must be >= 1");
    }
    for (int w : decoder_hidden) {
      if (w < 1) fail("decoder_hidden", "widths must be >= 1");
    }
    if (eval_every < 0) fail("eval_every", "must be >= 0");
    if (dims.latent_v < 1 || dims.latent_u < 1 || dims.noise_rank < 1 || dims.observed < 1) {
      fail("dims", "all dimensions must be >= 1");
    }
    if (!(noise_scale > 0.0) || !std::isfinite(noise_scale)) fail("noise_scale", "must be positive");
    if (n_train < batch_size) fail("n_train", "must be >= batch_size");
    if (n_test < 8) fail("n_test", "must be >= 8");
  }
};

// ---------------------------------------------------------------------------
// Config <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"objective", to_string(c.objective)},
      {"beta", c.beta},
      {"penalty_weight", c.penalty_weight},
      {"bandwidth", to_string(c.bandwidth)},
      {"fixed_gamma", c.fixed_gamma},
      {"grouping", to_string(c.grouping)},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"lr", c.lr},
      {"seed", c.seed},
      {"encoder_hidden", c.encoder_hidden},
      {"decoder_hidden", c.decoder_hidden},
      {"eval_every", c.eval_every},
      {"learn_decoder_variance", c.learn_decoder_variance},
      {"decoder", to_string(c.decoder)},
      {"dims", {{"latent_v", c.dims.latent_v}, {"latent_u", c.dims.latent_u}, {"noise_rank", c.dims.noise_rank},
                {"observed", c.dims.observed}}},
      {"noise_scale", c.noise_scale},
      {"n_train", c.n_train},
      {"n_test", c.n_test},
      {"data_seed", c.data_seed},
  };
}

namespace detail {

template <class T>
T json_field(const nlohmann::json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace detail

/// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  static const std::set<std::string> known{
      "objective", "beta",       "penalty_weight", "bandwidth",  "fixed_gamma", "grouping",   "batch_size",
      "epochs",    "lr",         "seed",           "encoder_hidden", "decoder_hidden", "eval_every",
      "learn_decoder_variance", "decoder", "dims", "noise_scale", "n_train", "n_test", "data_seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(key + ": unknown config field");
  }
  using detail::json_field;
  TrainConfig c = std::move(base);
  if (j.contains("objective")) c.objective = objective_from_string(json_field<std::string>(j, "objective"));
  if (j.contains("beta")) c.beta = json_field<double>(j, "beta");
  if (j.contains("penalty_weight")) c.penalty_weight = json_field<double>(j, "penalty_weight");
  if (j.contains("bandwidth")) {
    const auto s = json_field<std::string>(j, "bandwidth");
    if (s == "per_batch_median") c.bandwidth = BandwidthMode::per_batch_median;
    else if (s == "fixed") c.bandwidth = BandwidthMode::fixed;
    else throw ConfigError("bandwidth: expected per_batch_median or fixed, got '" + s + "'");
  }
  if (j.contains("fixed_gamma")) c.fixed_gamma = json_field<double>(j, "fixed_gamma");
  if (j.contains("grouping")) {
    const auto s = json_field<std::string>(j, "grouping");
    if (s == "groups") c.grouping = PenaltyGrouping::groups;
    else if (s == "coordinates") c.grouping = PenaltyGrouping::coordinates;
    else throw ConfigError("grouping: expected groups or coordinates, got '" + s + "'");
  }
  if (j.contains("batch_size")) c.batch_size = json_field<int>(j, "batch_size");
  if (j.contains("epochs")) c.epochs = json_field<int>(j, "epochs");
  if (j.contains("lr")) c.lr = json_field<double>(j, "lr");
  if (j.contains("seed")) c.seed = json_field<std::uint64_t>(j, "seed");
  if (j.contains("encoder_hidden")) c.encoder_hidden = json_field<std::vector<int>>(j, "encoder_hidden");
  if (j.contains("decoder_hidden")) c.decoder_hidden = json_field<std::vector<int>>(j, "decoder_hidden");
  if (j.contains("eval_every")) c.eval_every = json_field<int>(j, "eval_every");
  if (j.contains("learn_decoder_variance")) c.learn_decoder_variance = json_field<bool>(j, "learn_decoder_variance");
  if (j.contains("decoder")) {
    const auto s = json_field<std::string>(j, "decoder");
    if (s == "learned") c.decoder = DecoderKind::learned;
    else if (s == "true_model") c.decoder = DecoderKind::true_model;
    else throw ConfigError("decoder: expected learned or true_model, got '" + s + "'");
  }
  if (j.contains("dims")) {
    const auto& d = j.at("dims");
    if (!d.is_object()) throw ConfigError("dims: expected an object");
    for (const auto& [key, _] : d.items()) {
      if (key != "latent_v" && key != "latent_u" && key != "noise_rank" && key != "observed") {
        throw ConfigError("dims." + key + ": unknown config field");
      }
    }
    if (d.contains("latent_v")) c.dims.latent_v = detail::json_field<int>(d, "latent_v");
    if (d.contains("latent_u")) c.dims.latent_u = detail::json_field<int>(d, "latent_u");
    if (d.contains("noise_rank")) c.dims.noise_rank = detail::json_field<int>(d, "noise_rank");
    if (d.contains("observed")) c.dims.observed = detail::json_field<int>(d, "observed");
  }
  if (j.contains("noise_scale")) c.noise_scale = json_field<double>(j, "noise_scale");
  if (j.contains("n_train")) c.n_train = json_field<int>(j, "n_train");
  if (j.contains("n_test")) c.n_test = json_field<int>(j, "n_test");
  if (j.contains("data_seed")) c.data_seed = json_field<std::uint64_t>(j, "data_seed");
  return c;
}

// ---------------------------------------------------------------------------
// Experiment data
// ---------------------------------------------------------------------------

namespace detail {

/// Independent generator per (seed, stream) pair.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return stream_rng(seed, stream)(); }

}  // namespace detail

struct ExperimentData {
  LinGaussModel model;
  LabeledDataset train;
  LabeledDataset test;
};

inline ExperimentData make_experiment_data(const TrainConfig& c) {
  ExperimentData data;
  data.model = sample_model(c.dims, detail::stream_seed(c.data_seed, 0), c.noise_scale);
  data.train = generate_data(data.model, c.n_train, detail::stream_seed(c.data_seed, 1));
  data.test = generate_data(data.model, c.n_test, detail::stream_seed(c.data_seed, 2));
  return data;
}

// ---------------------------------------------------------------------------
// Variational model
// ---------------------------------------------------------------------------

/// The generating likelihood N(A v + B u, s I + C C^T) as a parameter-free decoder.
struct FixedLinearDecoder {
  LinGaussModel model;
  Matrix whitener;  // L^{-T} for N = L L^T: rows r -> r * whitener have identity covariance
  double log_det = 0.0;

  static FixedLinearDecoder from(const LinGaussModel& m) {
    m.validate();
    FixedLinearDecoder f;
    f.model = m;
    const auto llt = spd_cholesky(m.noise_covariance(), "fixed decoder noise covariance");
    const auto d = m.a.rows();
    const Matrix l_inv = llt.matrixL().solve(Matrix::Identity(d, d));
    f.whitener = l_inv.transpose();
    f.log_det = log_det_from_cholesky(llt);
    return f;
  }
};

/// Encoder output columns: [mu_u | log_var_u | mu_v | log_var_v].
/// Learned decoder input: [z_u | z_v]; output [mu_x | log_var_x] (mu_x only
/// when the decoder variance is frozen at log_var_x = 0). With a fixed
/// decoder the MLP is empty and only the encoder is trained.
struct VariationalModel {
  diff::Mlp encoder;
  diff::Mlp decoder;
  std::optional<FixedLinearDecoder> fixed_decoder;
  int latent_u = 0;
  int latent_v = 0;
  int observed = 0;
  bool learn_decoder_variance = true;

  std::vector<Matrix*> parameters() {
    auto out = diff::parameters(encoder);
    auto dec = diff::parameters(decoder);
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
  }

  void validate() const {
    encoder.validate();
    if (encoder.in_dim() != observed || encoder.out_dim() != 2 * (latent_u + latent_v)) {
      throw InvalidInput("variational model: encoder shape does not match latent/observed dims");
    }
    if (fixed_decoder) {
      const auto d = fixed_decoder->model.dims();
      if (d.latent_u != latent_u || d.latent_v != latent_v || d.observed != observed || !decoder.layers.empty()) {
        throw InvalidInput("variational model: fixed decoder does not match latent/observed dims");
      }
      return;
    }
    decoder.validate();
    const auto dec_out = learn_decoder_variance ? 2 * observed : observed;
    if (decoder.in_dim() != latent_u + latent_v || decoder.out_dim() != dec_out) {
      throw InvalidInput("variational model: decoder shape does not match latent/observed dims");
    }
  }
};

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

/// `truth` is required for DecoderKind::true_model.
inline VariationalModel make_variational_model(const TrainConfig& c, std::mt19937_64& rng,
                                               const LinGaussModel* truth = nullptr) {
  VariationalModel m;
  m.latent_u = c.dims.latent_u;
  m.latent_v = c.dims.latent_v;
  m.observed = c.dims.observed;
  m.learn_decoder_variance = c.learn_decoder_variance;
  m.encoder = diff::make_mlp(m.observed, c.encoder_hidden, 2 * (m.latent_u + m.latent_v), diff::Activation::tanh, rng);
  if (c.decoder == DecoderKind::true_model) {
    if (truth == nullptr) throw ConfigError("decoder: true_model requires the generating model");
    m.fixed_decoder = FixedLinearDecoder::from(*truth);
  } else {
    m.decoder = diff::make_mlp(m.latent_u + m.latent_v, c.decoder_hidden,
                               m.learn_decoder_variance ? 2 * m.observed : m.observed, diff::Activation::tanh, rng);
  }
  m.validate();
  return m;
}

struct ModelVars {
  diff::MlpVars encoder;
  diff::MlpVars decoder;
};

inline ModelVars bind(diff::Graph& g, const VariationalModel& m, bool trainable = true) {
  return {diff::bind(g, m.encoder, trainable), diff::bind(g, m.decoder, trainable)};
}

inline std::vector<Matrix> gradients(const ModelVars& vars) {
  auto out = diff::gradients(vars.encoder);
  auto dec = diff::gradients(vars.decoder);
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

/// Standard-normal draws for the reparameterized latent samples.
struct LatentNoise {
  Matrix u;
  Matrix v;
};

inline LatentNoise draw_noise(Eigen::Index rows, const VariationalModel& m, std::mt19937_64& rng) {
  LatentNoise n;
  n.u = standard_normal(rows, m.latent_u, rng);
  n.v = standard_normal(rows, m.latent_v, rng);
  return n;
}

/// Graph nodes of one forward pass. Reconstruction and KL are batch means.
struct ForwardTerms {
  diff::Var mu_u, log_var_u, mu_v, log_var_v;
  diff::Var z_u, z_v;
  diff::Var reconstruction;
  diff::Var kl;
};

inline ForwardTerms forward_terms(diff::Graph& g, const VariationalModel& m, const ModelVars& vars, const Matrix& x,
                                  const LatentNoise& noise) {
  if (x.rows() < 1) throw InvalidInput("elbo: empty batch");
  if (x.cols() != m.observed) throw InvalidInput("elbo: batch has the wrong observed dimension");
  using namespace diff;
  const double n = static_cast<double>(x.rows());
  const Var input = g.constant(x);
  const Var enc = forward_mlp(m.encoder, vars.encoder, input);
  ForwardTerms t;
  t.mu_u = slice_cols(enc, 0, m.latent_u);
  t.log_var_u = clamp(slice_cols(enc, m.latent_u, m.latent_u), kLogVarMin, kLogVarMax);
  t.mu_v = slice_cols(enc, 2 * m.latent_u, m.latent_v);
  t.log_var_v = clamp(slice_cols(enc, 2 * m.latent_u + m.latent_v, m.latent_v), kLogVarMin, kLogVarMax);
  t.z_u = reparameterized_gaussian_sample(t.mu_u, t.log_var_u, noise.u);
  t.z_v = reparameterized_gaussian_sample(t.mu_v, t.log_var_v, noise.v);

  if (m.fixed_decoder) {
    const auto& f = *m.fixed_decoder;
    const Var mu_x = add(matmul_nt(t.z_v, g.constant(f.model.a)), matmul_nt(t.z_u, g.constant(f.model.b)));
    const Var white = matmul(sub(g.constant(x), mu_x), g.constant(f.whitener));
    const double constant = n * (static_cast<double>(m.observed) * kLog2Pi + f.log_det);
    t.reconstruction = scale(add_scalar(sum(square(white)), constant), -0.5 / n);
  } else {
    const Var dec = forward_mlp(m.decoder, vars.decoder, concat_cols(t.z_u, t.z_v));
    Var mu_x = m.learn_decoder_variance ? slice_cols(dec, 0, m.observed) : dec;
    Var log_var_x = m.learn_decoder_variance ? clamp(slice_cols(dec, m.observed, m.observed), kLogVarMin, kLogVarMax)
                                             : g.constant(Matrix::Zero(x.rows(), m.observed));
    t.reconstruction = scale(gaussian_log_density(x, mu_x, log_var_x), 1.0 / n);
  }
  t.kl = scale(add(kl_to_standard_normal(t.mu_u, t.log_var_u), kl_to_standard_normal(t.mu_v, t.log_var_v)), 1.0 / n);
  return t;
}

/// Per-datapoint mean ELBO with one reparameterized draw per row.
inline diff::Var elbo(diff::Graph& g, const VariationalModel& m, const ModelVars& vars, const Matrix& x,
                      const LatentNoise& noise) {
  const auto t = forward_terms(g, m, vars, x, noise);
  return diff::sub(t.reconstruction, t.kl);
}

// ---------------------------------------------------------------------------
// Dependence penalty
// ---------------------------------------------------------------------------

/// Bandwidths used by the penalty for a given minibatch of latent draws.
/// groups: {gamma_u, gamma_v}; coordinates: one per latent coordinate (u first).
inline std::vector<double> penalty_bandwidths(const TrainConfig& c, const Matrix& z_u, const Matrix& z_v) {
  std::vector<double> out;
  auto pick = [&](const Matrix& m) {
    return c.bandwidth == BandwidthMode::fixed ? c.fixed_gamma : median_heuristic(m);
  };
  if (c.grouping == PenaltyGrouping::groups) {
    out = {pick(z_u), pick(z_v)};
  } else {
    for (Eigen::Index j = 0; j < z_u.cols(); ++j) out.push_back(pick(z_u.col(j)));
    for (Eigen::Index j = 0; j < z_v.cols(); ++j) out.push_back(pick(z_v.col(j)));
  }
  return out;
}

/// Standalone (non-graph) estimate of the configured dependence measure.
inline double dependence_estimate(const TrainConfig& c, const Matrix& z_u, const Matrix& z_v) {
  const auto gammas = penalty_bandwidths(c, z_u, z_v);
  if (c.grouping == PenaltyGrouping::groups) {
    return hsic_v_statistic(SampleBlock{z_u, KernelSpec::gaussian(gammas[0])},
                            SampleBlock{z_v, KernelSpec::gaussian(gammas[1])});
  }
  std::vector<SampleBlock> blocks;
  for (Eigen::Index j = 0; j < z_u.cols(); ++j) blocks.push_back({z_u.col(j), KernelSpec::gaussian(gammas[blocks.size()])});
  for (Eigen::Index j = 0; j < z_v.cols(); ++j) blocks.push_back({z_v.col(j), KernelSpec::gaussian(gammas[blocks.size()])});
  return dhsic_v_statistic(blocks);
}

/// Graph-built dependence measure; gradients reach the latent draws, not the bandwidths.
inline diff::Var dependence_penalty(const TrainConfig& c, const diff::Var& z_u, const diff::Var& z_v) {
  using namespace diff;
  const auto gammas = penalty_bandwidths(c, z_u.value(), z_v.value());
  if (c.grouping == PenaltyGrouping::groups) {
    return hsic_v(gaussian_gram(z_u, gammas[0]), gaussian_gram(z_v, gammas[1]));
  }
  std::vector<Var> grams;
  for (Eigen::Index j = 0; j < z_u.cols(); ++j) grams.push_back(gaussian_gram(slice_cols(z_u, j, 1), gammas[grams.size()]));
  for (Eigen::Index j = 0; j < z_v.cols(); ++j) grams.push_back(gaussian_gram(slice_cols(z_v, j, 1), gammas[grams.size()]));
  return dhsic_v(grams);
}

struct ObjectiveTerms {
  ForwardTerms forward;
  diff::Var elbo;
  /// Graph penalty node; only built for hcv with a positive weight.
  diff::Var penalty;
  diff::Var value;
};

inline ObjectiveTerms objective(diff::Graph& g, const VariationalModel& m, const ModelVars& vars, const TrainConfig& c,
                                const Matrix& x, const LatentNoise& noise) {
  if (c.objective == Objective::hcv && x.rows() < 16) {
    throw ConfigError("batch_size: hcv needs at least 16 samples per batch");
  }
  using namespace diff;
  ObjectiveTerms o;
  o.forward = forward_terms(g, m, vars, x, noise);
  o.elbo = sub(o.forward.reconstruction, o.forward.kl);
  switch (c.objective) {
    case Objective::vae:
      o.value = o.elbo;
      break;
    case Objective::beta_vae:
      o.value = c.beta == 1.0 ? o.elbo : sub(o.forward.reconstruction, scale(o.forward.kl, c.beta));
      break;
    case Objective::hcv:
      if (c.penalty_weight > 0.0) {
        o.penalty = dependence_penalty(c, o.forward.z_u, o.forward.z_v);
        o.value = sub(o.elbo, scale(o.penalty, c.penalty_weight));
      } else {
        o.value = o.elbo;
      }
      break;
  }
  return o;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalMetrics {
  double elbo = 0.0;
  double elbo_se = 0.0;  // standard error of the mean over rows
  double hsic = 0.0;
  double pearson = 0.0;
};

/// Encoder outputs without a graph, log-variances clamped.
struct EncoderOutputs {
  Matrix mu_u, log_var_u, mu_v, log_var_v;
};

inline EncoderOutputs encode(const VariationalModel& m, const Matrix& x) {
  const Matrix enc = diff::forward_values(m.encoder, x);
  EncoderOutputs e;
  e.mu_u = enc.middleCols(0, m.latent_u);
  e.log_var_u = enc.middleCols(m.latent_u, m.latent_u).cwiseMax(kLogVarMin).cwiseMin(kLogVarMax);
  e.mu_v = enc.middleCols(2 * m.latent_u, m.latent_v);
  e.log_var_v = enc.middleCols(2 * m.latent_u + m.latent_v, m.latent_v).cwiseMax(kLogVarMin).cwiseMin(kLogVarMax);
  return e;
}

/// Single-draw ELBO of every row, plus the draws themselves.
struct PointwiseElbo {
  Vector elbo;
  Matrix z_u;
  Matrix z_v;
  EncoderOutputs enc;
};

inline PointwiseElbo pointwise_elbo(const VariationalModel& m, const Matrix& x, const LatentNoise& noise) {
  m.validate();
  PointwiseElbo out;
  out.enc = encode(m, x);
  const auto& e = out.enc;
  out.z_u = e.mu_u + (0.5 * e.log_var_u.array()).exp().matrix().cwiseProduct(noise.u);
  out.z_v = e.mu_v + (0.5 * e.log_var_v.array()).exp().matrix().cwiseProduct(noise.v);
  Vector recon;
  if (m.fixed_decoder) {
    const auto& f = *m.fixed_decoder;
    const Matrix resid = x - out.z_v * f.model.a.transpose() - out.z_u * f.model.b.transpose();
    const Matrix white = resid * f.whitener;
    recon = (-0.5 * (white.rowwise().squaredNorm().array() + static_cast<double>(m.observed) * kLog2Pi + f.log_det))
                .matrix();
  } else {
    Matrix z(x.rows(), m.latent_u + m.latent_v);
    z << out.z_u, out.z_v;
    const Matrix dec = diff::forward_values(m.decoder, z);
    const Matrix mu_x = dec.leftCols(m.observed);
    const Matrix lv_x = m.learn_decoder_variance
                            ? Matrix(dec.rightCols(m.observed).cwiseMax(kLogVarMin).cwiseMin(kLogVarMax))
                            : Matrix::Zero(x.rows(), m.observed);
    const Eigen::ArrayXXd resid = (x - mu_x).array();
    recon = (-0.5 * (kLog2Pi + lv_x.array() + resid.square() * (-lv_x.array()).exp())).matrix().rowwise().sum();
  }
  auto kl_rows = [](const Matrix& mu, const Matrix& lv) {
    return Vector((0.5 * (lv.array().exp() + mu.array().square() - 1.0 - lv.array())).matrix().rowwise().sum());
  };
  out.elbo = recon - kl_rows(e.mu_u, e.log_var_u) - kl_rows(e.mu_v, e.log_var_v);
  if (!out.elbo.allFinite()) throw NumericalError("evaluate: non-finite ELBO");
  return out;
}

inline EvalMetrics evaluate(const VariationalModel& m, const Matrix& x, std::mt19937_64& rng, bool with_dependence) {
  const auto noise = draw_noise(x.rows(), m, rng);
  const auto pe = pointwise_elbo(m, x, noise);
  EvalMetrics r;
  const double n = static_cast<double>(x.rows());
  r.elbo = pe.elbo.mean();
  const double var = (pe.elbo.array() - r.elbo).square().sum() / std::max(1.0, n - 1.0);
  r.elbo_se = std::sqrt(var / n);
  if (with_dependence) {
    r.hsic = hsic_v_statistic(median_block(pe.z_u), median_block(pe.z_v));
    r.pearson = pearson_correlation_sum(pe.enc.mu_u, pe.enc.mu_v);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TraceRecord {
  long step = 0;
  int epoch = 0;
  double train_elbo = 0.0;  // mean minibatch ELBO since the previous record
  double test_elbo = 0.0;
  double test_elbo_se = 0.0;
  double test_hsic = 0.0;
  double test_pearson = 0.0;
  /// Mean unweighted minibatch dependence estimate since the previous record.
  double penalty = 0.0;
  double wall_clock = 0.0;  // seconds since training started
};

struct TrainResult {
  VariationalModel model;
  std::vector<TraceRecord> trace;
  bool diverged = false;
  std::string failure;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace detail

/// Shuffled minibatch Adam ascent. Single-threaded and fully determined by
/// (config, data). A non-finite step stops training and returns the partial trace.
inline TrainResult train(const TrainConfig& c, const ExperimentData& data) {
  c.validate();
  if (data.model.dims() != c.dims) throw InvalidInput("train: dataset dims do not match config dims");
  const auto start = std::chrono::steady_clock::now();

  auto init_rng = detail::stream_rng(c.seed, 10);
  auto shuffle_rng = detail::stream_rng(c.seed, 11);
  auto noise_rng = detail::stream_rng(c.seed, 12);
  auto eval_rng = detail::stream_rng(c.seed, 13);

  TrainResult result;
  result.model = make_variational_model(c, init_rng, &data.model);
  auto& model = result.model;
  diff::AdamState adam;
  adam.options.lr = c.lr;

  const Eigen::Index n = data.train.size();
  const Eigen::Index steps_per_epoch = n / c.batch_size;
  const long eval_every = c.eval_every > 0 ? c.eval_every : static_cast<long>(steps_per_epoch);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  // Running means over the minibatches since the previous record.
  double penalty_sum = 0.0;
  double elbo_sum = 0.0;
  long penalty_count = 0;
  long step = 0;
  int epoch = 0;

  auto record = [&]() {
    TraceRecord r;
    r.step = step;
    r.epoch = epoch;
    r.train_elbo = elbo_sum / static_cast<double>(penalty_count);
    const auto test = evaluate(model, data.test.x, eval_rng, true);
    r.test_elbo = test.elbo;
    r.test_elbo_se = test.elbo_se;
    r.test_hsic = test.hsic;
    r.test_pearson = test.pearson;
    r.penalty = penalty_count > 0 ? penalty_sum / static_cast<double>(penalty_count) : 0.0;
    r.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.trace.push_back(r);
    penalty_sum = 0.0;
    elbo_sum = 0.0;
    penalty_count = 0;
  };

  try {
    // Step-0 record: train ELBO and penalty come from the first minibatch before any update.
    {
      const Matrix x0 = detail::gather_rows(data.train.x, std::span(order).first(static_cast<std::size_t>(c.batch_size)));
      auto probe_rng = detail::stream_rng(c.seed, 14);
      const auto pe = pointwise_elbo(model, x0, draw_noise(x0.rows(), model, probe_rng));
      penalty_sum = dependence_estimate(c, pe.z_u, pe.z_v);
      elbo_sum = pe.elbo.mean();
      penalty_count = 1;
      record();
    }
    for (epoch = 1; epoch <= c.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      for (Eigen::Index b = 0; b < steps_per_epoch; ++b) {
        const auto rows = std::span(order).subspan(static_cast<std::size_t>(b * c.batch_size),
                                                   static_cast<std::size_t>(c.batch_size));
        const Matrix x = detail::gather_rows(data.train.x, rows);
        const auto noise = draw_noise(x.rows(), model, noise_rng);

        diff::Graph g;
        const auto vars = bind(g, model);
        const auto obj = objective(g, model, vars, c, x, noise);
        penalty_sum += dependence_estimate(c, obj.forward.z_u.value(), obj.forward.z_v.value());
        elbo_sum += obj.elbo.scalar();
        ++penalty_count;
        g.backward(diff::scale(obj.value, -1.0));
        const auto grads = gradients(vars);
        const auto params = model.parameters();
        diff::adam_step(params, grads, adam);
        ++step;
        if (step % eval_every == 0) record();
      }
    }
  } catch (const NumericalError& e) {
    result.diverged = true;
    result.failure = e.what();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Exact-posterior reference and gap evaluation
// ---------------------------------------------------------------------------

/// Metrics of the analytic posterior on the test split: the reference lines
/// of the ELBO/dependence trade-off.
struct ExactReference {
  double test_loglik = 0.0;
  double test_hsic = 0.0;     // mean over seeds, one posterior draw per test row
  double test_pearson = 0.0;  // on exact posterior means
};

/// One exact-posterior draw per row of x, split into (u, v) blocks.
inline std::pair<Matrix, Matrix> exact_posterior_draws(const LinGaussModel& model, const Matrix& x, std::mt19937_64& rng) {
  const auto op = posterior_operator(model);
  const auto llt = spd_cholesky(op.covariance, "exact posterior covariance");
  const Matrix eps = standard_normal(x.rows(), op.covariance.rows(), rng);
  const Matrix z = op.means(x) + eps * Matrix(llt.matrixL()).transpose();
  return {z.middleCols(op.offset(LatentBlock::u), op.latent_u), z.middleCols(op.offset(LatentBlock::v), op.latent_v)};
}

inline ExactReference exact_reference(const ExperimentData& data, std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw InvalidInput("exact_reference: no seeds");
  const auto op = posterior_operator(data.model);
  ExactReference ref;
  ref.test_loglik = marginal_log_likelihood(data.model, data.test.x);
  const Matrix means = op.means(data.test.x);
  ref.test_pearson = pearson_correlation_sum(means.middleCols(op.offset(LatentBlock::u), op.latent_u),
                                             means.middleCols(op.offset(LatentBlock::v), op.latent_v));
  double hsic = 0.0;
  for (std::uint64_t s : seeds) {
    auto rng = detail::stream_rng(s, 20);
    const auto [zu, zv] = exact_posterior_draws(data.model, data.test.x, rng);
    hsic += hsic_v_statistic(median_block(zu), median_block(zv));
  }
  ref.test_hsic = hsic / static_cast<double>(seeds.size());
  return ref;
}

/// Encoder's diagonal Gaussians for every row of x.
inline std::vector<MeanFieldPosterior> encoder_posteriors(const VariationalModel& m, const Matrix& x) {
  const auto e = encode(m, x);
  std::vector<MeanFieldPosterior> out;
  out.reserve(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.push_back({GaussianDistribution::diagonal(e.mu_u.row(i).transpose(), e.log_var_u.row(i).array().exp().transpose()),
                   GaussianDistribution::diagonal(e.mu_v.row(i).transpose(), e.log_var_v.row(i).array().exp().transpose())});
  }
  return out;
}

inline GapDecomposition evaluate_gap(const VariationalModel& m, const Matrix& x, const LinGaussModel& truth) {
  const auto dims = truth.dims();
  if (m.latent_u != dims.latent_u || m.latent_v != dims.latent_v || m.observed != dims.observed) {
    throw InvalidInput("evaluate_gap: variational model dims do not match the linear-Gaussian model");
  }
  return decompose_variational_gap(truth, encoder_posteriors(m, x), x);
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepPoint {
  Objective objective = Objective::vae;
  double weight = 0.0;  // beta or lambda; unused for vae

  std::string label() const {
    if (objective == Objective::vae) return "vae";
    std::ostringstream os;
    os << to_string(objective) << ":" << weight;
    return os.str();
  }

  friend bool operator==(const SweepPoint&, const SweepPoint&) = default;
};

/// VAE; beta-VAE with beta in {2, 4, 8}; HCV with lambda in {0.1, 1, 10, 100}.
inline std::vector<SweepPoint> default_sweep_grid() {
  return {{Objective::vae, 0.0},      {Objective::beta_vae, 2.0}, {Objective::beta_vae, 4.0},
          {Objective::beta_vae, 8.0}, {Objective::hcv, 0.1},      {Objective::hcv, 1.0},
          {Objective::hcv, 10.0},     {Objective::hcv, 100.0}};
}

inline TrainConfig config_for(TrainConfig base, const SweepPoint& p, std::uint64_t seed) {
  base.objective = p.objective;
  base.seed = seed;
  if (p.objective == Objective::beta_vae) base.beta = p.weight;
  if (p.objective == Objective::hcv) base.penalty_weight = p.weight;
  return base;
}

struct SweepRun {
  SweepPoint point;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string message;
  std::vector<TraceRecord> trace;
};

/// Per-grid-point means of the final records over successful seeds.
struct SweepRow {
  SweepPoint point;
  int runs = 0;
  int failed = 0;
  double test_elbo = 0.0;
  double test_elbo_se = 0.0;
  double test_hsic = 0.0;
  double test_pearson = 0.0;
};

struct SweepResult {
  std::vector<SweepRun> runs;  // grid-major, then seed order
  std::vector<SweepRow> rows;  // grid order
  ExactReference reference;
};

/// Runs every (grid point, seed) pair on `threads` workers (0 = hardware
/// concurrency). Runs share only the read-only data; results are keyed by
/// position, so aggregation does not depend on the schedule.
inline SweepResult sweep(const TrainConfig& base, std::span<const SweepPoint> grid, std::span<const std::uint64_t> seeds,
                         unsigned threads = 0) {
  if (grid.empty()) throw ConfigError("sweep: empty grid");
  if (seeds.empty()) throw ConfigError("sweep: no seeds");
  for (const auto& p : grid) config_for(base, p, seeds.front()).validate();

  const ExperimentData data = make_experiment_data(base);
  SweepResult result;
  result.reference = exact_reference(data, seeds);
  result.runs.resize(grid.size() * seeds.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      result.runs[g * seeds.size() + s].point = grid[g];
      result.runs[g * seeds.size() + s].seed = seeds[s];
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < result.runs.size(); i = next++) {
      auto& run = result.runs[i];
      try {
        auto r = train(config_for(base, run.point, run.seed), data);
        run.trace = std::move(r.trace);
        run.failed = r.diverged;
        run.message = r.failure;
      } catch (const Error& e) {
        run.failed = true;
        run.message = e.what();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(result.runs.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  for (std::size_t g = 0; g < grid.size(); ++g) {
    SweepRow row;
    row.point = grid[g];
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& run = result.runs[g * seeds.size() + s];
      ++row.runs;
      if (run.failed || run.trace.empty()) {
        ++row.failed;
        continue;
      }
      const auto& last = run.trace.back();
      row.test_elbo += last.test_elbo;
      row.test_elbo_se += last.test_elbo_se;
      row.test_hsic += last.test_hsic;
      row.test_pearson += last.test_pearson;
    }
    const int ok = row.runs - row.failed;
    if (ok > 0) {
      row.test_elbo /= ok;
      row.test_elbo_se /= ok;
      row.test_hsic /= ok;
      row.test_pearson /= ok;
    }
    result.rows.push_back(row);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: flat JSON list of named row-major arrays.
// Order: encoder.<i>.weight, encoder.<i>.bias, ..., decoder.<i>.weight, ...
// ---------------------------------------------------------------------------

inline nlohmann::json save_checkpoint(const VariationalModel& m) {
  nlohmann::json arrays = nlohmann::json::array();
  nlohmann::json activations = {{"encoder", nlohmann::json::array()}, {"decoder", nlohmann::json::array()}};
  auto emit = [&](const std::string& prefix, const diff::Mlp& mlp) {
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
      const auto& l = mlp.layers[i];
      activations[prefix].push_back(diff::to_string(l.activation));
      for (const auto& [suffix, mat] : {std::pair<const char*, const Matrix*>{"weight", &l.weights}, {"bias", &l.bias}}) {
        std::vector<double> values;
        values.reserve(static_cast<std::size_t>(mat->size()));
        for (Eigen::Index r = 0; r < mat->rows(); ++r) {
          for (Eigen::Index c = 0; c < mat->cols(); ++c) values.push_back((*mat)(r, c));
        }
        arrays.push_back({{"name", prefix + "." + std::to_string(i) + "." + suffix},
                          {"shape", {mat->rows(), mat->cols()}},
                          {"data", values}});
      }
    }
  };
  emit("encoder", m.encoder);
  emit("decoder", m.decoder);
  nlohmann::json out = {{"format", "hcv-checkpoint-v1"},
                        {"latent_u", m.latent_u},
                        {"latent_v", m.latent_v},
                        {"observed", m.observed},
                        {"learn_decoder_variance", m.learn_decoder_variance},
                        {"activations", activations},
                        {"arrays", arrays}};
  out["decoder_kind"] = m.fixed_decoder ? "true_model" : "learned";
  if (m.fixed_decoder) out["true_model"] = io::model_to_json(m.fixed_decoder->model, 0);
  return out;
}

inline VariationalModel load_checkpoint(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "hcv-checkpoint-v1") throw InvalidInput("checkpoint: unknown format");
    VariationalModel m;
    m.latent_u = j.at("latent_u").get<int>();
    m.latent_v = j.at("latent_v").get<int>();
    m.observed = j.at("observed").get<int>();
    m.learn_decoder_variance = j.at("learn_decoder_variance").get<bool>();
    std::map<std::string, Matrix> arrays;
    for (const auto& a : j.at("arrays")) {
      const auto shape = a.at("shape").get<std::vector<Eigen::Index>>();
      const auto data = a.at("data").get<std::vector<double>>();
      if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Eigen::Index>(data.size())) {
        throw InvalidInput("checkpoint: array '" + a.at("name").get<std::string>() + "' has inconsistent shape");
      }
      Matrix mat(shape[0], shape[1]);
      for (Eigen::Index r = 0; r < shape[0]; ++r) {
        for (Eigen::Index c = 0; c < shape[1]; ++c) mat(r, c) = data[static_cast<std::size_t>(r * shape[1] + c)];
      }
      arrays[a.at("name").get<std::string>()] = std::move(mat);
    }
    auto load = [&](const std::string& prefix, diff::Mlp& mlp) {
      const auto acts = j.at("activations").at(prefix).get<std::vector<std::string>>();
      for (std::size_t i = 0; i < acts.size(); ++i) {
        const auto base = prefix + "." + std::to_string(i) + ".";
        if (!arrays.count(base + "weight") || !arrays.count(base + "bias")) {
          throw InvalidInput("checkpoint: missing arrays for " + prefix + " layer " + std::to_string(i));
        }
        mlp.layers.push_back({arrays[base + "weight"], arrays[base + "bias"], diff::activation_from_string(acts[i])});
      }
    };
    load("encoder", m.encoder);
    load("decoder", m.decoder);
    if (j.value("decoder_kind", std::string("learned")) == "true_model") {
      m.fixed_decoder = FixedLinearDecoder::from(io::model_from_json(j.at("true_model")));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace hcv
