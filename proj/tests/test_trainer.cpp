#include <gtest/gtest.h>

#include "gradient_check.hpp"
#include "hcv/trainer.hpp"
#include "oracles.hpp"

using hcv::Matrix;
using hcv::Objective;
using hcv::TrainConfig;

namespace {

TrainConfig tiny(Objective o = Objective::vae) {
  TrainConfig c;
  c.objective = o;
  c.dims = {2, 2, 2, 6};
  c.encoder_hidden = {8};
  c.decoder_hidden = {8};
  c.batch_size = 32;
  c.epochs = 3;
  c.lr = 5e-3;
  c.n_train = 512;
  c.n_test = 128;
  return c;
}

void expect_same_trace(const std::vector<hcv::TraceRecord>& a, const std::vector<hcv::TraceRecord>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].step, b[i].step);
    EXPECT_EQ(a[i].train_elbo, b[i].train_elbo);
    EXPECT_EQ(a[i].test_elbo, b[i].test_elbo);
    EXPECT_EQ(a[i].test_hsic, b[i].test_hsic);
    EXPECT_EQ(a[i].test_pearson, b[i].test_pearson);
    EXPECT_EQ(a[i].penalty, b[i].penalty);
  }
}

hcv::VariationalModel prior_encoder_model(int observed, const Matrix& dec_mu, const Matrix& dec_lv) {
  TrainConfig c = tiny();
  c.dims = {1, 1, 1, observed};
  c.decoder = hcv::DecoderKind::learned;
  std::mt19937_64 rng(1);
  auto m = hcv::make_variational_model(c, rng);
  for (auto& l : m.encoder.layers) {
    l.weights.setZero();
    l.bias.setZero();
  }
  auto& last = m.decoder.layers.back();
  last.weights.setZero();
  last.bias << dec_mu, dec_lv;
  return m;
}

}  // namespace

TEST(Config, Validation) {
  auto c = tiny(Objective::hcv);
  c.batch_size = 8;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const hcv::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("batch_size"), std::string::npos);
  }
  c = tiny();
  c.penalty_weight = -1;
  EXPECT_THROW(c.validate(), hcv::ConfigError);
  c = tiny();
  c.beta = 0.5;
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTripAndUnknownFields) {
  auto c = tiny(Objective::beta_vae);
  c.beta = 3.5;
  c.grouping = hcv::PenaltyGrouping::coordinates;
  c.decoder = hcv::DecoderKind::learned;
  const auto back = hcv::config_from_json(hcv::to_json(c));
  EXPECT_EQ(hcv::to_json(back), hcv::to_json(c));
  EXPECT_THROW(hcv::config_from_json(nlohmann::json{{"bogus", 1}}), hcv::ConfigError);
  EXPECT_THROW(hcv::config_from_json(nlohmann::json{{"objective", "gan"}}), hcv::ConfigError);
  EXPECT_THROW(hcv::config_from_json(nlohmann::json{{"epochs", "many"}}), hcv::ConfigError);
}

TEST(Elbo, PriorEncoderAndConstantDecoder) {
  Matrix mu(1, 3), lv(1, 3);
  mu << 0.5, -1.0, 2.0;
  lv << 0.3, -0.2, 1.0;
  const auto m = prior_encoder_model(3, mu, lv);
  std::mt19937_64 rng(2);
  const Matrix x = oracle::normal(10, 3, rng);
  const auto noise = hcv::draw_noise(10, m, rng);
  double expected = 0;
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 3; ++j) {
      expected += -0.5 * (std::log(2 * M_PI) + lv(j) + std::pow(x(i, j) - mu(j), 2) / std::exp(lv(j)));
    }
  }
  expected /= 10;
  hcv::diff::Graph g;
  const auto vars = hcv::bind(g, m);
  const auto t = hcv::forward_terms(g, m, vars, x, noise);
  EXPECT_NEAR(t.kl.scalar(), 0.0, 1e-15);
  EXPECT_NEAR(hcv::diff::sub(t.reconstruction, t.kl).scalar(), expected, 1e-12);
  EXPECT_NEAR(hcv::pointwise_elbo(m, x, noise).elbo.mean(), expected, 1e-12);
}

TEST(Elbo, HugeDecoderVarianceGivesReconstructionFloor) {
  // One observed dim, log-variance at the clamp: ELBO -> -0.5 (log 2 pi + 10) for x near the mean.
  Matrix mu(1, 1), lv(1, 1);
  mu << 0.0;
  lv << 50.0;  // clamped to 10
  const auto m = prior_encoder_model(1, mu, lv);
  Matrix x(2, 1);
  x << 0.0, 0.0;
  std::mt19937_64 rng(3);
  const auto pe = hcv::pointwise_elbo(m, x, hcv::draw_noise(2, m, rng));
  EXPECT_NEAR(pe.elbo(0), -0.5 * (std::log(2 * M_PI) + 10.0), 1e-12);
}

TEST(Elbo, FixedDecoderIsTheTrueLikelihood) {
  auto c = tiny();
  const auto data = hcv::make_experiment_data(c);
  std::mt19937_64 rng(4);
  const auto m = hcv::make_variational_model(c, rng, &data.model);
  ASSERT_TRUE(m.fixed_decoder.has_value());
  EXPECT_TRUE(m.decoder.layers.empty());
  const Matrix x = data.test.x.topRows(5);
  const auto noise = hcv::draw_noise(5, m, rng);
  const auto pe = hcv::pointwise_elbo(m, x, noise);
  const auto noise_dist = data.model.noise_covariance();
  for (int i = 0; i < 5; ++i) {
    const hcv::Vector mean = data.model.a * pe.z_v.row(i).transpose() + data.model.b * pe.z_u.row(i).transpose();
    const double recon = hcv::GaussianDistribution::full(mean, noise_dist).log_density(x.row(i).transpose());
    double kl = 0;
    const Matrix& mu_u = pe.enc.mu_u;
    const Matrix& lv_u = pe.enc.log_var_u;
    const Matrix& mu_v = pe.enc.mu_v;
    const Matrix& lv_v = pe.enc.log_var_v;
    for (int j = 0; j < mu_u.cols(); ++j) kl += 0.5 * (std::exp(lv_u(i, j)) + mu_u(i, j) * mu_u(i, j) - 1 - lv_u(i, j));
    for (int j = 0; j < mu_v.cols(); ++j) kl += 0.5 * (std::exp(lv_v(i, j)) + mu_v(i, j) * mu_v(i, j) - 1 - lv_v(i, j));
    EXPECT_NEAR(pe.elbo(i), recon - kl, 1e-10);
  }
  hcv::diff::Graph g;
  const auto vars = hcv::bind(g, m);
  EXPECT_NEAR(hcv::elbo(g, m, vars, x, noise).scalar(), pe.elbo.mean(), 1e-10);
}

TEST(Objective, ReductionsToVae) {
  for (auto decoder : {hcv::DecoderKind::learned, hcv::DecoderKind::true_model}) {
    auto vae = tiny();
    vae.decoder = decoder;
    vae.epochs = 2;
    auto h0 = vae;
    h0.objective = Objective::hcv;
    h0.penalty_weight = 0.0;
    auto b1 = vae;
    b1.objective = Objective::beta_vae;
    b1.beta = 1.0;
    const auto data = hcv::make_experiment_data(vae);
    const auto a = hcv::train(vae, data);
    expect_same_trace(a.trace, hcv::train(h0, data).trace);
    expect_same_trace(a.trace, hcv::train(b1, data).trace);
  }
}

TEST(Objective, PenaltyMatchesStandaloneEstimator) {
  for (auto grouping : {hcv::PenaltyGrouping::groups, hcv::PenaltyGrouping::coordinates}) {
    auto c = tiny(Objective::hcv);
    c.penalty_weight = 7.0;
    c.grouping = grouping;
    const auto data = hcv::make_experiment_data(c);
    std::mt19937_64 rng(5);
    const auto m = hcv::make_variational_model(c, rng, &data.model);
    const Matrix x = data.train.x.topRows(32);
    const auto noise = hcv::draw_noise(32, m, rng);
    hcv::diff::Graph g;
    const auto vars = hcv::bind(g, m);
    const auto o = hcv::objective(g, m, vars, c, x, noise);
    const double standalone = hcv::dependence_estimate(c, o.forward.z_u.value(), o.forward.z_v.value());
    EXPECT_NEAR(o.penalty.scalar(), standalone, 1e-10);
    EXPECT_NEAR(o.value.scalar(), o.elbo.scalar() - 7.0 * standalone, 1e-10);
  }
}

TEST(Objective, BetaScalesKl) {
  auto c = tiny(Objective::beta_vae);
  c.beta = 4.0;
  const auto data = hcv::make_experiment_data(c);
  std::mt19937_64 rng(6);
  const auto m = hcv::make_variational_model(c, rng, &data.model);
  const Matrix x = data.train.x.topRows(32);
  const auto noise = hcv::draw_noise(32, m, rng);
  hcv::diff::Graph g;
  const auto vars = hcv::bind(g, m);
  const auto o = hcv::objective(g, m, vars, c, x, noise);
  EXPECT_NEAR(o.value.scalar(), o.forward.reconstruction.scalar() - 4.0 * o.forward.kl.scalar(), 1e-12);
}

TEST(Objective, SmallHcvBatchIsAConfigError) {
  auto c = tiny(Objective::hcv);
  c.penalty_weight = 1.0;
  const auto data = hcv::make_experiment_data(c);
  std::mt19937_64 rng(7);
  const auto m = hcv::make_variational_model(c, rng, &data.model);
  const Matrix x = data.train.x.topRows(8);
  hcv::diff::Graph g;
  EXPECT_THROW(hcv::objective(g, m, hcv::bind(g, m), c, x, hcv::draw_noise(8, m, rng)), hcv::ConfigError);
}

TEST(Gradients, AllObjectivesMatchFiniteDifferences) {
  std::uint64_t seed = 100;
  for (auto decoder : {hcv::DecoderKind::learned, hcv::DecoderKind::true_model}) {
    for (auto [o, w] : {std::pair{Objective::vae, 0.0}, {Objective::beta_vae, 3.0}, {Objective::hcv, 50.0}}) {
      const auto s = gradcheck::random_setting(seed++, o, w, decoder);
      const auto r = gradcheck::check(s.model, s.config, s.x, s.noise);
      EXPECT_LT(r.max_relative_error, 1e-4) << hcv::to_string(o) << " " << hcv::to_string(decoder);
    }
  }
  auto s = gradcheck::random_setting(seed, Objective::hcv, 20.0, hcv::DecoderKind::true_model);
  s.config.grouping = hcv::PenaltyGrouping::coordinates;
  EXPECT_LT(gradcheck::check(s.model, s.config, s.x, s.noise).max_relative_error, 1e-4);
}

TEST(Train, DeterministicAndImproves) {
  const auto c = tiny(Objective::hcv);
  const auto data = hcv::make_experiment_data(c);
  const auto a = hcv::train(c, data);
  const auto b = hcv::train(c, data);
  ASSERT_FALSE(a.diverged) << a.failure;
  expect_same_trace(a.trace, b.trace);
  ASSERT_EQ(a.trace.size(), 4u);
  EXPECT_EQ(a.trace.front().step, 0);
  for (std::size_t i = 1; i < a.trace.size(); ++i) EXPECT_GT(a.trace[i].step, a.trace[i - 1].step);
  EXPECT_GT(a.trace.back().test_elbo, a.trace.front().test_elbo);
}

TEST(Train, EvalEveryInSteps) {
  auto c = tiny();
  c.epochs = 1;
  c.eval_every = 5;
  const auto r = hcv::train(c, hcv::make_experiment_data(c));
  ASSERT_EQ(r.trace.size(), 4u);  // steps 0, 5, 10, 15 of 16
  EXPECT_EQ(r.trace[3].step, 15);
}

TEST(Train, ElboBoundedByExactLikelihood) {
  auto c = tiny();
  c.epochs = 5;
  const auto data = hcv::make_experiment_data(c);
  const auto r = hcv::train(c, data);
  const double ll = hcv::marginal_log_likelihood(data.model, data.test.x);
  for (const auto& rec : r.trace) EXPECT_LE(rec.test_elbo, ll + 3 * rec.test_elbo_se);
}

TEST(Gap, UntrainedEncoderAndIdentity) {
  const auto c = tiny();
  const auto data = hcv::make_experiment_data(c);
  std::mt19937_64 rng(8);
  const auto m = hcv::make_variational_model(c, rng, &data.model);
  const auto gap = hcv::evaluate_gap(m, data.test.x, data.model);
  EXPECT_GT(gap.total_gap, 0.1);
  EXPECT_NEAR(gap.total_gap, gap.marginal_kl_sum + gap.coupling_term, 1e-10);
  // ELBO gap consistency: log p(x) - E_q ELBO equals the mean KL to the exact posterior.
  const double ll = hcv::marginal_log_likelihood(data.model, data.test.x);
  double elbo_sum = 0;
  const int reps = 200;
  for (int k = 0; k < reps; ++k) {
    elbo_sum += hcv::pointwise_elbo(m, data.test.x, hcv::draw_noise(data.test.x.rows(), m, rng)).elbo.mean();
  }
  EXPECT_NEAR(ll - elbo_sum / reps, gap.total_gap, 0.05 * gap.total_gap);
}

TEST(Reference, ExactPosteriorMetrics) {
  auto c = tiny();
  c.n_test = 400;
  const auto data = hcv::make_experiment_data(c);
  const std::uint64_t seeds[] = {0, 1};
  const auto ref = hcv::exact_reference(data, seeds);
  EXPECT_EQ(ref.test_loglik, hcv::marginal_log_likelihood(data.model, data.test.x));
  EXPECT_GT(ref.test_hsic, 0.0);
  EXPECT_GT(ref.test_pearson, 0.0);
}

TEST(Checkpoint, RoundTrip) {
  for (auto decoder : {hcv::DecoderKind::learned, hcv::DecoderKind::true_model}) {
    auto c = tiny();
    c.decoder = decoder;
    const auto data = hcv::make_experiment_data(c);
    std::mt19937_64 rng(9);
    const auto m = hcv::make_variational_model(c, rng, &data.model);
    const auto j = nlohmann::json::parse(hcv::save_checkpoint(m).dump());
    const auto back = hcv::load_checkpoint(j);
    auto noise_rng = std::mt19937_64(1);
    const auto noise = hcv::draw_noise(10, m, noise_rng);
    EXPECT_EQ(hcv::pointwise_elbo(m, data.test.x.topRows(10), noise).elbo,
              hcv::pointwise_elbo(back, data.test.x.topRows(10), noise).elbo);
  }
  EXPECT_THROW(hcv::load_checkpoint(nlohmann::json{{"format", "other"}}), hcv::InvalidInput);
}

TEST(Sweep, AggregatesPerGridPointIndependentOfThreads) {
  auto c = tiny();
  c.epochs = 1;
  const std::vector<hcv::SweepPoint> grid{{Objective::vae, 0.0}, {Objective::hcv, 10.0}};
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto one = hcv::sweep(c, grid, seeds, 1);
  const auto many = hcv::sweep(c, grid, seeds, 3);
  ASSERT_EQ(one.rows.size(), 2u);
  EXPECT_EQ(one.rows[0].runs, 3);
  double mean = 0;
  for (int s = 0; s < 3; ++s) mean += one.runs[static_cast<std::size_t>(s)].trace.back().test_hsic / 3;
  EXPECT_NEAR(one.rows[0].test_hsic, mean, 1e-15);
  for (std::size_t i = 0; i < one.runs.size(); ++i) expect_same_trace(one.runs[i].trace, many.runs[i].trace);
  EXPECT_THROW(hcv::sweep(c, {}, seeds), hcv::ConfigError);
}

TEST(Sweep, DefaultGrid) {
  const auto g = hcv::default_sweep_grid();
  ASSERT_EQ(g.size(), 8u);
  EXPECT_EQ(g[0].objective, Objective::vae);
  EXPECT_EQ(g[7].weight, 100.0);
}
