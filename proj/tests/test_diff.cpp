#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "hcv/diff.hpp"
#include "hcv/independence.hpp"
#include "oracles.hpp"

namespace d = hcv::diff;
using hcv::Matrix;

namespace {

using Builder = std::function<d::Var(d::Graph&, const d::Var&)>;

// Reverse-mode gradient of a scalar-valued builder against central differences.
void expect_gradient(const Builder& build, const Matrix& at, double tol = 1e-6) {
  d::Graph g;
  const auto x = g.variable(at);
  const auto y = build(g, x);
  g.backward(y);
  const Matrix analytic = x.grad();
  const Matrix numeric = oracle::finite_difference(
      [&](const Matrix& p) {
        d::Graph h;
        return build(h, h.variable(p)).scalar();
      },
      at);
  EXPECT_LT(oracle::relative_error(analytic, numeric), tol) << "analytic\n" << analytic << "\nnumeric\n" << numeric;
}

Matrix rnd(int r, int c, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return oracle::normal(r, c, rng, sd);
}

}  // namespace

TEST(Diff, ElementwiseOps) {
  const Matrix a = rnd(3, 4, 1), b = rnd(3, 4, 2);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::mul(x, g.constant(b))); }, a);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::sub(d::add(x, g.constant(b)), d::scale(x, 3.0))); }, a);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::sum(d::tanh(x)); }, a);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::sum(d::softplus(x)); }, a);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::sum(d::exp(x)); }, a);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::sum(d::square(d::add_scalar(x, 0.3))); }, a);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::mean(d::mul(x, x)); }, a);
}

TEST(Diff, ClampPassesGradientOnlyInside) {
  Matrix a(1, 3);
  a << -2.0, 0.5, 2.0;
  d::Graph g;
  const auto x = g.variable(a);
  g.backward(d::sum(d::clamp(x, -1.0, 1.0)));
  EXPECT_EQ(x.grad()(0, 0), 0.0);
  EXPECT_EQ(x.grad()(0, 1), 1.0);
  EXPECT_EQ(x.grad()(0, 2), 0.0);
}

TEST(Diff, MatrixOps) {
  const Matrix a = rnd(3, 4, 3), w = rnd(5, 4, 4), r = rnd(1, 4, 5), m = rnd(4, 2, 6);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::square(d::matmul_nt(x, g.constant(w)))); }, a);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::square(d::matmul_nt(g.constant(w), x))); }, a);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::tanh(d::matmul(x, g.constant(m)))); }, a);
  const Matrix left = rnd(2, 3, 16), other = rnd(3, 2, 17);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::tanh(d::matmul(g.constant(left), x))); }, a);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::square(d::add_row(g.constant(a), x))); }, r);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::sum(d::square(d::row_sum(x))); }, a);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::sum(d::square(d::slice_cols(x, 1, 2))); }, a);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::tanh(d::concat_cols(g.constant(other), x))); }, a);
  expect_gradient([&](d::Graph& g, const d::Var& x) { return d::sum(d::tanh(d::concat_cols(x, g.constant(other)))); }, a);
}

TEST(Diff, PairwiseDistancesAndKernels) {
  const Matrix z = rnd(6, 2, 7);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::sum(d::square(d::pairwise_sq_dists(x))); }, z);
  expect_gradient([](d::Graph&, const d::Var& x) { return d::sum(d::gaussian_gram(x, 0.7)); }, z);
}

TEST(Diff, HsicThroughKernels) {
  const Matrix z = rnd(12, 3, 8);
  const Builder hsic = [](d::Graph&, const d::Var& x) {
    return d::hsic_v(d::gaussian_gram(d::slice_cols(x, 0, 1), 0.8), d::gaussian_gram(d::slice_cols(x, 1, 2), 0.6));
  };
  expect_gradient(hsic, z, 1e-5);
  const Builder dhsic = [](d::Graph&, const d::Var& x) {
    std::vector<d::Var> grams;
    for (int j = 0; j < 3; ++j) grams.push_back(d::gaussian_gram(d::slice_cols(x, j, 1), 0.5 + 0.2 * j));
    return d::dhsic_v(grams);
  };
  expect_gradient(dhsic, z, 1e-5);

  d::Graph g;
  const auto x = g.constant(z);
  const double graph_value = d::hsic_v(d::gaussian_gram(d::slice_cols(x, 0, 1), 0.8),
                                       d::gaussian_gram(d::slice_cols(x, 1, 2), 0.6)).scalar();
  const double lib = hcv::hsic_v_statistic({z.leftCols(1), hcv::KernelSpec::gaussian(0.8)},
                                           {z.rightCols(2), hcv::KernelSpec::gaussian(0.6)});
  EXPECT_NEAR(graph_value, lib, 1e-14);
}

TEST(Diff, GaussianHelpers) {
  const Matrix mu = rnd(4, 3, 9), lv = rnd(4, 3, 10, 0.3), noise = rnd(4, 3, 11), x = rnd(4, 3, 12);
  expect_gradient([&](d::Graph& g, const d::Var& m) { return d::gaussian_log_density(x, m, g.constant(lv)); }, mu);
  expect_gradient([&](d::Graph& g, const d::Var& l) { return d::gaussian_log_density(x, g.constant(mu), l); }, lv);
  expect_gradient([&](d::Graph& g, const d::Var& m) { return d::kl_to_standard_normal(m, g.constant(lv)); }, mu);
  expect_gradient([&](d::Graph& g, const d::Var& l) { return d::kl_to_standard_normal(g.constant(mu), l); }, lv);
  expect_gradient(
      [&](d::Graph& g, const d::Var& l) { return d::sum(d::square(d::reparameterized_gaussian_sample(g.constant(mu), l, noise))); },
      lv);

  // Values against the scalar formulas.
  d::Graph g;
  const auto m = g.constant(mu), l = g.constant(lv);
  double log_density = 0, kl = 0;
  for (int i = 0; i < mu.size(); ++i) {
    log_density += -0.5 * (std::log(2 * M_PI) + lv(i) + std::pow(x(i) - mu(i), 2) / std::exp(lv(i)));
    kl += 0.5 * (std::exp(lv(i)) + mu(i) * mu(i) - 1 - lv(i));
  }
  EXPECT_NEAR(d::gaussian_log_density(x, m, l).scalar(), log_density, 1e-12);
  EXPECT_NEAR(d::kl_to_standard_normal(m, l).scalar(), kl, 1e-12);
  const Matrix z = d::reparameterized_gaussian_sample(m, l, noise).value();
  EXPECT_LT((z - (mu.array() + (0.5 * lv.array()).exp() * noise.array()).matrix()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Diff, MlpGradients) {
  std::mt19937_64 rng(13);
  const auto mlp = d::make_mlp(3, {5, 4}, 2, d::Activation::tanh, rng);
  const Matrix input = rnd(6, 3, 14);
  d::Graph g;
  const auto vars = d::bind(g, mlp);
  g.backward(d::sum(d::square(d::forward_mlp(mlp, vars, g.constant(input)))));
  const auto grads = d::gradients(vars);
  auto copy = mlp;
  const auto params = d::parameters(copy);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Matrix numeric = oracle::finite_difference(
        [&](const Matrix& v) {
          auto m2 = mlp;
          *d::parameters(m2)[p] = v;
          return d::forward_values(m2, input).squaredNorm();
        },
        *params[p]);
    EXPECT_LT(oracle::relative_error(grads[p], numeric), 1e-6) << "parameter " << p;
  }
  d::Graph h;
  EXPECT_LT((d::forward_mlp(mlp, d::bind(h, mlp, false), h.constant(input)).value() - d::forward_values(mlp, input))
                .cwiseAbs()
                .maxCoeff(),
            1e-15);
}

TEST(Diff, GlorotInitRange) {
  std::mt19937_64 rng(15);
  const auto layer = d::make_dense_layer(10, 6, d::Activation::tanh, rng);
  EXPECT_LE(layer.weights.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 16.0));
  EXPECT_EQ(layer.bias, Matrix::Zero(1, 6));
}

TEST(Diff, TapeIsSingleShot) {
  d::Graph g;
  const auto x = g.variable(Matrix::Ones(2, 2));
  const auto y = d::sum(x);
  EXPECT_THROW(x.grad(), hcv::Error);
  g.backward(y);
  EXPECT_THROW(g.backward(y), hcv::Error);
  EXPECT_THROW(g.constant(Matrix::Ones(1, 1)), hcv::Error);
}

TEST(Diff, NonFiniteForwardThrows) {
  d::Graph g;
  const auto x = g.variable(Matrix::Constant(1, 1, 1000.0));
  EXPECT_THROW(d::exp(x), hcv::NumericalError);
}

TEST(Diff, ShapeErrors) {
  d::Graph g;
  const auto a = g.variable(Matrix::Ones(2, 3)), b = g.variable(Matrix::Ones(3, 2));
  EXPECT_THROW(d::add(a, b), hcv::InvalidInput);
  EXPECT_THROW(d::matmul(a, a), hcv::InvalidInput);
  EXPECT_THROW(g.backward(a), hcv::InvalidInput);
  d::Graph other;
  EXPECT_THROW(d::add(a, other.variable(Matrix::Ones(2, 3))), hcv::InvalidInput);
}

TEST(Diff, ConstantsReceiveNoGradientWork) {
  d::Graph g;
  const auto c = g.constant(Matrix::Ones(2, 2));
  const auto y = d::sum(d::exp(c));
  EXPECT_FALSE(g.needs_grad(y));
}

TEST(Adam, HandComputedSteps) {
  Matrix p(1, 2);
  p << 1.0, -2.0;
  d::AdamState state;
  state.options.lr = 0.1;
  std::vector<Matrix*> params{&p};
  Matrix g1(1, 2), g2(1, 2);
  g1 << 0.5, -1.0;
  g2 << 0.2, 0.4;
  d::adam_step(params, std::vector<Matrix>{g1}, state);
  // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  EXPECT_NEAR(p(0, 0), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(p(0, 1), -2.0 + 0.1 * 1.0 / (1.0 + 1e-8), 1e-15);
  const Matrix before = p;
  d::adam_step(params, std::vector<Matrix>{g2}, state);
  for (int i = 0; i < 2; ++i) {
    const double m = 0.9 * (0.1 * g1(i)) + 0.1 * g2(i);
    const double v = 0.999 * (0.001 * g1(i) * g1(i)) + 0.001 * g2(i) * g2(i);
    const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
    EXPECT_NEAR(p(0, i), before(0, i) - 0.1 * mh / (std::sqrt(vh) + 1e-8), 1e-14);
  }
}

TEST(Adam, MinimizesQuadratic) {
  Matrix p = Matrix::Constant(1, 3, 5.0);
  d::AdamState state;
  state.options.lr = 0.05;
  std::vector<Matrix*> params{&p};
  for (int i = 0; i < 2000; ++i) d::adam_step(params, std::vector<Matrix>{2.0 * (p.array() - 1.0).matrix()}, state);
  EXPECT_LT((p.array() - 1.0).abs().maxCoeff(), 1e-3);
}
