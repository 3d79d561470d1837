#include <gtest/gtest.h>

#include <cmath>

#include "hidi/nn.hpp"

using namespace hidi;

namespace {

Mlp make_net(std::vector<int> widths, Activation act = Activation::mish,
             OutputActivation out = OutputActivation::identity, double scale = 1.0) {
  MlpSpec spec;
  spec.layer_widths = std::move(widths);
  spec.activation = act;
  spec.output_activation = out;
  spec.output_scale = scale;
  return Mlp(spec, "net");
}

Mat random_mat(int r, int c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m(k) = n(rng);
  return m;
}

// plain scalar reference of x * tanh(log(1 + e^x))
double mish_reference(double x) { return x * std::tanh(std::log1p(std::exp(x))); }

}  // namespace

TEST(Mlp, ZeroWeightsGiveZeroOutput) {
  auto net = make_net({3, 5, 2});
  ParamStore store;
  Rng rng(1);
  net.init(store, rng);
  for (std::size_t i = 0; i < store.size(); ++i) store.value_mut(i).setZero();
  Vec x(3);
  x << 0.3, -2.0, 7.0;
  EXPECT_TRUE(mlp_predict(store, net, x).isZero(0.0));
}

TEST(Mlp, IdentityLayerPassesInputThrough) {
  auto net = make_net({4, 4}, Activation::identity);
  ParamStore store;
  Rng rng(2);
  net.init(store, rng);
  store.value_mut("net/W0") = Mat::Identity(4, 4);
  Vec x(4);
  x << 1.0, -2.0, 0.5, 9.0;
  EXPECT_EQ(mlp_predict(store, net, x), x);
}

TEST(Mlp, TwoThreeOneMatchesHandComputation) {
  auto net = make_net({2, 3, 1});
  ParamStore store;
  Rng rng(3);
  net.init(store, rng);
  Mat w0(3, 2);
  w0 << 0.1, -0.2, 0.3, 0.4, -0.5, 0.6;
  Mat b0(3, 1);
  b0 << 0.01, -0.02, 0.03;
  Mat w1(1, 3);
  w1 << 0.7, -0.8, 0.9;
  Mat b1(1, 1);
  b1 << -0.1;
  store.value_mut("net/W0") = w0;
  store.value_mut("net/b0") = b0;
  store.value_mut("net/W1") = w1;
  store.value_mut("net/b1") = b1;

  const double x0 = 0.5, x1 = -0.5;
  const double z0 = 0.1 * x0 - 0.2 * x1 + 0.01;
  const double z1 = 0.3 * x0 + 0.4 * x1 - 0.02;
  const double z2 = -0.5 * x0 + 0.6 * x1 + 0.03;
  const double expected = 0.7 * mish_reference(z0) - 0.8 * mish_reference(z1) + 0.9 * mish_reference(z2) - 0.1;

  Vec x(2);
  x << x0, x1;
  EXPECT_NEAR(mlp_predict(store, net, x)(0), expected, 1e-15);
}

TEST(Mlp, ShapeMismatchIsConfigError) {
  auto net = make_net({3, 2});
  ParamStore store;
  Rng rng(4);
  net.init(store, rng);
  EXPECT_THROW(mlp_forward(store, net, Mat::Zero(2, 1)), config_error);
  store.value_mut("net/W0") = Mat::Zero(2, 2);
  EXPECT_THROW(mlp_forward(store, net, Mat::Zero(3, 1)), config_error);
  EXPECT_THROW(make_net({3}), config_error);
  EXPECT_THROW(make_net({3, 0}), config_error);
}

TEST(Mlp, MissingParameterIsConfigError) {
  auto net = make_net({3, 2});
  ParamStore store;
  EXPECT_THROW(mlp_forward(store, net, Mat::Zero(3, 1)), config_error);
}

TEST(Mlp, WideBatchMatchesPerColumn) {
  auto net = make_net({3, 8, 2});
  ParamStore store;
  Rng rng(5);
  net.init(store, rng);
  Mat x = random_mat(3, 600, rng);
  Mat y = mlp_predict(store, net, x);
  for (Eigen::Index c : {0, 255, 256, 599}) {
    Vec yc = mlp_predict(store, net, Vec(x.col(c)));
    EXPECT_LT((yc - y.col(c)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Mlp, InitRespectsFanInBound) {
  auto net = make_net({16, 4, 1});
  ParamStore store;
  Rng rng(6);
  net.init(store, rng);
  EXPECT_LE(store.value("net/W0").cwiseAbs().maxCoeff(), 0.25);
  EXPECT_LE(store.value("net/W1").cwiseAbs().maxCoeff(), 0.5);
  EXPECT_TRUE(store.value("net/b0").isZero(0.0));
}

TEST(Mlp, TanhScaledOutputIsBounded) {
  auto net = make_net({2, 4, 3}, Activation::relu, OutputActivation::tanh_scaled, 2.5);
  ParamStore store;
  Rng rng(7);
  net.init(store, rng);
  Mat x = 100.0 * random_mat(2, 50, rng);
  Mat y = mlp_predict(store, net, x);
  EXPECT_LE(y.cwiseAbs().maxCoeff(), 2.5);
}

TEST(Backward, ZeroOutputGradLeavesGradsZero) {
  auto net = make_net({3, 4, 2});
  ParamStore store;
  Rng rng(8);
  net.init(store, rng);
  auto tape = mlp_forward(store, net, random_mat(3, 5, rng));
  Mat dx = mlp_backward(store, tape, Mat::Zero(2, 5));
  EXPECT_TRUE(dx.isZero(0.0));
  for (std::size_t i = 0; i < store.size(); ++i) EXPECT_TRUE(store.grad(i).isZero(0.0));
}

TEST(Backward, LinearNetInputGradIsWTransposeTimesUpstream) {
  auto net = make_net({3, 2}, Activation::identity);
  ParamStore store;
  Rng rng(9);
  net.init(store, rng);
  auto tape = mlp_forward(store, net, random_mat(3, 1, rng));
  Mat g = random_mat(2, 1, rng);
  Mat dx = mlp_backward(store, tape, g);
  EXPECT_LT((dx - store.value("net/W0").transpose() * g).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Backward, StaleTapeIsUsageError) {
  auto net = make_net({2, 2});
  ParamStore store;
  Rng rng(10);
  net.init(store, rng);
  auto tape = mlp_forward(store, net, Mat::Ones(2, 1));
  store.value_mut("net/b0")(0) = 1.0;
  EXPECT_THROW(mlp_backward(store, tape, Mat::Ones(2, 1)), usage_error);
}

TEST(Backward, OutputGradShapeMismatchIsConfigError) {
  auto net = make_net({2, 2});
  ParamStore store;
  Rng rng(11);
  net.init(store, rng);
  auto tape = mlp_forward(store, net, Mat::Ones(2, 3));
  EXPECT_THROW(mlp_backward(store, tape, Mat::Ones(2, 1)), config_error);
}

class BackwardFiniteDiff : public ::testing::TestWithParam<int> {};

// Random nets of every activation kind; checks parameter gradients and the
// input gradient against central differences.
TEST_P(BackwardFiniteDiff, MatchesCentralDifferences) {
  const int trial = GetParam();
  Rng rng(100 + trial);
  const Activation acts[] = {Activation::mish, Activation::relu, Activation::identity};
  const Activation act = acts[trial % 3];
  const auto out = trial % 2 == 0 ? OutputActivation::identity : OutputActivation::tanh_scaled;
  auto net = make_net({3, 6, 5, 2}, act, out, 1.7);
  ParamStore store;
  net.init(store, rng);
  for (std::size_t i = 0; i < store.size(); ++i) store.value_mut(i) = random_mat(store.value(i).rows(), store.value(i).cols(), rng) * 0.35;
  Mat x = random_mat(3, 4, rng);
  Mat c = random_mat(2, 4, rng);

  // L = sum(c .* y)
  auto loss = [&](ParamStore& s) {
    auto tape = mlp_forward(s, net, x);
    mlp_backward(s, tape, c);
    return c.cwiseProduct(tape.output).sum();
  };
  EXPECT_LT(finite_diff_check(store, loss), 1e-4);

  auto tape = mlp_forward(store, net, x);
  Mat dx = mlp_backward(store, tape, c, false);
  const double h = 1e-5;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Mat xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    const double cd = (c.cwiseProduct(mlp_predict(store, net, xp)).sum() - c.cwiseProduct(mlp_predict(store, net, xm)).sum()) / (2 * h);
    EXPECT_LT(std::abs(cd - dx(k)) / std::max({std::abs(cd), std::abs(dx(k)), 1e-8}), 1e-4);
  }
}

INSTANTIATE_TEST_SUITE_P(RandomNets, BackwardFiniteDiff, ::testing::Range(0, 20));

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    auto net = make_net({3, 7, 2});
    ParamStore store;
    Rng rng(12);
    net.init(store, rng);
    Mat x = random_mat(3, 9, rng);
    auto tape = mlp_forward(store, net, x);
    mlp_backward(store, tape, Mat::Ones(2, 9));
    return std::make_pair(tape.output, store.grad("net/W0"));
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Mish, KnownValues) {
  EXPECT_EQ(mish(0.0), 0.0);
  EXPECT_NEAR(mish(-50.0), 0.0, 1e-18);
  EXPECT_NEAR(mish(1.0), std::tanh(std::log(1.0 + std::exp(1.0))), 1e-15);
  EXPECT_NEAR(mish(50.0), 50.0, 1e-12);
}

TEST(Mish, MatchesReferenceAndDerivativeOnGrid) {
  for (double x = -50.0; x <= 50.0; x += 0.37) {
    EXPECT_NEAR(mish(x), mish_reference(x), 1e-13 * std::max(1.0, std::abs(x))) << x;
    const double h = 1e-6;
    const double cd = (mish_reference(x + h) - mish_reference(x - h)) / (2 * h);
    EXPECT_NEAR(mish_derivative(x), cd, 1e-7) << x;
  }
}

TEST(Mish, VectorizedMatchesScalar) {
  Mat z(1, 5);
  z << -30.0, -1.5, 0.0, 2.0, 40.0;
  Mat a = detail::activate(z, Activation::mish);
  Mat s = detail::activation_slope(z, Activation::mish);
  for (int i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(a(0, i), mish(z(0, i)));
    EXPECT_DOUBLE_EQ(s(0, i), mish_derivative(z(0, i)));
  }
}

TEST(Adam, ZeroGradientIsIdentity) {
  ParamStore store;
  store.add("p", Mat::Constant(2, 2, 3.0));
  const Mat before = store.value("p");
  adam_step(store, 0.1);
  EXPECT_EQ(store.value("p"), before);
  EXPECT_EQ(store.entry(0).step_count, 0);
  EXPECT_TRUE(store.entry(0).adam_m.isZero(0.0));
}

TEST(Adam, FirstStepMagnitudeIsLr) {
  const double lr = 0.01;
  for (double g : {1e-3, -0.5, 7.0}) {
    ParamStore store;
    store.add("p", Mat::Constant(1, 1, 1.0));
    store.grad("p")(0) = g;
    adam_step(store, lr);
    // m_hat = g, v_hat = g^2
    const double expected = 1.0 - lr * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(store.value("p")(0), expected, 1e-15);
    EXPECT_EQ(store.entry(0).step_count, 1);
    EXPECT_TRUE(store.grad("p").isZero(0.0));
  }
}

TEST(Adam, TwoStepsMatchScalarTrace) {
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double g1 = 0.3, g2 = -1.2;
  double theta = 2.0, m = 0.0, v = 0.0;
  int t = 0;
  for (double g : {g1, g2}) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    theta -= lr * mh / (std::sqrt(vh) + eps);
  }
  ParamStore store;
  store.add("p", Mat::Constant(1, 1, 2.0));
  store.grad("p")(0) = g1;
  adam_step(store, lr);
  store.grad("p")(0) = g2;
  adam_step(store, lr);
  EXPECT_NEAR(store.value("p")(0), theta, 1e-15);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParamStore store;
  store.add("ok", Mat::Zero(1, 1));
  store.add("bad", Mat::Zero(1, 1));
  store.grad("bad")(0) = std::nan("");
  try {
    adam_step(store, 0.1);
    FAIL() << "expected training_error";
  } catch (const training_error& e) {
    EXPECT_EQ(e.term(), "bad");
  }
}

TEST(FiniteDiff, QuadraticLoss) {
  ParamStore store;
  Rng rng(13);
  store.add("a", random_mat(3, 2, rng));
  store.add("b", random_mat(4, 1, rng));
  auto loss = [](ParamStore& s) {
    double l = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      l += 0.5 * s.value(i).squaredNorm();
      s.grad(i) += s.value(i);
    }
    return l;
  };
  EXPECT_LT(finite_diff_check(store, loss), 1e-6);
}

TEST(FiniteDiff, LinearLossAnalyticIsExact) {
  ParamStore store;
  Rng rng(14);
  store.add("a", random_mat(5, 1, rng));
  const Mat c = random_mat(5, 1, rng);
  auto loss = [&](ParamStore& s) {
    s.grad(0) += c;
    return c.cwiseProduct(s.value(0)).sum();
  };
  loss(store);
  EXPECT_EQ(store.grad(0), c);
  EXPECT_LT(finite_diff_check(store, loss), 1e-6);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  ParamStore store;
  store.add("a", Mat::Constant(2, 1, 1.0));
  auto loss = [](ParamStore& s) {
    s.grad(0) += 2.0 * s.value(0);  // true gradient is value
    return 0.5 * s.value(0).squaredNorm();
  };
  EXPECT_GT(finite_diff_check(store, loss), 0.4);
}

TEST(ParamStore, DuplicateNameRejected) {
  ParamStore store;
  store.add("x", Mat::Zero(1, 1));
  EXPECT_THROW(store.add("x", Mat::Zero(1, 1)), config_error);
}

TEST(ParamStore, PolyakAndCopy) {
  ParamStore a, b;
  a.add("x", Mat::Constant(2, 1, 1.0));
  b.add("x", Mat::Constant(2, 1, 3.0));
  a.polyak_from(b, 0.25);
  EXPECT_DOUBLE_EQ(a.value("x")(0), 1.5);
  a.copy_values_from(b);
  EXPECT_EQ(a.value("x"), b.value("x"));
  ParamStore c;
  c.add("y", Mat::Zero(2, 1));
  EXPECT_THROW(a.copy_values_from(c), config_error);
}
