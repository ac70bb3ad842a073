// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <limits>

#include "hici/ndnet.hpp"
#include "test_util.hpp"

namespace hici {
namespace {

using testing::flat;
using testing::max_fd_error;
using testing::random_matrix;

TEST(InitParams, SameSeedIsBitIdentical) {
  const std::array<Index, 2> dims{2, 3};
  const Mlp a = init_params(dims, 7);
  const Mlp b = init_params(dims, 7);
  EXPECT_EQ(a.layers[0].weight, b.layers[0].weight);
  EXPECT_EQ(a.layers[0].bias, b.layers[0].bias);
}

TEST(InitParams, DifferentSeedsDiffer) {
  const std::array<Index, 2> dims{2, 3};
  EXPECT_NE(init_params(dims, 7).layers[0].weight, init_params(dims, 8).layers[0].weight);
}

TEST(InitParams, BiasesStartAtZero) {
  const std::array<Index, 3> dims{4, 8, 2};
  const Mlp net = init_params(dims, 3);
  ASSERT_EQ(net.layers.size(), 2u);
  for (const auto& l : net.layers) EXPECT_TRUE((l.bias.array() == 0.0).all());
  EXPECT_EQ(net.layers[0].activation, Activation::relu);
  EXPECT_EQ(net.layers[1].activation, Activation::identity);
}

TEST(InitParams, WeightSpreadMatchesInitScale) {
  const std::array<Index, 2> dims{100, 100};
  const Mlp net = init_params(dims, 11);
  const auto& w = net.layers[0].weight;
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().sum() / static_cast<double>(w.size() - 1));
  EXPECT_NEAR(mean, 0.0, 0.005);
  EXPECT_NEAR(sd, kInitSigma, 0.005);
}

TEST(InitParams, RejectsBadDims) {
  const std::array<Index, 2> zero{3, 0};
  const std::array<Index, 1> single{3};
  EXPECT_THROW(init_params(zero, 1), ConfigError);
  EXPECT_THROW(init_params(single, 1), ConfigError);
}

TEST(Forward, IdentityLayerReturnsInput) {
  Mlp net;
  net.layers.push_back({Matrix::Identity(3, 3), Vector::Zero(3), Activation::identity});
  Rng rng(5);
  const Matrix x = random_matrix(4, 3, rng);
  EXPECT_EQ(forward(net, x), x);
}

TEST(Forward, ReluOnNegativePreActivationsIsZero) {
  Mlp net;
  net.layers.push_back({Matrix::Identity(2, 2), Vector::Constant(2, -10.0), Activation::relu});
  Matrix x(3, 2);
  x << 1, 2, -3, 4, 0.5, -1;
  EXPECT_TRUE((forward(net, x).array() == 0.0).all());
}

TEST(Forward, MatchesStraightLineRecomputation) {
  Rng rng(21);
  const std::array<Index, 4> dims{5, 7, 6, 3};
  Mlp net = init_params(dims, rng, Activation::tanh, Activation::identity, 0.5);
  for (auto& l : net.layers) l.bias = random_matrix(1, l.out_dim(), rng).row(0).transpose();
  net.layers[1].activation = Activation::relu;
  const Matrix x = random_matrix(4, 5, rng);
  const Matrix got = forward(net, x);

  // Plain triple loops, one sample at a time.
  for (Index n = 0; n < x.rows(); ++n) {
    std::vector<double> a(x.row(n).data(), x.row(n).data() + x.cols());
    for (const auto& l : net.layers) {
      std::vector<double> z(static_cast<std::size_t>(l.out_dim()));
      for (Index o = 0; o < l.out_dim(); ++o) {
        double s = l.bias(o);
        for (Index i = 0; i < l.in_dim(); ++i) s += a[static_cast<std::size_t>(i)] * l.weight(i, o);
        if (l.activation == Activation::relu) s = s > 0.0 ? s : 0.0;
        if (l.activation == Activation::tanh) s = std::tanh(s);
        z[static_cast<std::size_t>(o)] = s;
      }
      a = z;
    }
    for (Index o = 0; o < got.cols(); ++o) EXPECT_NEAR(got(n, o), a[static_cast<std::size_t>(o)], 1e-12);
  }
}

TEST(Forward, RowsDoNotDependOnBatch) {
  Rng rng(4);
  const std::array<Index, 3> dims{9, 33, 2};
  const Mlp net = init_params(dims, rng);
  const Matrix x = random_matrix(50, 9, rng);
  const Matrix all = forward(net, x);
  for (Index n = 0; n < x.rows(); n += 7) {
    const Matrix one = forward(net, Matrix(x.row(n)));
    EXPECT_EQ(one.row(0), all.row(n));
  }
}

TEST(Forward, ShapeMismatchThrows) {
  const std::array<Index, 2> dims{3, 2};
  const Mlp net = init_params(dims, 1);
  EXPECT_THROW(forward(net, Matrix::Zero(2, 4)), ShapeError);
}

TEST(Backward, MatchesFiniteDifferences) {
  Rng rng(33);
  const std::array<Index, 3> dims{4, 6, 3};
  Mlp net = init_params(dims, rng, Activation::relu, Activation::identity, 0.7);
  const Matrix x = random_matrix(5, 4, rng);
  const Matrix target = random_matrix(5, 3, rng);
  // Scalar: sum of (out .* target), so the upstream gradient is target.
  auto f = [&] { return forward(net, x).cwiseProduct(target).sum(); };
  const BackwardResult g = backward(net, x, target);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    EXPECT_LT(max_fd_error(flat(net.layers[i].weight), flat(g.params.layers[i].weight), f), 1e-4);
    EXPECT_LT(max_fd_error(flat(net.layers[i].bias), flat(g.params.layers[i].bias), f), 1e-4);
  }
  Matrix xv = x;
  auto fx = [&] { return forward(net, xv).cwiseProduct(target).sum(); };
  EXPECT_LT(max_fd_error(flat(xv), flat(g.input), fx), 1e-4);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(2);
  const std::array<Index, 3> dims{3, 4, 2};
  const Mlp net = init_params(dims, rng);
  const BackwardResult g = backward(net, random_matrix(6, 3, rng), Matrix::Zero(6, 2));
  for (const auto& l : g.params.layers) {
    EXPECT_TRUE((l.weight.array() == 0.0).all());
    EXPECT_TRUE((l.bias.array() == 0.0).all());
  }
  EXPECT_TRUE((g.input.array() == 0.0).all());
}

TEST(Backward, LinearLeastSquaresClosedForm) {
  Rng rng(8);
  Mlp net;
  net.layers.push_back({random_matrix(3, 2, rng), Vector::Random(2), Activation::identity});
  const Matrix x = random_matrix(10, 3, rng);
  const Matrix y = random_matrix(10, 2, rng);
  // 0.5 * ||XW + b - Y||^2: dW = X^T R, db = colsum(R).
  const Matrix residual = ((x * net.layers[0].weight).rowwise() + net.layers[0].bias.transpose()) - y;
  const BackwardResult g = backward(net, x, forward(net, x) - y);
  EXPECT_LT((g.params.layers[0].weight - x.transpose() * residual).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((g.params.layers[0].bias - residual.colwise().sum().transpose()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Backward, UpstreamShapeMismatchThrows) {
  const std::array<Index, 2> dims{3, 2};
  const Mlp net = init_params(dims, 1);
  EXPECT_THROW(backward(net, Matrix::Zero(4, 3), Matrix::Zero(4, 3)), ShapeError);
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  std::vector<double> w{1.0, -2.0, 3.5};
  const std::vector<double> before = w;
  const std::vector<double> g(3, 0.0);
  AdamState s;
  const std::array<ParamBlock, 1> blocks{ParamBlock{"w", w, g}};
  for (int i = 0; i < 10; ++i) adam_step(blocks, s, 0.1);
  EXPECT_EQ(w, before);
}

TEST(Adam, MinimizesQuadraticLikeScalarRecurrence) {
  double w = 0.0;
  std::vector<double> wv{0.0};
  std::vector<double> gv{0.0};
  AdamState s;
  const std::array<ParamBlock, 1> blocks{ParamBlock{"w", wv, gv}};
  // Independent scalar Adam recurrence.
  double m = 0.0;
  double v = 0.0;
  for (int t = 1; t <= 500; ++t) {
    gv[0] = 2.0 * (wv[0] - 3.0);
    adam_step(blocks, s, 0.1);
    const double g = 2.0 * (w - 3.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 0.1 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_LT(std::abs(wv[0] - 3.0), 1e-2);
  EXPECT_NEAR(wv[0], w, 1e-12);
}

TEST(Adam, StepCounterCountsCalls) {
  std::vector<double> w{0.0};
  std::vector<double> g{1.0};
  AdamState s;
  const std::array<ParamBlock, 1> blocks{ParamBlock{"w", w, g}};
  for (int i = 0; i < 7; ++i) adam_step(blocks, s, 0.01);
  EXPECT_EQ(s.step, 7u);
}

TEST(Adam, NonFiniteGradientNamesTheBlock) {
  std::vector<double> w{0.0, 0.0};
  std::vector<double> g{1.0, std::numeric_limits<double>::quiet_NaN()};
  AdamState s;
  const std::array<ParamBlock, 1> blocks{ParamBlock{"decoder.1.bias", w, g}};
  try {
    adam_step(blocks, s, 0.01);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.1.bias"), std::string::npos);
  }
  EXPECT_EQ(w[0], 0.0);
}

TEST(LrSchedule, EpochZeroIsBaseRate) {
  EXPECT_EQ(lr_at({0.08, 0.7, 2}, 0), 0.08);
}

TEST(LrSchedule, InverseTimeDecayByHand) {
  EXPECT_NEAR(lr_at({0.1, 0.6, 1}, 1), 0.1 / 1.4, 1e-15);
  EXPECT_NEAR(lr_at({0.1, 0.6, 2}, 3), 0.1 / 1.4, 1e-15);
  EXPECT_NEAR(lr_at({0.1, 0.6, 2}, 4), 0.1 / 1.8, 1e-15);
}

TEST(LrSchedule, AcceptsGridValues) {
  for (double base : {0.06, 0.08, 0.1, 0.12, 0.14, 0.16}) {
    for (double decay : {0.6, 0.65, 0.7, 0.75}) {
      for (std::size_t every : {1u, 2u}) EXPECT_NO_THROW((LrSchedule{base, decay, every}.validate()));
    }
  }
  EXPECT_THROW((LrSchedule{0.0, 0.7, 1}.validate()), ConfigError);
  EXPECT_THROW((LrSchedule{0.1, 1.5, 1}.validate()), ConfigError);
  EXPECT_THROW((LrSchedule{0.1, 0.7, 0}.validate()), ConfigError);
}

}  // namespace
}  // namespace hici
