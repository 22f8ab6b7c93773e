#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "madan/autodiff.hpp"
#include "madan/rng.hpp"

using namespace madan;
using ad::Graph;
using ad::Var;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  Rng rng(seed);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Direct nested-loop cross-correlation.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b, std::size_t stride,
                          std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  Tensor<double> out(Shape{n, cout, ho, wo});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          double s = b[o];
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long iy = static_cast<long>(y * stride + u) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + v) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                s += x.at(i, c, iy, ix) * k.at(o, c, u, v);
              }
          out.at(i, o, y, xx) = s;
        }
  return out;
}

}  // namespace

TEST(Conv2d, IdentityKernelCopiesInput) {
  Graph<double> g;
  std::vector<double> vals{1, 2, 3, 4, 5, 6, 7, 8, 9};
  Var x = g.input(Tensor<double>(Shape{1, 1, 3, 3}, vals));
  Var k = g.input(Tensor<double>(Shape{1, 1, 1, 1}, std::vector<double>{1.0}));
  Var b = g.input(Tensor<double>(Shape{1}, 0.0));
  Var y = ad::conv2d(g, x, k, b, 1, 0);
  EXPECT_EQ(g.shape(y), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(g.value(y).storage(), vals);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  Graph<double> g;
  Var x = g.input(random_tensor({2, 3, 5, 5}, 1));
  Var k = g.input(Tensor<double>(Shape{4, 3, 3, 3}, 0.0));
  Var b = g.input(Tensor<double>(Shape{4}, 0.75));
  Var y = ad::conv2d(g, x, k, b, 1, 1);
  for (double v : g.value(y).values()) EXPECT_EQ(v, 0.75);
}

TEST(Conv2d, AveragingKernelStride2MatchesLoopOracle) {
  std::vector<double> ramp(16);
  for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  Tensor<double> xt(Shape{1, 1, 4, 4}, ramp);
  Tensor<double> kt(Shape{1, 1, 2, 2}, 0.25);
  Tensor<double> bt(Shape{1}, 0.0);
  Graph<double> g;
  Var y = ad::conv2d(g, g.input(xt), g.input(kt), g.input(bt), 2, 0);
  const Tensor<double> oracle = naive_conv(xt, kt, bt, 2, 0);
  ASSERT_EQ(g.shape(y), (Shape{1, 1, 2, 2}));
  // block means of the ramp
  EXPECT_DOUBLE_EQ(g.value(y)[0], (0 + 1 + 4 + 5) / 4.0);
  EXPECT_DOUBLE_EQ(g.value(y)[3], (10 + 11 + 14 + 15) / 4.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g.value(y)[i], oracle[i]);
}

TEST(Conv2d, RandomShapesMatchLoopOracle) {
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1, 2}) {
      const auto xt = random_tensor({2, 3, 7, 6}, 10 + stride * 3 + pad);
      const auto kt = random_tensor({4, 3, 3, 3}, 20 + pad);
      const auto bt = random_tensor({4}, 30);
      Graph<double> g;
      Var y = ad::conv2d(g, g.input(xt), g.input(kt), g.input(bt), stride, pad);
      const auto oracle = naive_conv(xt, kt, bt, stride, pad);
      ASSERT_EQ(g.shape(y), oracle.shape());
      for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(g.value(y)[i], oracle[i], 1e-12);
    }
  }
}

TEST(Conv2d, ChannelMismatchNamesAxes) {
  Graph<double> g;
  Var x = g.input(Tensor<double>(Shape{1, 2, 5, 5}));
  Var k = g.input(Tensor<double>(Shape{1, 3, 3, 3}));
  Var b = g.input(Tensor<double>(Shape{1}));
  try {
    ad::conv2d(g, x, k, b, 1, 0);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputRejected) {
  Graph<double> g;
  Var x = g.input(Tensor<double>(Shape{1, 1, 2, 2}));
  Var k = g.input(Tensor<double>(Shape{1, 1, 5, 5}));
  Var b = g.input(Tensor<double>(Shape{1}));
  EXPECT_THROW(ad::conv2d(g, x, k, b, 1, 1), DimensionError);
}

TEST(MaxPool, ConstantInputGivesConstantOutput) {
  Graph<double> g;
  Var y = ad::maxpool2d(g, g.input(Tensor<double>(Shape{2, 3, 6, 6}, 4.5)), 2, 2);
  EXPECT_EQ(g.shape(y), (Shape{2, 3, 3, 3}));
  for (double v : g.value(y).values()) EXPECT_EQ(v, 4.5);
}

TEST(MaxPool, DistinctValuesMatchWindowScan) {
  const auto xt = random_tensor({1, 2, 4, 4}, 5);
  Graph<double> g;
  Var y = ad::maxpool2d(g, g.input(xt), 2, 2);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t oy = 0; oy < 2; ++oy)
      for (std::size_t ox = 0; ox < 2; ++ox) {
        double m = -1e300;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) m = std::max(m, xt.at(0, c, oy * 2 + u, ox * 2 + v));
        EXPECT_EQ(g.value(y).at(0, c, oy, ox), m);
      }
}

TEST(MaxPool, TiesRouteGradientToFirstElement) {
  Graph<double> g;
  Var x = g.variable(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  Var loss = ad::sum(g, ad::maxpool2d(g, x, 2, 2));
  g.backward(loss);
  EXPECT_EQ(g.grad(x).storage(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool, WindowLargerThanInputRejected) {
  Graph<double> g;
  EXPECT_THROW(ad::maxpool2d(g, g.input(Tensor<double>(Shape{1, 1, 3, 3})), 4, 1), DimensionError);
}

TEST(Backward, SquareHasDerivativeSix) {
  Graph<double> g;
  Var x = g.variable(Tensor<double>::scalar(3.0));
  g.backward(ad::mul(g, x, x));
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 6.0);
}

TEST(Backward, ConstantFunctionHasZeroGradient) {
  Parameter<double> p("p", Tensor<double>::scalar(2.0));
  Graph<double> g;
  g.param(p);
  Var c = g.variable(Tensor<double>::scalar(5.0));
  g.backward(ad::scale(g, c, 2.0));
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(Backward, NonScalarLossRejected) {
  Graph<double> g;
  Var x = g.variable(Tensor<double>(Shape{3}, 1.0));
  EXPECT_THROW(g.backward(x), ContractError);
}

TEST(Backward, RepeatedCallsAccumulateIntoParameters) {
  Parameter<double> p("p", Tensor<double>::scalar(3.0));
  Graph<double> g;
  Var x = g.param(p);
  Var loss = ad::mul(g, x, x);
  g.backward(loss);
  g.backward(loss);
  EXPECT_DOUBLE_EQ(p.grad[0], 12.0);
}

TEST(Backward, NonFiniteValueRejectedWithOpName) {
  Graph<double> g;
  Var x = g.input(Tensor<double>::scalar(1e300));
  try {
    ad::mul(g, x, x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos);
  }
}

TEST(Backward, BatchGradientIsSumOfPerSampleGradients) {
  Parameter<double> w("w", random_tensor({3, 5}, 40));
  Parameter<double> b("b", random_tensor({3}, 41));
  const auto x = random_tensor({2, 5}, 42);
  auto loss_of = [&](const Tensor<double>& in) {
    Graph<double> g;
    Var y = ad::relu(g, ad::linear(g, g.input(in), g.param(w), g.param(b)));
    g.backward(ad::sum(g, ad::mul(g, y, y)));
  };
  w.zero_grad();
  b.zero_grad();
  loss_of(x);
  const Tensor<double> joint = w.grad;
  w.zero_grad();
  b.zero_grad();
  for (std::size_t i = 0; i < 2; ++i) {
    loss_of(Tensor<double>(Shape{1, 5}, std::vector<double>(x.data() + i * 5, x.data() + i * 5 + 5)));
  }
  for (std::size_t k = 0; k < joint.size(); ++k) EXPECT_NEAR(joint[k], w.grad[k], 1e-12);
}

TEST(GradReverse, IdentityForwardNegatedScaledBackward) {
  const auto xt = random_tensor({2, 3}, 50);
  for (double lambda : {1.0, 0.0, 0.35, -1.0}) {
    Graph<double> g;
    Var x = g.variable(xt);
    Var r = ad::grad_reverse(g, x, lambda);
    EXPECT_EQ(g.value(r), xt);
    Var up = g.input(random_tensor({2, 3}, 51));
    g.backward(ad::sum(g, ad::mul(g, r, up)));
    for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_EQ(g.grad(x)[i], -lambda * g.value(up)[i]);
  }
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  const auto z = random_tensor({4, 5}, 60, -3, 3);
  Tensor<double> shifted = z;
  for (auto& v : shifted.values()) v += 7.5;
  Graph<double> g;
  Var p = ad::softmax(g, g.input(z));
  Var q = ad::softmax(g, g.input(shifted));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += g.value(p)[r * 5 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(g.value(p)[i], g.value(q)[i], 1e-12);
}

// --- finite-difference checks ---

TEST(GradCheck, LinearFunctionIsExact) {
  Parameter<double> w("w", random_tensor({1, 4}, 70));
  Parameter<double> b("b", Tensor<double>(Shape{1}, 0.0));
  const auto x = random_tensor({1, 4}, 71);
  std::vector<Parameter<double>*> params{&w, &b};
  const double err = ad::grad_check<double>(
      [&](Graph<double>& g) { return ad::sum(g, ad::linear(g, g.input(x), g.param(w), g.param(b))); },
      std::span<Parameter<double>* const>(params), 1e-4);
  EXPECT_LE(err, 1e-9);
}

TEST(GradCheck, SoftmaxCrossEntropyOnRandomLogits) {
  Parameter<double> z("z", random_tensor({3, 4}, 80, -2, 2));
  const std::vector<std::size_t> labels{0, 3, 1};
  std::vector<Parameter<double>*> params{&z};
  const double err = ad::grad_check<double>(
      [&](Graph<double>& g) {
        Var p = ad::softmax(g, g.param(z));
        // -sum log p[label] via a one-hot mask on log-probabilities
        Tensor<double> mask(Shape{3, 4}, 0.0);
        for (std::size_t i = 0; i < 3; ++i) mask[i * 4 + labels[i]] = 1.0;
        Var lp = ad::mul(g, p, g.input(mask));
        return ad::sum(g, lp);
      },
      std::span<Parameter<double>* const>(params), 1e-4);
  EXPECT_LE(err, 1e-6);
}

TEST(GradCheck, EveryOpOnRandomInputs) {
  Parameter<double> x("x", random_tensor({2, 2, 6, 6}, 90));
  Parameter<double> k("k", random_tensor({3, 2, 3, 3}, 91));
  Parameter<double> b("b", random_tensor({3}, 92));
  Parameter<double> gamma("gamma", random_tensor({3}, 93, 0.5, 1.5));
  Parameter<double> beta("beta", random_tensor({3}, 94));
  Parameter<double> w("w", random_tensor({4, 27}, 95));
  Parameter<double> wb("wb", random_tensor({4}, 96));
  const auto weights = random_tensor({2, 4}, 97);
  std::vector<Parameter<double>*> params{&x, &k, &b, &gamma, &beta, &w, &wb};
  const double err = ad::grad_check<double>(
      [&](Graph<double>& g) {
        Var c = ad::conv2d(g, g.param(x), g.param(k), g.param(b), 1, 1);
        Var gm = g.param(gamma), bt = g.param(beta);
        Var n = ad::normalize(g, c, &gm, &bt, 1e-5, false, static_cast<ad::Moments<double>*>(nullptr), "bn");
        Var in = ad::normalize(g, n, static_cast<const Var*>(nullptr), static_cast<const Var*>(nullptr), 1e-5, true,
                               static_cast<ad::Moments<double>*>(nullptr), "in");
        Var s = ad::sigmoid(g, in);
        Var p = ad::maxpool2d(g, s, 2, 2);
        Var f = ad::scale_samples(g, ad::flatten(g, p), std::vector<double>{1.5, 0.7});
        Var l = ad::softmax(g, ad::linear(g, f, g.param(w), g.param(wb)));
        return ad::sum(g, ad::mul(g, l, g.input(weights)));
      },
      std::span<Parameter<double>* const>(params), 1e-4);
  EXPECT_LE(err, 1e-5);
}

TEST(GradCheck, ReluAwayFromKink) {
  // values kept at least 0.1 from zero so the central difference never straddles the kink
  auto xt = random_tensor({3, 4}, 100, 0.1, 1.0);
  for (std::size_t i = 0; i < xt.size(); i += 2) xt[i] = -xt[i];
  Parameter<double> x("x", xt);
  std::vector<Parameter<double>*> params{&x};
  const auto up = random_tensor({3, 4}, 101);
  const double err = ad::grad_check<double>(
      [&](Graph<double>& g) { return ad::sum(g, ad::mul(g, ad::relu(g, g.param(x)), g.input(up))); },
      std::span<Parameter<double>* const>(params), 1e-4);
  EXPECT_LE(err, 1e-9);
}

TEST(Determinism, ForwardIsBitIdentical) {
  const auto xt = random_tensor({2, 3, 7, 7}, 110);
  const auto kt = random_tensor({5, 3, 3, 3}, 111);
  const auto bt = random_tensor({5}, 112);
  auto run = [&] {
    Graph<double> g;
    return g.value(ad::conv2d(g, g.input(xt), g.input(kt), g.input(bt), 1, 1));
  };
  EXPECT_EQ(run(), run());
}
