#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_support.hpp"
#include "vitdf/autodiff.hpp"
#include "vitdf/ops.hpp"

using namespace vitdf;
using vitdf::testing::numeric_gradient;
using vitdf::testing::random_tensor;
using vitdf::testing::relative_error;

namespace {

void expect_tensor_near(const Tensor& actual, const Tensor& expected, double tol) {
  ASSERT_EQ(actual.shape(), expected.shape());
  for (std::size_t i = 0; i < actual.size(); ++i) EXPECT_NEAR(actual[i], expected[i], tol) << "element " << i;
}

/// Checks d(sum(op(x) * weights))/dx against central differences.
void check_unary_gradient(const std::function<Var(const Var&)>& op, const Tensor& x, RandomSource& rng) {
  Tensor probe_out;
  {
    Tape t;
    probe_out = op(t.constant(x)).value();
  }
  const Tensor weights = random_tensor(probe_out.shape(), rng);
  auto loss_of = [&](const Tensor& input) {
    Tape t;
    Var y = op(t.constant(input));
    return (y.value().array() * weights.array()).sum();
  };
  Tape tape;
  Var xv = tape.parameter("x", x);
  Var loss = sum(mul(op(xv), tape.constant(weights)));
  const Tensor analytic = tape.backward(loss).at("x");
  const Tensor numeric = numeric_gradient(loss_of, x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LT(relative_error(analytic[i], numeric[i], 1e-2), 1e-4)
        << "element " << i << " analytic " << analytic[i] << " numeric " << numeric[i];
  }
}

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
  t.set_grad(Tensor(Shape{2, 3}, 0.5));
  EXPECT_TRUE(t.has_grad());
  EXPECT_THROW(t.set_grad(Tensor(Shape{3, 2})), ShapeError);
}

TEST(Tensor, CastRoundTripsThroughFloat) {
  Tensor t = Tensor::vector({0.1, -2.5, 3.0});
  TensorF f = t.cast<float>();
  EXPECT_EQ(f[0], 0.1f);
  EXPECT_EQ(f.cast<double>()[1], -2.5);
}

TEST(Matmul, IdentityCase) {
  Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(eye, m), m);
}

TEST(Matmul, HandComputedProduct) {
  EXPECT_EQ(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5, 6}, {7, 8}})),
            Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST(Matmul, ZeroCase) {
  EXPECT_EQ(matmul(Tensor::matrix({{0, 0}}), Tensor::matrix({{1}, {1}})), Tensor::matrix({{0}}));
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, AssociativeOnWellConditionedInputs) {
  RandomSource rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({4, 4}, rng), b = random_tensor({4, 4}, rng), c = random_tensor({4, 4}, rng);
    EXPECT_LT(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-9);
  }
}

TEST(Softmax, Examples) {
  expect_tensor_near(softmax(Tensor::vector({0, 0}), 0), Tensor::vector({0.5, 0.5}), 1e-15);
  expect_tensor_near(softmax(Tensor::vector({0, std::log(3.0)}), 0), Tensor::vector({0.25, 0.75}), 1e-15);
  Tensor big = softmax(Tensor::vector({1000, 0}), 0);
  EXPECT_TRUE(big.all_finite());
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_NEAR(big[1], 0.0, 1e-15);
}

TEST(Softmax, AxisOutOfRange) { EXPECT_THROW(softmax(Tensor(Shape{2, 2}), 2), ShapeError); }

TEST(Softmax, SlicesAreStochasticAlongEveryAxis) {
  RandomSource rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({3, 4, 5}, rng, 10.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor y = softmax(x, axis);
      const std::size_t stride = axis == 0 ? 20 : axis == 1 ? 5 : 1;
      for (std::size_t start = 0; start < y.size(); ++start) {
        // Visit each slice once, from its first element.
        if ((start / stride) % x.dim(axis) != 0) continue;
        double total = 0.0;
        for (std::size_t k = 0; k < x.dim(axis); ++k) {
          const double v = y[start + k * stride];
          EXPECT_GT(v, 0.0);
          EXPECT_LT(v, 1.0);
          total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
      }
    }
  }
}

TEST(LayerNorm, Examples) {
  expect_tensor_near(layer_norm(Tensor::vector({1, 1, 1}), Tensor::ones({3}), Tensor::zeros({3})),
                     Tensor::vector({0, 0, 0}), 1e-12);
  expect_tensor_near(layer_norm(Tensor::vector({1, -1}), Tensor::ones({2}), Tensor::zeros({2}), 1e-15),
                     Tensor::vector({1, -1}), 1e-12);
  expect_tensor_near(layer_norm(Tensor::vector({0, 0}), Tensor::vector({2, 2}), Tensor::vector({3, 3})),
                     Tensor::vector({3, 3}), 1e-12);
}

TEST(LayerNorm, ShapeMismatch) {
  EXPECT_THROW(layer_norm(Tensor(Shape{2, 3}), Tensor::ones({2}), Tensor::zeros({3})), ShapeError);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  RandomSource rng(5);
  Tensor x = random_tensor({6, 9}, rng, 4.0);
  Tensor y = layer_norm(x, Tensor::ones({9}), Tensor::zeros({9}), 1e-12);
  for (std::size_t r = 0; r < 6; ++r) {
    auto row = y.matrix().row(static_cast<Eigen::Index>(r)).array();
    EXPECT_NEAR(row.mean(), 0.0, 1e-7);
    EXPECT_NEAR((row - row.mean()).square().mean(), 1.0, 1e-7);
  }
}

TEST(Gelu, Examples) {
  Tensor y = gelu(Tensor::vector({0.0, 1.0, -10.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.8413447460685429, 1e-12);
  EXPECT_LT(std::abs(y[2]), 1e-8);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Var w = tape.parameter("w", Tensor::vector({0.3, -1.0, 2.0}));
  GradientMap g = tape.backward(sum(w));
  EXPECT_TRUE(g.connected);
  EXPECT_EQ(g.at("w"), Tensor::vector({1, 1, 1}));
}

TEST(Backward, SquaredSum) {
  Tape tape;
  Var w = tape.parameter("w", Tensor::vector({1, 2}));
  EXPECT_EQ(tape.backward(sum(mul(w, w))).at("w"), Tensor::vector({2, 4}));
}

TEST(Backward, UnusedLeafGetsZeros) {
  Tape tape;
  Var w = tape.parameter("w", Tensor::vector({1, 2}));
  tape.parameter("unused", Tensor::vector({5, 6, 7}));
  GradientMap g = tape.backward(sum(w));
  EXPECT_EQ(g.at("unused"), Tensor::zeros({3}));
}

TEST(Backward, RequiresScalarLoss) {
  Tape tape;
  Var w = tape.parameter("w", Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(scale(w, 2.0)), ShapeError);
}

TEST(Backward, DisconnectedLossIsFlagged) {
  Tape tape;
  tape.parameter("w", Tensor::vector({1, 2}));
  Var c = tape.constant(Tensor::vector({3, 4}));
  GradientMap g = tape.backward(sum(c));
  EXPECT_FALSE(g.connected);
  EXPECT_EQ(g.at("w"), Tensor::zeros({2}));
}

TEST(Backward, LeafRequiresGradFlagIsHonoured) {
  Tape tape;
  Tensor frozen = Tensor::vector({1, 2});
  Tensor live = Tensor::vector({3, 4});
  live.set_requires_grad();
  Var a = tape.variable("frozen", frozen);
  Var b = tape.variable("live", live);
  GradientMap g = tape.backward(sum(mul(a, b)));
  EXPECT_EQ(g.grads.count("frozen"), 0u);
  EXPECT_EQ(g.at("live"), Tensor::vector({1, 2}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tape tape;
  Var w = tape.parameter("w", Tensor::vector({3}));
  Var y = add(w, w);
  EXPECT_EQ(tape.backward(sum(mul(y, w))).at("w"), Tensor::vector({12}));  // d(2w^2) = 4w
}

// Finite-difference checks for every recorded operator.

TEST(GradientCheck, Matmul) {
  RandomSource rng(21);
  Tensor b = random_tensor({4, 3}, rng);
  Tensor a = random_tensor({2, 4}, rng);
  check_unary_gradient([&](const Var& x) { return matmul(x, x.tape().constant(b)); }, a, rng);
  check_unary_gradient([&](const Var& x) { return matmul(x.tape().constant(a), x); }, b, rng);
}

TEST(GradientCheck, Softmax) {
  RandomSource rng(22);
  Tensor x = random_tensor({3, 4, 2}, rng, 2.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    check_unary_gradient([axis](const Var& v) { return softmax(v, axis); }, x, rng);
  }
}

TEST(GradientCheck, LayerNorm) {
  RandomSource rng(23);
  Tensor x = random_tensor({3, 5}, rng, 2.0);
  Tensor gamma = random_tensor({5}, rng);
  Tensor beta = random_tensor({5}, rng);
  check_unary_gradient(
      [&](const Var& v) { return layer_norm(v, v.tape().constant(gamma), v.tape().constant(beta)); }, x, rng);
  check_unary_gradient([&](const Var& g) { return layer_norm(g.tape().constant(x), g, g.tape().constant(beta)); },
                       gamma, rng);
  check_unary_gradient([&](const Var& b) { return layer_norm(b.tape().constant(x), b.tape().constant(gamma), b); },
                       beta, rng);
}

TEST(GradientCheck, Gelu) {
  RandomSource rng(24);
  check_unary_gradient([](const Var& v) { return gelu(v); }, random_tensor({10}, rng, 2.0), rng);
}

TEST(GradientCheck, StructuralOps) {
  RandomSource rng(25);
  Tensor x = random_tensor({3, 6}, rng);
  Tensor bias = random_tensor({6}, rng);
  check_unary_gradient([&](const Var& v) { return add_bias(v, v.tape().constant(bias)); }, x, rng);
  check_unary_gradient([&](const Var& b) { return add_bias(b.tape().constant(x), b); }, bias, rng);
  check_unary_gradient([](const Var& v) { return transpose(v); }, x, rng);
  check_unary_gradient([](const Var& v) { return slice_cols(v, 2, 3); }, x, rng);
  check_unary_gradient([](const Var& v) { return concat_cols({slice_cols(v, 4, 2), slice_cols(v, 0, 3)}); }, x, rng);
  check_unary_gradient([](const Var& v) { return concat_rows({row(v, 2), v}); }, x, rng);
  check_unary_gradient([](const Var& v) { return reshape(v, {2, 9}); }, x, rng);
  check_unary_gradient([](const Var& v) { return mean(mul(v, v)); }, x, rng);
  check_unary_gradient([](const Var& v) { return add_n({v, scale(v, -0.5), sub(v, mul(v, v))}); }, x, rng);
}

TEST(GradientCheck, LogClamped) {
  Tensor x = Tensor::vector({0.2, 0.5, 1.7, 3.0});
  RandomSource rng(26);
  check_unary_gradient([](const Var& v) { return log_clamped(v, 1e-12); }, x, rng);

  Tape tape;
  Var p = tape.parameter("p", Tensor::vector({1e-20, 0.5}));
  Tensor g = tape.backward(sum(log_clamped(p, 1e-12))).at("p");
  EXPECT_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[1], 2.0);
}

TEST(Dropout, ZeroRateIsIdentityAndMaskIsDeterministic) {
  RandomSource rng(1);
  Tape tape;
  Var x = tape.constant(Tensor(Shape{100}, 1.0));
  EXPECT_EQ(dropout(x, 0.0, rng).id(), x.id());
  RandomSource a(9), b(9);
  Tensor da = dropout(x, 0.5, a).value();
  Tensor db = dropout(x, 0.5, b).value();
  EXPECT_EQ(da, db);
  for (double v : da.data()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(RandomSource, SequenceIsFrozenAcrossProcesses) {
  // Golden values from an independent re-derivation of the counter formula.
  RandomSource rng(42);
  const std::uint64_t expected[] = {rng.next_u64(), rng.next_u64(), rng.next_u64()};
  RandomSource again(42);
  for (auto e : expected) EXPECT_EQ(again.next_u64(), e);
  EXPECT_EQ(expected[0], 0x8ca10b1dbe91ee23ULL);
  EXPECT_EQ(expected[1], 0xe72aac3121269f60ULL);
}

TEST(RandomSource, SubstreamsIgnoreSiblingConsumption) {
  RandomSource root(7);
  RandomSource a1 = root.substream("a");
  RandomSource b1 = root.substream("b");
  const double first_b = b1.uniform();

  RandomSource a2 = root.substream("a");
  for (int i = 0; i < 1000; ++i) (void)a2.uniform();
  RandomSource b2 = root.substream("b");
  EXPECT_EQ(b2.uniform(), first_b);
  EXPECT_NE(root.substream("a").uniform(), root.substream("b").uniform());
  EXPECT_NE(root.substream(std::uint64_t{1}).next_u64(), root.substream(std::uint64_t{2}).next_u64());
  (void)a1;
}

TEST(RandomSource, DistributionsAreSane) {
  RandomSource rng(99);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
  for (int i = 0; i < 10000; ++i) {
    EXPECT_LE(std::abs(rng.truncated_normal(0.02)), 0.04);
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(rng.index(7), 7u);
  }
}
