#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "gradcheck.hpp"
#include "pkmlab/adam.hpp"
#include "pkmlab/ops.hpp"
#include "pkmlab/rng.hpp"
#include "pkmlab/tensor.hpp"

using namespace pkmlab;
using namespace pkmlab::testing;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), std::invalid_argument);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW(t.reshape({4, 2}), std::invalid_argument);
  t.reshape({3, 2});
  EXPECT_EQ(t.rows(), 3u);
}

TEST(Tensor, NonFiniteIsAnError) {
  Tensor<float> t({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(require_finite(t, "t"), std::runtime_error);
}

TEST(Matmul, IdentityAndSelector) {
  const Tensor<float> eye({2, 2}, {1, 0, 0, 1});
  const Tensor<float> m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m), m);
  EXPECT_EQ(matmul(Tensor<float>({1, 2}, {1, 0}), Tensor<float>({2, 1}, {5, 7})), Tensor<float>({1, 1}, {5}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(1);
  Tensor<float> a({3, 4}), b({4, 2});
  for (auto& v : a.vec()) v = static_cast<float>(rng.normal());
  for (auto& v : b.vec()) v = static_cast<float>(rng.normal());
  const Tensor<float> c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += static_cast<double>(a(i, k)) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-6);
    }
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor<float>({2, 3}), Tensor<float>({2, 3})), std::invalid_argument);
}

TEST(Matmul, DeterministicWithinBuild) {
  Rng rng(2);
  Tensor<float> a({33, 47}), b({47, 29});
  for (auto& v : a.vec()) v = static_cast<float>(rng.normal());
  for (auto& v : b.vec()) v = static_cast<float>(rng.normal());
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(LinearBackward, MatchesFiniteDifferences) {
  Rng rng(3);
  Tensor<double> x({3, 4}), w({4, 5}), bias({5}), r({3, 5});
  for (auto* t : {&x, &w, &bias, &r}) fill_normal(*t, rng);
  const auto loss = [&] { return probe(linear_forward(x, w, bias), r); };
  Tensor<double> dx, dw({4, 5}), db({5});
  linear_backward(x, w, r, &dx, &dw, &db);
  EXPECT_LT(relative_error(as_vector(dx), numeric_grad(x, loss)), 1e-4);
  EXPECT_LT(relative_error(as_vector(dw), numeric_grad(w, loss)), 1e-4);
  EXPECT_LT(relative_error(as_vector(db), numeric_grad(bias, loss)), 1e-4);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  const Tensor<float> x({1, 4}, {3, 3, 3, 3});
  const Tensor<float> y = layer_norm(x, Tensor<float>({4}, 1.0f), Tensor<float>({4}));
  for (const float v : y.vec()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, ZeroGainCollapsesToBias) {
  const Tensor<float> x({2, 3}, {1, -2, 5, 0.5f, 7, -1});
  const Tensor<float> y = layer_norm(x, Tensor<float>({3}), Tensor<float>({3}, 2.5f));
  for (const float v : y.vec()) EXPECT_EQ(v, 2.5f);
}

TEST(LayerNorm, NormalizesRows) {
  Rng rng(4);
  Tensor<double> x({6, 16});
  fill_normal(x, rng, 3.0);
  const Tensor<double> y = layer_norm(x, Tensor<double>({16}, 1.0), Tensor<double>({16}));
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0, var = 0;
    for (const double v : y.row(r)) mean += v / 16;
    for (const double v : y.row(r)) var += (v - mean) * (v - mean) / 16;
    EXPECT_LT(std::abs(mean), 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  Tensor<double> x({4, 6}), gain({6}), bias({6}), r({4, 6});
  for (auto* t : {&x, &gain, &bias, &r}) fill_normal(*t, rng);
  const auto loss = [&] { return probe(layer_norm(x, gain, bias), r); };
  LayerNormCache<double> cache;
  layer_norm(x, gain, bias, kLayerNormEps, &cache);
  Tensor<double> dx, dgain({6}), dbias({6});
  layer_norm_backward(r, x, gain, cache, dx, &dgain, &dbias);
  EXPECT_LT(relative_error(as_vector(dx), numeric_grad(x, loss)), 1e-4);
  EXPECT_LT(relative_error(as_vector(dgain), numeric_grad(gain, loss)), 1e-4);
  EXPECT_LT(relative_error(as_vector(dbias), numeric_grad(bias, loss)), 1e-4);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  Tensor<double> x({3, 7}), r({3, 7});
  fill_normal(x, rng, 2.0);
  fill_normal(r, rng);
  const auto loss = [&] { return probe(gelu(x), r); };
  EXPECT_LT(relative_error(as_vector(gelu_backward(x, r)), numeric_grad(x, loss)), 1e-4);
}

TEST(Gelu, MatchesErfDefinition) {
  const Tensor<double> x({1, 5}, {-3, -0.5, 0, 0.7, 2.5});
  const Tensor<double> y = gelu(x);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(y[i], 0.5 * x[i] * (1 + std::erf(x[i] / std::sqrt(2.0))), 1e-12);
  }
}

TEST(Softmax, RowsSumToOneAndSurviveLargeLogits) {
  Tensor<double> x({2, 3}, {1000, 1001, 1002, -5, 0, 5});
  softmax_rows(x);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(x(r, 0) + x(r, 1) + x(r, 2), 1.0, 1e-12);
  EXPECT_TRUE(x.all_finite());
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const Tensor<float> logits({3, 4});
  const std::vector<std::int32_t> targets = {0, 1, 3};
  const auto r = softmax_cross_entropy(logits, targets);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-6);
  EXPECT_NEAR(r.loss, 1.3863, 1e-4);
}

TEST(CrossEntropy, DominantTargetLogitGivesZeroLoss) {
  const Tensor<double> logits({1, 3}, {0, 1e4, 0});
  EXPECT_NEAR(softmax_cross_entropy(logits, std::vector<std::int32_t>{1}).loss, 0.0, 1e-12);
}

TEST(CrossEntropy, MaskSelectsRows) {
  const Tensor<double> logits({2, 2}, {0, 0, 10, -10});
  const std::vector<std::int32_t> targets = {0, 1};
  const std::vector<std::uint8_t> mask = {1, 0};
  const auto r = softmax_cross_entropy(logits, targets, mask);
  EXPECT_EQ(r.count, 1u);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
  EXPECT_EQ(r.dlogits(1, 0), 0.0);
  EXPECT_EQ(r.dlogits(1, 1), 0.0);
}

TEST(CrossEntropy, Errors) {
  const Tensor<double> logits({2, 3});
  EXPECT_THROW(softmax_cross_entropy(logits, std::vector<std::int32_t>{0, 3}), std::out_of_range);
  EXPECT_ANY_THROW(softmax_cross_entropy(logits, std::vector<std::int32_t>{0, 1}, std::vector<std::uint8_t>{0, 0}));
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor<double> logits({2, 5});
  fill_normal(logits, rng);
  const std::vector<std::int32_t> targets = {3, 0};
  const auto loss = [&] { return softmax_cross_entropy(logits, targets).loss; };
  const auto r = softmax_cross_entropy(logits, targets);
  EXPECT_LT(relative_error(as_vector(r.dlogits), numeric_grad(logits, loss)), 1e-4);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  std::vector<float> p = {1.5f, -2.0f};
  const std::vector<float> g = {0.0f, 0.0f};
  AdamState<float> s(2, AdamConfig{0.1});
  adam_step<float>(p, g, s);
  EXPECT_EQ(p[0], 1.5f);
  EXPECT_EQ(p[1], -2.0f);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepIsLearningRate) {
  std::vector<double> p = {0.0};
  AdamState<double> s(1, AdamConfig{0.1});
  adam_step<double>(p, std::vector<double>{1.0}, s);
  EXPECT_NEAR(p[0], -0.1, 1e-7);
}

// Scalar Adam written out independently of the library.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    return p - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

TEST(Adam, TwoStepsMatchScalarOracle) {
  std::vector<float> p = {0.3f, -1.2f, 2.0f};
  AdamState<float> s(3, AdamConfig{0.01});
  std::vector<ScalarAdam> oracle(3);
  std::vector<double> ref = {0.3, -1.2, 2.0};
  const std::vector<std::vector<float>> grads = {{0.5f, -0.25f, 1.0f}, {-0.1f, 0.4f, 2.0f}};
  for (const auto& g : grads) {
    adam_step<float>(p, g, s);
    for (std::size_t i = 0; i < 3; ++i) ref[i] = oracle[i].step(ref[i], g[i], 0.01);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], ref[i], 1e-6);
}

TEST(Adam, NonFiniteGradientRejectedAndParameterKept) {
  std::vector<float> p = {1.0f};
  AdamState<float> s(1, AdamConfig{});
  EXPECT_THROW(adam_step<float>(p, std::vector<float>{std::numeric_limits<float>::infinity()}, s),
               std::runtime_error);
  EXPECT_EQ(p[0], 1.0f);
  EXPECT_THROW(adam_step<float>(p, std::vector<float>{1.0f, 2.0f}, s), std::invalid_argument);
}

TEST(SparseRowOptimizer, EmptyUpdateIsNoop) {
  Tensor<float> table({4, 3}, 1.0f);
  SparseRowOptimizer<float> opt(4, 3, AdamConfig{});
  SparseRowGrad<float> g;
  g.clear(3);
  opt.update(table, g, 1e-3);
  EXPECT_EQ(table, Tensor<float>({4, 3}, 1.0f));
}

TEST(SparseRowOptimizer, RowMatchesDenseAdamAndOthersUntouched) {
  Rng rng(8);
  Tensor<float> table({6, 4});
  for (auto& v : table.vec()) v = static_cast<float>(rng.normal());
  const Tensor<float> start = table;
  SparseRowOptimizer<float> opt(6, 4, AdamConfig{});
  std::vector<float> dense(start.row(2).begin(), start.row(2).end());
  AdamState<float> state(4, AdamConfig{});
  for (int s = 0; s < 3; ++s) {
    SparseRowGrad<float> g;
    g.rows = {2};
    g.values = Tensor<float>({1, 4});
    for (auto& v : g.values.vec()) v = static_cast<float>(rng.normal());
    opt.update(table, g, 1e-2);
    adam_step<float>(dense, g.values.span(), state, 1e-2);
  }
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(table(2, c), dense[c]);
  for (const std::size_t r : {0u, 1u, 3u, 4u, 5u}) {
    EXPECT_TRUE(std::equal(table.row(r).begin(), table.row(r).end(), start.row(r).begin()));
    EXPECT_EQ(opt.row_steps(r), 0);
  }
  EXPECT_EQ(opt.row_steps(2), 3);
}

TEST(SparseRowOptimizer, OutOfRangeRowThrows) {
  Tensor<float> table({2, 2});
  SparseRowOptimizer<float> opt(2, 2, AdamConfig{});
  SparseRowGrad<float> g;
  g.rows = {5};
  g.values = Tensor<float>({1, 2});
  EXPECT_THROW(opt.update(table, g, 1e-3), std::out_of_range);
}

TEST(SparseRowOptimizer, SgdRule) {
  Tensor<float> table({2, 2}, 1.0f);
  SparseRowOptimizer<float> opt(2, 2, AdamConfig{}, SparseRule::kSgd);
  SparseRowGrad<float> g;
  g.rows = {1};
  g.values = Tensor<float>({1, 2}, {2.0f, -4.0f});
  opt.update(table, g, 0.5);
  EXPECT_EQ(table(0, 0), 1.0f);
  EXPECT_EQ(table(1, 0), 0.0f);
  EXPECT_EQ(table(1, 1), 3.0f);
}

TEST(Rng, SplitStreamsAreDeterministic) {
  Rng a(9), b(9);
  Rng ca = a.split(), cb = b.split();
  for (int i = 0; i < 10; ++i) EXPECT_EQ(ca.next(), cb.next());
  EXPECT_NE(a.next(), ca.next());
  Rng c(10);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(c.below(7), 7u);
}
