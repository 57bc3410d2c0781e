#include <gtest/gtest.h>

#include <cmath>

#include "adaprune/tensor.hpp"
#include "test_util.hpp"

using namespace adaprune;
using adaprune::testing::grad_check;

namespace {

Tensor randn(Shape s, RngStream& rng, bool rg = true, double sd = 1.0) {
  std::vector<double> v(shape_size(s));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::from(std::move(s), std::move(v), rg);
}

// Fixed random projection to turn any tensor into a scalar loss.
Tensor project(const Tensor& y, std::uint64_t seed = 99) {
  RngStream r(seed);
  return dot(y, randn(y.shape(), r, false));
}

}  // namespace

TEST(Tensor, MatmulMatchesLoopOracle) {
  RngStream rng(1);
  const Tensor a = randn({3, 4}, rng, false), b = randn({4, 5}, rng, false);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-13);
    }
  const Tensor bt = randn({5, 4}, rng, false);
  const Tensor d = matmul_nt(a, bt);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * bt.at(j, k);
      EXPECT_NEAR(d.at(i, j), s, 1e-13);
    }
}

TEST(Tensor, ShapeMismatchesThrow) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(Tensor::from({2, 2}, {1.0, 2.0}), ShapeError);
  EXPECT_THROW(backward(Tensor::zeros({2}, true)), ShapeError);
}

TEST(Tensor, SoftmaxRowsSumToOneAndRespectMask) {
  RngStream rng(2);
  const Tensor x = randn({3, 4}, rng, false, 3.0);
  const Tensor mask = Tensor::vector({1, 0, 1, 1});
  const Tensor p = softmax_rows(x, &mask);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += p.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-14);
    EXPECT_EQ(p.at(i, 1), 0.0);
    // Oracle: softmax over the unmasked entries only.
    const double z = std::exp(x.at(i, 0)) + std::exp(x.at(i, 2)) + std::exp(x.at(i, 3));
    EXPECT_NEAR(p.at(i, 2), std::exp(x.at(i, 2)) / z, 1e-14);
  }
  const Tensor none = Tensor::vector({0, 0, 0, 0});
  EXPECT_THROW(softmax_rows(x, &none), std::invalid_argument);
}

TEST(Tensor, SoftmaxStableForLargeInputs) {
  const Tensor x = Tensor::from({1, 3}, {1000.0, 1000.0, -1000.0});
  const Tensor p = softmax_rows(x);
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_TRUE(std::isfinite(log_softmax(x)[2]));
}

TEST(Tensor, LayerNormConstantRowGivesZeros) {
  const Tensor x = Tensor::from({1, 4}, {3.0, 3.0, 3.0, 3.0});
  const Tensor y = layer_norm(x, Tensor::filled({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, LayerNormRowStatistics) {
  RngStream rng(3);
  const Tensor x = randn({2, 6}, rng, false, 4.0);
  const Tensor y = layer_norm(x, Tensor::filled({6}, 1.0), Tensor::zeros({6}), 0.0);
  for (std::size_t i = 0; i < 2; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 6; ++j) m += y.at(i, j) / 6;
    for (std::size_t j = 0; j < 6; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m) / 6;
    EXPECT_NEAR(m, 0.0, 1e-14);
    EXPECT_NEAR(v, 1.0, 1e-12);
  }
}

TEST(Tensor, GeluMatchesErfDefinition) {
  for (double v : {-3.0, -0.5, 0.0, 0.7, 2.5}) EXPECT_NEAR(gelu_value(v), 0.5 * v * std::erfc(-v / std::sqrt(2.0)), 1e-15);
}

TEST(Tensor, GradientsOfEveryOperation) {
  RngStream rng(4);
  Tensor a = randn({3, 4}, rng), b = randn({4, 2}, rng), c = randn({3, 4}, rng), v4 = randn({4}, rng),
         v3 = randn({3}, rng), s = Tensor::scalar(1.7, true), pos = randn({3, 4}, rng);
  // Keep log/sqrt arguments away from zero.
  for (auto& x : pos.mutable_leaf_data()) x = 0.5 + std::abs(x);
  Tensor key_mask = Tensor::vector({1, 0.3, 1, 0.7}, true);
  std::vector<std::pair<std::string, Tensor>> leaves = {{"a", a},   {"b", b}, {"c", c},     {"v4", v4},
                                                        {"v3", v3}, {"s", s}, {"pos", pos}, {"key_mask", key_mask}};
  const std::vector<std::pair<std::string, std::function<Tensor()>>> cases = {
      {"matmul", [&] { return project(matmul(a, b)); }},
      {"matmul_nt", [&] { return project(matmul_nt(a, c)); }},
      {"add_sub_mul", [&] { return project(mul(add(a, c), sub(a, c))); }},
      {"scale_neg", [&] { return project(neg(scale(add_constant(a, 0.3), 2.5))); }},
      {"exp_log_sqrt", [&] { return project(add(exp(scale(a, 0.3)), mul(log(pos), sqrt(pos)))); }},
      {"square_sigmoid_gelu", [&] { return project(add(square(a), mul(sigmoid(c), gelu(a)))); }},
      {"add_bias_mul_rows", [&] { return project(mul_rows(add_bias(a, v4), v3)); }},
      {"mul_element", [&] { return project(mul_element(slice_cols(a, 1, 3), v4, 2)); }},
      {"scalar_ops", [&] { return project(div_scalar(sub_scalar(a, s), add_constant(square(s), 1.0))); }},
      {"reductions", [&] { return add(mean(square(a)), element(reshape(c, {12}), 5)); }},
      {"slices_concat_gather",
       [&] {
         return project(concat_rows({concat_cols({slice_cols(a, 0, 2), slice_cols(c, 1, 3)}), slice_rows(a, 1, 2),
                                     gather_rows(c, {2, 0, 2})}));
       }},
      {"softmax_masked", [&] { return project(softmax_rows(a, &key_mask)); }},
      {"log_softmax", [&] { return project(log_softmax(a)); }},
      {"layer_norm", [&] { return project(layer_norm(a, v4, add_constant(v4, 0.5))); }},
  };
  for (const auto& [name, f] : cases) {
    const auto r = grad_check(leaves, f);
    EXPECT_LT(r.worst, 1e-6) << name << ": " << r.worst_where;
  }
}

TEST(Tensor, LeafGradientsAccumulateUntilZeroed) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  backward(sum(square(x)));
  backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  backward(sum(x));
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
}

TEST(Tensor, SharedSubexpressionGradient) {
  Tensor x = Tensor::scalar(3.0, true);
  const Tensor y = mul(x, x);
  backward(add(y, y));  // d/dx 2x^2 = 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Tensor, StraightThroughRoundsForwardPassesGradient) {
  Tensor x = Tensor::vector({0.2, 0.7}, true);
  const Tensor y = straight_through(x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 1.0);
  backward(dot(y, Tensor::vector({3.0, 5.0})));
  EXPECT_EQ(x.grad()[0], 3.0);
  EXPECT_EQ(x.grad()[1], 5.0);
}

TEST(Tensor, DetachCutsGradient) {
  Tensor x = Tensor::scalar(2.0, true);
  const Tensor y = add(mul(detach(x), x), Tensor::scalar(0.0));
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Tensor, FlopCounterCountsMultiplyAccumulatesAndActivations) {
  FlopCounter c;
  {
    FlopCountScope scope(c);
    matmul(Tensor::zeros({3, 4}), Tensor::zeros({4, 5}));
    matmul_nt(Tensor::zeros({2, 6}), Tensor::zeros({7, 6}));
    gelu(Tensor::zeros({3, 3}));
    softmax_rows(Tensor::zeros({2, 2}));
    layer_norm(Tensor::zeros({2, 2}), Tensor::filled({2}, 1.0), Tensor::zeros({2}));
  }
  EXPECT_EQ(c.matmul, 2u * 3 * 4 * 5 + 2u * 2 * 6 * 7);
  EXPECT_EQ(c.activation, 9u);
  matmul(Tensor::zeros({3, 4}), Tensor::zeros({4, 5}));  // outside the scope
  EXPECT_EQ(c.matmul, 2u * 3 * 4 * 5 + 2u * 2 * 6 * 7);
}

TEST(Tensor, OperationsStayFiniteOnFiniteInput) {
  RngStream rng(5);
  const Tensor x = randn({4, 6}, rng, false, 50.0);
  for (const Tensor& y : {softmax_rows(x), log_softmax(x), gelu(x), sigmoid(x),
                          layer_norm(x, Tensor::filled({6}, 1.0), Tensor::zeros({6}))})
    for (double v : y.values()) EXPECT_TRUE(std::isfinite(v));
}
