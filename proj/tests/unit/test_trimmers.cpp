#include <gtest/gtest.h>

#include <cmath>

#include "adaprune/trimmers.hpp"
#include "test_util.hpp"

using namespace adaprune;
using namespace adaprune::testing;

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, bool grad = false) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

std::vector<double> loop_linear(const std::vector<double>& x, std::size_t n, std::size_t in, const LinearParams& l) {
  const std::size_t out = l.b.size();
  std::vector<double> y(n * out);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) {
      double s = l.b[j];
      for (std::size_t k = 0; k < in; ++k) s += x[i * in + k] * l.w[k * out + j];
      y[i * out + j] = s;
    }
  return y;
}

struct TrimmerFixture {
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  ModelParams m;
  TrimmerFixture() {
    store = init_parameters(cfg, 11);
    RngStream rng(12);
    perturb(store, rng, 0.3);
    m = bind_parameters(cfg, store);
  }
};

}  // namespace

TEST(Standardize, MatchesSampleMoments) {
  RngStream rng(1);
  const Tensor s = random_tensor({9}, rng);
  const Tensor z = standardize(s);
  double mu = 0, var = 0;
  for (double v : s.values()) mu += v / 9;
  for (double v : s.values()) var += (v - mu) * (v - mu) / 9;
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(z[i], (s[i] - mu) / std::sqrt(var + kStandardizeEps), 1e-13);
}

TEST(Standardize, BinaryWeightsUseSurvivorStatisticsOnly) {
  RngStream rng(2);
  const Tensor s = random_tensor({7}, rng);
  const std::vector<double> w = {1, 0, 1, 1, 0, 0, 1};
  const Tensor wt = Tensor::vector(w);
  const Tensor z = standardize(s, &wt);
  const Tensor sub = Tensor::vector({s[0], s[2], s[3], s[6]});
  const Tensor zs = standardize(sub);
  EXPECT_NEAR(z[0], zs[0], 1e-13);
  EXPECT_NEAR(z[2], zs[1], 1e-13);
  EXPECT_NEAR(z[3], zs[2], 1e-13);
  EXPECT_NEAR(z[6], zs[3], 1e-13);
}

TEST(Standardize, ConstantScoresStayFinite) {
  const Tensor z = standardize(Tensor::filled({4}, 3.0));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(TokenImportance, MatchesLoopOracle) {
  TrimmerFixture f;
  const auto& p = f.m.visual[0].tok_trim;
  RngStream rng(3);
  const Tensor x = random_tensor({5, 8}, rng), xc = random_tensor({1, 8}, rng), yc = random_tensor({1, 8}, rng);
  const TokenScores s = token_importance(p, x, xc, yc);

  const auto red = loop_linear(x.values(), 5, 8, p.reduce);
  auto h = loop_linear(red, 5, 4, p.local1);
  for (auto& v : h) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  const auto local = loop_linear(h, 5, 4, p.local2);
  std::vector<double> cat(xc.values());
  cat.insert(cat.end(), yc.values().begin(), yc.values().end());
  const auto g = loop_linear(cat, 1, 16, p.fuse);
  std::vector<double> raw(5, 0.0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b) raw[i] += g[a] * p.w_g[a * 4 + b] * red[i * 4 + b];
  double mu = 0, var = 0;
  for (double v : raw) mu += v / 5;
  for (double v : raw) var += (v - mu) * (v - mu) / 5;
  for (std::size_t i = 0; i < 5; ++i) {
    const double glob = (raw[i] - mu) / std::sqrt(var + kStandardizeEps);
    EXPECT_NEAR(s.local[i], local[i], 1e-12);
    EXPECT_NEAR(s.global[i], glob, 1e-10);
    EXPECT_NEAR(s.total[i], local[i] + glob, 1e-10);
  }
  const TokenScores lo = token_importance(p, x, xc, yc, nullptr, false);
  EXPECT_EQ(lo.total.values(), lo.local.values());
}

TEST(TokenImportance, FreshTrimmerScoresAreZero) {
  const ModelConfig c = tiny_config();
  const auto store = init_parameters(c, 5);
  const auto m = bind_parameters(c, store);
  RngStream rng(4);
  const Tensor x = random_tensor({5, 8}, rng), xc = random_tensor({1, 8}, rng);
  const TokenScores s = token_importance(m.visual[0].tok_trim, x, xc, xc);
  for (double v : s.total.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(head_importance(m.cross[0].vis.mca_head_trim, ModuleKind::mca, xc, &xc).values(), std::vector<double>(2, 0.0));
}

TEST(HeadImportance, ShapesAndMcaRequiresOtherCls) {
  TrimmerFixture f;
  RngStream rng(5);
  const Tensor xc = random_tensor({1, 8}, rng), yc = random_tensor({1, 8}, rng);
  EXPECT_EQ(head_importance(f.m.cross[0].vis.msa_head_trim, ModuleKind::msa, xc).size(), 2u);
  EXPECT_EQ(head_importance(f.m.cross[0].vis.mca_head_trim, ModuleKind::mca, xc, &yc).size(), 2u);
  EXPECT_THROW(head_importance(f.m.cross[0].vis.mca_head_trim, ModuleKind::mca, xc), std::invalid_argument);
}

TEST(HeadImportance, MatchesLoopOracle) {
  TrimmerFixture f;
  const auto& p = f.m.cross[0].txt.mca_head_trim;
  RngStream rng(6);
  const Tensor xc = random_tensor({1, 8}, rng), yc = random_tensor({1, 8}, rng);
  std::vector<double> cat(xc.values());
  cat.insert(cat.end(), yc.values().begin(), yc.values().end());
  auto h = loop_linear(cat, 1, 16, p.fc1);
  for (auto& v : h) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  const auto want = loop_linear(h, 1, 4, p.fc2);
  EXPECT_LT(max_abs_diff(head_importance(p, ModuleKind::mca, xc, &yc).values(), want), 1e-12);
}

TEST(TrimmerGradients, PassFiniteDifferences) {
  TrimmerFixture f;
  RngStream rng(7);
  Tensor x = random_tensor({5, 8}, rng, true), xc = random_tensor({1, 8}, rng, true),
         yc = random_tensor({1, 8}, rng, true);
  const auto noise = GumbelNoise::draw(5, rng);
  const auto hnoise = GumbelNoise::draw(2, rng);
  const Tensor weights = Tensor::vector({1, 1, 0, 1, 1});
  std::vector<std::pair<std::string, Tensor>> leaves = {{"x", x}, {"xc", xc}, {"yc", yc}};
  for (auto& [name, t] : f.store.entries())
    if (name.rfind("vis.L0.tok_trim", 0) == 0 || name.rfind("cross.L0.vis.mca_head_trim", 0) == 0)
      leaves.emplace_back(name, t);
  const Tensor coef = random_tensor({5}, rng), hcoef = random_tensor({2}, rng);
  const auto r = grad_check(leaves, [&] {
    const auto s = token_importance(f.m.visual[0].tok_trim, x, xc, yc, &weights);
    const Tensor tm = force_cls(gumbel_sigmoid(s.total, 0.7, noise));
    const Tensor hm = gumbel_sigmoid(head_importance(f.m.cross[0].vis.mca_head_trim, ModuleKind::mca, xc, &yc), 1.3,
                                     hnoise);
    return add(dot(tm, coef), dot(hm, hcoef));
  });
  EXPECT_LT(r.worst, 1e-6) << r.worst_where;
}

TEST(Gumbel, ZeroNoiseIsTemperedSigmoid) {
  const Tensor pi = Tensor::vector({-2.0, 0.0, 0.5, 3.0});
  for (double tau : {0.1, 1.0, 4.0}) {
    const Tensor m = gumbel_sigmoid(pi, tau, GumbelNoise::zero(4));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(m[i], 1.0 / (1.0 + std::exp(-pi[i] / tau)), 1e-15);
  }
}

TEST(Gumbel, MatchesTwoExponentialForm) {
  RngStream rng(8);
  const Tensor pi = random_tensor({6}, rng);
  const auto z = GumbelNoise::draw(6, rng);
  const double tau = 0.8;
  const Tensor m = gumbel_sigmoid(pi, tau, z);
  for (std::size_t i = 0; i < 6; ++i) {
    const double a = std::exp((pi[i] + z.g1[i]) / tau), b = std::exp(z.g2[i] / tau);
    EXPECT_NEAR(m[i], a / (a + b), 1e-12);
  }
}

TEST(Gumbel, ExceedsHalfWithSigmoidProbability) {
  RngStream rng(9);
  const std::size_t n = 20000;
  for (double pi : {-1.0, 0.0, 1.5}) {
    const Tensor p = Tensor::filled({n}, pi);
    const Tensor m = gumbel_sigmoid_sample(p, 0.5, rng);
    double hits = 0;
    for (double v : m.values()) hits += v > 0.5;
    EXPECT_NEAR(hits / n, 1.0 / (1.0 + std::exp(-pi)), 0.015);
  }
}

TEST(Gumbel, RejectsBadArguments) {
  RngStream rng(10);
  EXPECT_THROW(gumbel_sigmoid(Tensor::vector({0.0}), 0.0, GumbelNoise::zero(1)), std::invalid_argument);
  EXPECT_THROW(gumbel_sigmoid(Tensor::vector({0.0, 1.0}), 1.0, GumbelNoise::zero(1)), ShapeError);
  EXPECT_THROW(gumbel_sigmoid_sample(Tensor::vector({0.0}), -1.0, rng), std::invalid_argument);
}

TEST(Gumbel, StandardGumbelMoments) {
  RngStream rng(11);
  const std::size_t n = 200000;
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = rng.gumbel();
    s += g;
    s2 += g * g;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.5772156649, 0.01);
  EXPECT_NEAR(var, M_PI * M_PI / 6.0, 0.03);
}

TEST(ForceCls, SetsFirstEntryAndCutsItsGradient) {
  Tensor m = Tensor::vector({0.2, 0.3, 0.9}, true);
  const Tensor f = force_cls(m);
  EXPECT_EQ(f.values(), (std::vector<double>{1.0, 0.3, 0.9}));
  backward(sum(f));
  EXPECT_EQ(m.grad()[0], 0.0);
  EXPECT_EQ(m.grad()[1], 1.0);
}

TEST(InferenceMask, DeterministicThresholdAndCls) {
  const std::vector<double> pi = {-5.0, 0.1, -0.1, 2.0};
  EXPECT_EQ(inference_mask(pi, InferenceMode::deterministic, true), (std::vector<double>{1, 1, 0, 1}));
  EXPECT_EQ(inference_mask(pi, InferenceMode::deterministic, false), (std::vector<double>{0, 1, 0, 1}));
  EXPECT_EQ(inference_mask(pi, InferenceMode::deterministic, false, nullptr, 1.0), (std::vector<double>{0, 0, 0, 1}));
  EXPECT_THROW(inference_mask(pi, InferenceMode::bernoulli, false), std::invalid_argument);
}

TEST(InferenceMask, BernoulliKeepsWithSigmoidProbability) {
  RngStream rng(12);
  const std::vector<double> pi(20000, 0.8);
  const auto m = inference_mask(pi, InferenceMode::bernoulli, false, &rng);
  double kept = 0;
  for (double v : m) {
    EXPECT_TRUE(v == 0.0 || v == 1.0);
    kept += v;
  }
  EXPECT_NEAR(kept / pi.size(), 1.0 / (1.0 + std::exp(-0.8)), 0.015);
}
