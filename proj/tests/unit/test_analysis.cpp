#include <gtest/gtest.h>

#include <cmath>

#include "adaprune/analysis.hpp"
#include "test_util.hpp"

using namespace adaprune;
using namespace adaprune::testing;

namespace {

double loop_cosine_mean(const std::vector<std::vector<double>>& rows) {
  double s = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (i == j) continue;
      double d = 0, a = 0, b = 0;
      for (std::size_t k = 0; k < rows[i].size(); ++k) {
        d += rows[i][k] * rows[j][k];
        a += rows[i][k] * rows[i][k];
        b += rows[j][k] * rows[j][k];
      }
      s += d / std::sqrt(a * b);
      ++pairs;
    }
  return s / static_cast<double>(pairs);
}

RunConfig small_run() {
  RunConfig c;
  c.model.d_model = 16;
  c.model.heads = 4;
  c.model.d_prime = 4;
  c.model.d_ff = 32;
  c.model.layers_uni = 1;
  c.model.layers_cross = 1;
  c.model.n_visual = 10;
  c.model.n_text = 10;
  c.model.vocab = 25;
  c.data.grid = 3;
  c.data.max_objects = 5;
  c.data.train_size = 100;
  c.data.val_size = 12;
  c.data.test_size = 12;
  return c;
}

}  // namespace

TEST(Similarity, TokenMatchesLoopOracle) {
  RngStream rng(1);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + rng.below(8), d = 1 + rng.below(10);
    std::vector<double> flat(n * d);
    std::vector<std::vector<double>> rows(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) rows[i][k] = flat[i * d + k] = rng.normal();
    EXPECT_NEAR(token_similarity(flat, n, d), loop_cosine_mean(rows), 1e-12);
  }
}

TEST(Similarity, TokenTrivialCases) {
  EXPECT_EQ(token_similarity(std::vector<double>{1, 2, 1, 2, 1, 2}, 3, 2), 1.0);
  EXPECT_EQ(token_similarity(std::vector<double>{1, 0, 0, 3}, 2, 2), 0.0);
  EXPECT_EQ(token_similarity(std::vector<double>{2, 0, -5, 0}, 2, 2), -1.0);
  EXPECT_THROW(token_similarity(std::vector<double>{1, 2}, 1, 2), std::invalid_argument);
  EXPECT_THROW(token_similarity(std::vector<double>{1, 2, 0, 0}, 2, 2), std::invalid_argument);
  EXPECT_THROW(token_similarity(std::vector<double>{1, 2, 3}, 2, 2), ShapeError);
}

TEST(Similarity, HeadMatchesLoopOracle) {
  RngStream rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t h = 2 + rng.below(4), nq = 1 + rng.below(5), nkv = 1 + rng.below(6);
    std::vector<double> a(h * nq * nkv);
    for (auto& v : a) v = rng.uniform() + 1e-3;
    double want = 0;
    for (std::size_t q = 0; q < nq; ++q) {
      std::vector<std::vector<double>> rows(h);
      for (std::size_t i = 0; i < h; ++i) rows[i].assign(&a[(i * nq + q) * nkv], &a[(i * nq + q) * nkv] + nkv);
      want += loop_cosine_mean(rows) / static_cast<double>(nq);
    }
    EXPECT_NEAR(head_similarity(a, h, nq, nkv), want, 1e-12);
  }
}

TEST(Similarity, HeadTrivialCases) {
  // Two heads, two queries over two keys.
  EXPECT_EQ(head_similarity(std::vector<double>{0.3, 0.7, 0.5, 0.5, 0.3, 0.7, 0.5, 0.5}, 2, 2, 2), 1.0);
  EXPECT_EQ(head_similarity(std::vector<double>{1, 0, 0, 1, 0, 1, 1, 0}, 2, 2, 2), 0.0);
  EXPECT_THROW(head_similarity(std::vector<double>{1, 0}, 1, 1, 2), std::invalid_argument);
}

TEST(Redundancy, ProfileHasOneRowPerBlockAndModule) {
  const RunConfig c = small_run();
  const auto store = init_parameters(c.model, 1);
  const auto m = bind_parameters(c.model, store);
  const SyntheticTask task(c.data, c.model);
  const auto rows = redundancy_profile(m, task.split("val", 5));
  std::size_t st = 0, sa = 0;
  for (const auto& r : rows) {
    EXPECT_EQ(r.count, 5u);
    EXPECT_LE(r.min, r.mean);
    EXPECT_LE(r.mean, r.max);
    EXPECT_LE(r.max, 1.0 + 1e-12);
    EXPECT_GE(r.stddev, 0.0);
    (r.metric == "S_T" ? st : sa) += 1;
  }
  EXPECT_EQ(st, 4u);
  EXPECT_EQ(sa, 6u);
  EXPECT_THROW(redundancy_profile(m, {}), std::invalid_argument);
}

TEST(TokenBaselines, KeptCountIsCeiling) {
  EXPECT_EQ(kept_count(0.5, 7), 4u);
  EXPECT_EQ(kept_count(0.5, 8), 4u);
  EXPECT_EQ(kept_count(1.0, 8), 8u);
  EXPECT_EQ(kept_count(1e-6, 8), 1u);
  EXPECT_THROW(kept_count(0.0, 8), std::invalid_argument);
  EXPECT_THROW(kept_count(1.5, 8), std::invalid_argument);
}

TEST(TokenBaselines, TopScoresKeptWithClsAndStableTies) {
  RngStream rng(3);
  const std::vector<double> score = {9.0, 0.1, 0.5, 0.5, 0.9, 0.0};
  const auto keep = baseline_token_prune(TokenBaseline::attn, 6, score, 0.6, rng);
  EXPECT_EQ(keep, (std::vector<double>{1, 0, 1, 1, 1, 0}));
  const auto two = baseline_token_prune(TokenBaseline::local, 6, score, 0.4, rng);
  EXPECT_EQ(two, (std::vector<double>{1, 0, 1, 0, 1, 0}));
  EXPECT_THROW(baseline_token_prune(TokenBaseline::attn, 6, {1.0}, 0.5, rng), ShapeError);
  EXPECT_THROW(parse_token_baseline("best"), std::invalid_argument);
}

TEST(TokenBaselines, RandomKeepsExactCountUniformly) {
  RngStream rng(4);
  std::vector<double> hits(9, 0.0);
  for (int t = 0; t < 4000; ++t) {
    const auto keep = baseline_token_prune(TokenBaseline::random, 9, {}, 0.5, rng);
    EXPECT_EQ(keep[0], 1.0);
    double kept = 0;
    for (std::size_t i = 1; i < 9; ++i) {
      kept += keep[i];
      hits[i] += keep[i] / 4000;
    }
    EXPECT_EQ(kept, 4.0);
  }
  for (std::size_t i = 1; i < 9; ++i) EXPECT_NEAR(hits[i], 0.5, 0.04);
}

TEST(HeadBaselines, LocalAndGlobalCounts) {
  RngStream rng(5);
  const std::vector<std::vector<double>> imp = {{0.1, 0.9, 0.3, 0.2}, {0.8, 0.7, 0.6, 0.05}};
  const auto local = baseline_head_prune(HeadBaseline::grad_local, imp, 0.5, rng);
  EXPECT_EQ(local[0], (std::vector<double>{0, 1, 1, 0}));
  EXPECT_EQ(local[1], (std::vector<double>{1, 1, 0, 0}));
  const auto global = baseline_head_prune(HeadBaseline::grad_all, imp, 0.5, rng);
  EXPECT_EQ(global[0], (std::vector<double>{0, 1, 0, 0}));
  EXPECT_EQ(global[1], (std::vector<double>{1, 1, 1, 0}));
  const auto random = baseline_head_prune(HeadBaseline::random, imp, 0.25, rng);
  for (const auto& row : random) EXPECT_EQ(std::count(row.begin(), row.end(), 1.0), 1);
  EXPECT_THROW(parse_head_baseline("taylor"), std::invalid_argument);
}

TEST(HeadImportance, MatchesFiniteDifferenceOfGate) {
  ModelConfig c = tiny_config();
  auto store = init_parameters(c, 6);
  RngStream rng(7);
  perturb(store, rng, 0.3);
  const auto m = bind_parameters(c, store);
  std::vector<SyntheticInstance> batch(3);
  for (auto& b : batch) b.input = random_input(c, rng);
  const auto imp = grad_head_importance(m, batch);
  const auto sites = head_sites(c);
  ASSERT_EQ(imp.size(), sites.size());
  const double h = 1e-6;
  for (std::size_t s = 0; s < sites.size(); ++s)
    for (std::size_t k = 0; k < c.heads; ++k) {
      double want = 0;
      for (const auto& inst : batch) {
        const std::size_t pseudo = argmax(encode_plain(m, inst.input).logits.values());
        auto loss = [&](double g) {
          MaskSet ms = all_ones_masks(c);
          ms.head[s].values[k] = g;
          return task_loss(encode(m, inst.input, ms).logits, pseudo).item();
        };
        want += std::abs((loss(1 + h) - loss(1 - h)) / (2 * h)) / 3.0;
      }
      EXPECT_NEAR(imp[s][k], want, 1e-7 + 1e-5 * want);
    }
}

TEST(Ablation, HarnessMatchesTargets) {
  const RunConfig c = small_run();
  auto store = init_parameters(c.model, 8);
  RngStream rng(9);
  perturb(store, rng, 0.5);
  const auto m = bind_parameters(c.model, store);
  const SyntheticTask task(c.data, c.model);
  const AblationHarness h(m, task.split("val"), task.split("test"), 8);
  const auto r = h.run("head_random", 0.5);
  EXPECT_EQ(r.matched, "head_retention");
  EXPECT_DOUBLE_EQ(r.val_matched, 0.5);
  EXPECT_DOUBLE_EQ(r.test_beta_H, 0.5);
  EXPECT_DOUBLE_EQ(r.test_beta_T, 1.0);
  const auto g = h.run("grad_all", 0.25);
  EXPECT_DOUBLE_EQ(g.test_beta_H, 0.25);
  for (const std::string method : {"xmodal", "random", "attn", "local"}) {
    const auto t = h.run(method, 0.7);
    EXPECT_EQ(t.matched, "flops_ratio");
    EXPECT_NEAR(t.val_matched, 0.7, 0.05) << method;
    EXPECT_EQ(t.test_beta_H, 1.0) << method;
    EXPECT_GE(t.test_accuracy, 0.0);
  }
  EXPECT_THROW(h.run("magic", 0.5), std::invalid_argument);
}

TEST(Ablation, TrimmerThresholdIsMonotone) {
  const RunConfig c = small_run();
  auto store = init_parameters(c.model, 10);
  RngStream rng(11);
  perturb(store, rng, 0.5);
  const auto m = bind_parameters(c.model, store);
  const SyntheticTask task(c.data, c.model);
  const auto val = task.split("val");
  const AblationHarness h(m, val, {}, 0);
  double prev = 2.0;
  for (double knob : {-5.0, -1.0, 0.0, 1.0, 5.0}) {
    const double ratio = summarize(h.run_policy("xmodal", knob, val)).mean_ratio;
    EXPECT_LE(ratio, prev);
    prev = ratio;
  }
}
