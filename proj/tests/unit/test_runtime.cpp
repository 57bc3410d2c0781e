#include <gtest/gtest.h>

#include <sstream>

#include "adaprune/runtime.hpp"
#include "adaprune/training.hpp"
#include "test_util.hpp"

using namespace adaprune;
using namespace adaprune::testing;

namespace {

struct Fixture {
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  ModelParams m;
  explicit Fixture(std::uint64_t seed = 21) {
    store = init_parameters(cfg, seed);
    RngStream rng(seed + 1);
    perturb(store, rng, 0.3);
    m = bind_parameters(cfg, store);
  }
};

MaskSet cumulative(const ModelConfig& c, MaskSet ms) {
  std::vector<double> vis(c.n_visual, 1.0), txt(c.n_text, 1.0);
  const auto sites = token_sites(c);
  for (std::size_t i = 0; i < sites.size(); ++i) {
    auto& alive = sites[i].stream == Stream::visual ? vis : txt;
    auto& m = ms.token[i];
    for (std::size_t j = 0; j < alive.size(); ++j) alive[j] = m.values[j] = alive[j] * m.values[j];
  }
  return ms;
}

}  // namespace

TEST(Runtime, AllOnesGatheredEqualsPlain) {
  Fixture f;
  RngStream rng(1);
  for (int i = 0; i < 20; ++i) {
    const ModelInput in = random_input(f.cfg, rng);
    const auto g = encode_gathered(f.m, in, all_ones_gathered_policy());
    EXPECT_LT(max_abs_diff(g.logits, encode_plain(f.m, in).logits.values()), 1e-12);
  }
}

TEST(Runtime, GatheredMatchesSoftAtBinaryMasks) {
  Fixture f;
  RngStream rng(2);
  for (int i = 0; i < 50; ++i) {
    const ModelInput in = random_input(f.cfg, rng);
    const MaskSet ms = random_binary_masks(f.cfg, rng, 0.5);
    const auto soft = encode(f.m, in, ms);
    const auto gathered = encode_gathered(f.m, in, fixed_gathered_policy(ms));
    EXPECT_LT(max_abs_diff(soft.logits.values(), gathered.logits), 1e-10);
    const MaskSet want = cumulative(f.cfg, ms);
    ASSERT_EQ(gathered.masks.token.size(), want.token.size());
    for (std::size_t s = 0; s < want.token.size(); ++s) EXPECT_EQ(gathered.masks.token[s].values, want.token[s].values);
    for (std::size_t s = 0; s < want.head.size(); ++s) EXPECT_EQ(gathered.masks.head[s].values, want.head[s].values);
  }
}

TEST(Runtime, TokenPrunedAtFirstSiteHasNoInfluence) {
  Fixture f;
  RngStream rng(3);
  ModelInput in = random_input(f.cfg, rng);
  MaskSet ms = all_ones_masks(f.cfg);
  ms.token[1].values[2] = 0.0;  // vis.L0.tok, patch row 1
  ASSERT_EQ(ms.token[1].site, "vis.L0.tok");
  const auto before = encode_gathered(f.m, in, fixed_gathered_policy(ms)).logits;
  const auto soft_before = encode(f.m, in, ms).logits.values();
  for (std::size_t k = 0; k < f.cfg.patch_dim; ++k) in.patches[1 * f.cfg.patch_dim + k] += 5.0;
  EXPECT_EQ(encode_gathered(f.m, in, fixed_gathered_policy(ms)).logits, before);
  EXPECT_LT(max_abs_diff(encode(f.m, in, ms).logits.values(), soft_before), 1e-12);
}

TEST(Runtime, ClsSurvivesEvenWhenMaskDropsIt) {
  Fixture f;
  RngStream rng(4);
  MaskSet ms = all_ones_masks(f.cfg);
  for (auto& m : ms.token) std::fill(m.values.begin(), m.values.end(), 0.0);
  const auto g = encode_gathered(f.m, random_input(f.cfg, rng), fixed_gathered_policy(ms));
  for (const auto& m : g.masks.token) {
    EXPECT_EQ(m.values[0], 1.0);
    for (std::size_t j = 1; j < m.values.size(); ++j) EXPECT_EQ(m.values[j], 0.0);
  }
}

TEST(Runtime, SoftTrainMasksAreCumulativeAndKeepCls) {
  Fixture f;
  RngStream rng(5);
  const TrimmerOptions opt;
  const auto r = forward_adaptive(f.m, random_input(f.cfg, rng), RunMode::train, rng, opt);
  ASSERT_TRUE(r.soft.has_value());
  const auto sites = token_sites(f.cfg);
  std::vector<double> vis(f.cfg.n_visual, 1.0), txt(f.cfg.n_text, 1.0);
  for (std::size_t i = 0; i < sites.size(); ++i) {
    auto& prev = sites[i].stream == Stream::visual ? vis : txt;
    const auto& m = r.masks.token[i].values;
    EXPECT_EQ(m[0], 1.0);
    for (std::size_t j = 0; j < m.size(); ++j) {
      EXPECT_GE(m[j], 0.0);
      EXPECT_LE(m[j], prev[j] + 1e-15);
    }
    prev = m;
  }
  for (const auto& h : r.masks.head)
    for (double v : h.values) EXPECT_TRUE(v > 0.0 && v < 1.0);
}

TEST(Runtime, InferModeYieldsBinaryMasksAndThresholdsControlRetention) {
  Fixture f;
  RngStream rng(6);
  const ModelInput in = random_input(f.cfg, rng);
  TrimmerOptions keep_all, keep_none;
  keep_all.token_threshold = keep_all.head_threshold = -1e9;
  keep_none.token_threshold = keep_none.head_threshold = 1e9;
  const auto a = forward_adaptive(f.m, in, RunMode::infer, rng, keep_all);
  const auto b = forward_adaptive(f.m, in, RunMode::infer, rng, keep_none);
  EXPECT_TRUE(a.masks.is_binary());
  EXPECT_EQ(retention_stats(a.masks).beta_T, 1.0);
  EXPECT_EQ(retention_stats(a.masks).beta_H, 1.0);
  EXPECT_LT(max_abs_diff(a.logits, encode_plain(f.m, in).logits.values()), 1e-12);
  EXPECT_EQ(retention_stats(b.masks).beta_H, 0.0);
  EXPECT_NEAR(retention_stats(b.masks).beta_T, (1.0 / 5 + 1.0 / 5 + 1.0 / 5 + 1.0 / 5) / 4, 1e-15);
}

TEST(Runtime, SameSeedSameResult) {
  Fixture f;
  RngStream in_rng(7);
  const ModelInput in = random_input(f.cfg, in_rng);
  const TrimmerOptions opt;
  RngStream r1(99), r2(99);
  const auto a = forward_adaptive(f.m, in, RunMode::train, r1, opt);
  const auto b = forward_adaptive(f.m, in, RunMode::train, r2, opt);
  EXPECT_EQ(a.logits, b.logits);
  TrimmerOptions bern;
  bern.inference = InferenceMode::bernoulli;
  RngStream r3(5), r4(5);
  EXPECT_EQ(forward_adaptive(f.m, in, RunMode::infer, r3, bern).logits,
            forward_adaptive(f.m, in, RunMode::infer, r4, bern).logits);
}

TEST(Runtime, AblationSwitchesDisablePruning) {
  Fixture f;
  RngStream rng(8);
  const ModelInput in = random_input(f.cfg, rng);
  TrimmerOptions opt;
  opt.prune_tokens = false;
  opt.prune_heads = false;
  opt.token_threshold = opt.head_threshold = 1e9;
  const auto r = forward_adaptive(f.m, in, RunMode::infer, rng, opt);
  EXPECT_EQ(retention_stats(r.masks).beta_T, 1.0);
  EXPECT_EQ(retention_stats(r.masks).beta_H, 1.0);
  const auto s = forward_adaptive(f.m, in, RunMode::train, rng, opt);
  EXPECT_LT(max_abs_diff(s.logits, encode_plain(f.m, in).logits.values()), 1e-12);
}

TEST(Runtime, AdaptiveLossGradientsPassFiniteDifferences) {
  Fixture f;
  RngStream rng(9);
  const ModelInput in = random_input(f.cfg, rng);
  std::vector<std::pair<std::string, Tensor>> leaves(f.store.entries().begin(), f.store.entries().end());
  const TrimmerOptions opt{.tau = 0.7};
  // The teacher is a stop-gradient, so it is frozen at the unperturbed
  // parameters for the numeric side as well.
  const Tensor teacher = detach(encode_plain(f.m, in).logits);
  const auto r = grad_check(leaves, [&] {
    RngStream noise(1234);
    const auto sparse = encode_soft(f.m, in, trimmer_soft_policy(opt, noise));
    const Tensor loss = add(task_loss(encode_plain(f.m, in).logits, 1), kl_divergence(sparse.logits, teacher));
    return add(loss, scale(cost_loss(retention_tensors(sparse), 0.6, 0.4), 20.0));
  });
  EXPECT_LT(r.worst, 1e-5) << r.worst_where;
}

TEST(Retention, StatsMatchHandComputation) {
  MaskSet ms;
  ms.token = {{"a", {1, 1, 0, 0}}, {"b", {1, 0, 0, 0, 0, 0, 0, 0}}};
  ms.head = {{"h", {1, 0.5, 0, 1}}};
  const auto st = retention_stats(ms);
  EXPECT_DOUBLE_EQ(st.beta_T, (0.5 + 0.125) / 2);
  EXPECT_DOUBLE_EQ(st.beta_H, 0.625);
  ASSERT_EQ(st.token_sites.size(), 2u);
  EXPECT_EQ(st.token_sites[1].first, "b");
  const auto empty = retention_stats(MaskSet{});
  EXPECT_EQ(empty.beta_T, 1.0);
  EXPECT_EQ(empty.beta_H, 1.0);
}

TEST(Retention, TensorsAgreeWithStats) {
  Fixture f;
  RngStream rng(10);
  const TrimmerOptions opt;
  const auto r = forward_adaptive(f.m, random_input(f.cfg, rng), RunMode::train, rng, opt);
  const auto t = retention_tensors(*r.soft);
  const auto st = retention_stats(r.masks);
  EXPECT_NEAR(t.beta_T->item(), st.beta_T, 1e-15);
  EXPECT_NEAR(t.beta_H->item(), st.beta_H, 1e-15);
}

TEST(MaskTrace, RoundTripsExactly) {
  Fixture f;
  RngStream rng(11);
  std::vector<MaskTraceEntry> entries;
  const TrimmerOptions opt;
  for (std::size_t i = 0; i < 3; ++i)
    entries.push_back({i * 7, forward_adaptive(f.m, random_input(f.cfg, rng), RunMode::train, rng, opt).masks});
  std::stringstream ss;
  ss << "# comment\n";
  write_mask_trace(ss, entries);
  const auto back = read_mask_trace(ss);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].instance, entries[i].instance);
    ASSERT_EQ(back[i].masks.token.size(), entries[i].masks.token.size());
    for (std::size_t s = 0; s < back[i].masks.token.size(); ++s) {
      EXPECT_EQ(back[i].masks.token[s].site, entries[i].masks.token[s].site);
      EXPECT_EQ(back[i].masks.token[s].values, entries[i].masks.token[s].values);
    }
    for (std::size_t s = 0; s < back[i].masks.head.size(); ++s)
      EXPECT_EQ(back[i].masks.head[s].values, entries[i].masks.head[s].values);
  }
}

TEST(MaskTrace, RejectsMalformedLines) {
  std::stringstream a("0\ttoken\tsite\n");
  EXPECT_THROW(read_mask_trace(a), std::runtime_error);
  std::stringstream b("0\tneuron\tsite\t1,0\n");
  EXPECT_THROW(read_mask_trace(b), std::runtime_error);
}
