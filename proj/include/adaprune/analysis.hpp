#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaprune/backbone.hpp"
#include "adaprune/dataset.hpp"
#include "adaprune/efficiency.hpp"
#include "adaprune/rng.hpp"
#include "adaprune/runtime.hpp"
#include "adaprune/training.hpp"

namespace adaprune {

// ---------------------------------------------------------------------------
// Redundancy metrics

namespace detail {
inline double row_sq(const double* a, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * a[i];
  return s;
}
inline double row_dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}
// Exactly 1 for identical rows, since sqrt(x * x) == x in IEEE arithmetic.
inline double cosine(const double* a, const double* b, std::size_t n, double sq_a, double sq_b) {
  return row_dot(a, b, n) / std::sqrt(sq_a * sq_b);
}
}  // namespace detail

/// Mean pairwise cosine similarity between the rows of an [N x D] matrix.
inline double token_similarity(std::span<const double> x, std::size_t n, std::size_t d) {
  if (n < 2) throw std::invalid_argument("token_similarity: need at least 2 rows");
  if (x.size() != n * d) throw ShapeError("token_similarity: data length does not match N x D");
  std::vector<double> sq(n);
  for (std::size_t i = 0; i < n; ++i) {
    sq[i] = detail::row_sq(&x[i * d], d);
    if (sq[i] == 0.0) throw std::invalid_argument("token_similarity: row " + std::to_string(i) + " has zero norm");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s += detail::cosine(&x[i * d], &x[j * d], d, sq[i], sq[j]);
  return 2.0 * s / (static_cast<double>(n) * static_cast<double>(n - 1));
}

inline double token_similarity(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("token_similarity: expected a matrix");
  return token_similarity(x.data(), x.rows(), x.cols());
}

/// Mean cosine similarity between heads' attention rows, averaged over
/// query positions. Layout: heads x nq x nkv.
inline double head_similarity(std::span<const double> a, std::size_t heads, std::size_t nq, std::size_t nkv) {
  if (heads < 2) throw std::invalid_argument("head_similarity: need at least 2 heads");
  if (a.size() != heads * nq * nkv) throw ShapeError("head_similarity: data length does not match H x Nq x Nkv");
  if (nq == 0) throw std::invalid_argument("head_similarity: no query rows");
  double s = 0.0;
  for (std::size_t k = 0; k < nq; ++k) {
    for (std::size_t i = 0; i < heads; ++i) {
      const double* ai = &a[(i * nq + k) * nkv];
      const double si = detail::row_sq(ai, nkv);
      for (std::size_t j = i + 1; j < heads; ++j) {
        const double* aj = &a[(j * nq + k) * nkv];
        s += detail::cosine(ai, aj, nkv, si, detail::row_sq(aj, nkv));
      }
    }
  }
  return 2.0 * s / (static_cast<double>(heads) * static_cast<double>(heads - 1) * static_cast<double>(nq));
}

inline double head_similarity(const AttentionRecord& r) { return head_similarity(r.values, r.heads, r.nq, r.nkv); }

struct RedundancyRow {
  std::string metric;  // "S_T" or "S_A"
  std::string layer;   // block or attention module name
  double mean = 0, stddev = 0, min = 0, max = 0;
  std::size_t count = 0;
};

/// Per-layer S_T (block outputs) and S_A (attention modules) over a sample,
/// from the unpruned forward.
inline std::vector<RedundancyRow> redundancy_profile(const ModelParams& m, const std::vector<SyntheticInstance>& data) {
  if (data.empty()) throw std::invalid_argument("redundancy_profile: empty sample");
  std::vector<std::vector<double>> st, sa;
  std::vector<std::string> blocks, modules;
  for (const auto& inst : data) {
    Activations acts;
    encode_plain(m, inst.input, &acts);
    if (blocks.empty()) {
      for (const auto& r : acts.tokens) blocks.push_back(r.block);
      for (const auto& r : acts.attention) modules.push_back(r.module);
      st.resize(blocks.size());
      sa.resize(modules.size());
    }
    for (std::size_t i = 0; i < acts.tokens.size(); ++i)
      st[i].push_back(token_similarity(acts.tokens[i].values, acts.tokens[i].rows, acts.tokens[i].cols));
    for (std::size_t i = 0; i < acts.attention.size(); ++i)
      if (acts.attention[i].heads >= 2) sa[i].push_back(head_similarity(acts.attention[i]));
  }
  auto stats = [](const std::string& metric, const std::string& layer, const std::vector<double>& v) {
    RedundancyRow r{metric, layer};
    r.count = v.size();
    if (v.empty()) return r;
    const double n = static_cast<double>(v.size());
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double var = 0.0;
    for (double x : v) var += (x - r.mean) * (x - r.mean);
    r.stddev = std::sqrt(var / n);
    r.min = *std::min_element(v.begin(), v.end());
    r.max = *std::max_element(v.begin(), v.end());
    return r;
  };
  std::vector<RedundancyRow> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) out.push_back(stats("S_T", blocks[i], st[i]));
  for (std::size_t i = 0; i < modules.size(); ++i) out.push_back(stats("S_A", modules[i], sa[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Token pruning baselines

enum class TokenBaseline { random, attn, local };

inline TokenBaseline parse_token_baseline(const std::string& s) {
  if (s == "random") return TokenBaseline::random;
  if (s == "attn") return TokenBaseline::attn;
  if (s == "local") return TokenBaseline::local;
  throw std::invalid_argument("unknown token baseline '" + s + "' (expected random, attn or local)");
}

/// Number of content rows kept out of n_content at a retention ratio.
inline std::size_t kept_count(double ratio, std::size_t n) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("retention ratio must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  return std::min(k, n);
}

namespace detail {
// Indices of the k largest scores; ties go to the lower index.
inline std::vector<std::size_t> top_k(const std::vector<double>& score, std::size_t k) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}
}  // namespace detail

/// Binary keep mask over n rows (row 0 is CLS and always kept) retaining
/// ceil(ratio * (n - 1)) content rows. `score` holds one value per row: the
/// CLS attention row for attn, the local trimmer score for local; it is
/// ignored for random.
inline std::vector<double> baseline_token_prune(TokenBaseline kind, std::size_t n, const std::vector<double>& score,
                                                double ratio, RngStream& rng) {
  if (n == 0) throw std::invalid_argument("baseline_token_prune: empty sequence");
  const std::size_t content = n - 1;
  const std::size_t k = kept_count(ratio, content);
  std::vector<double> keep(n, 0.0);
  keep[0] = 1.0;
  if (kind == TokenBaseline::random) {
    const auto perm = rng.permutation(content);
    for (std::size_t i = 0; i < k; ++i) keep[1 + perm[i]] = 1.0;
    return keep;
  }
  if (score.size() != n) throw ShapeError("baseline_token_prune: score length must equal the row count");
  const std::vector<double> content_score(score.begin() + 1, score.end());
  for (auto i : detail::top_k(content_score, k)) keep[1 + i] = 1.0;
  return keep;
}

// ---------------------------------------------------------------------------
// Head importance and head pruning baselines

/// Per head-trimmed module, E_x |dL/dm_h| at m = 1, where m_h scales head h's
/// context and L is the cross-entropy against the model's own prediction.
/// Since the context enters linearly, dL/dm_h equals the contraction of the
/// head's context with the loss gradient at that context.
inline std::vector<std::vector<double>> grad_head_importance(const ModelParams& m,
                                                             const std::vector<SyntheticInstance>& batch) {
  if (batch.empty()) throw std::invalid_argument("grad_head_importance: empty batch");
  const auto sites = head_sites(m.cfg);
  std::vector<std::vector<double>> imp(sites.size(), std::vector<double>(m.cfg.heads, 0.0));
  for (const auto& inst : batch) {
    std::vector<Tensor> gates;
    SoftPolicy p;
    p.token = [](const SoftTokenSite& s) { return s.prev; };
    p.head = [&gates](const HeadSite& s) {
      gates.push_back(Tensor::filled({s.heads}, 1.0, true));
      return gates.back();
    };
    const SoftForward f = encode_soft(m, inst.input, p);
    const std::size_t pseudo = argmax(f.logits.values());
    backward(task_loss(f.logits, pseudo));
    for (std::size_t s = 0; s < gates.size(); ++s)
      for (std::size_t h = 0; h < m.cfg.heads; ++h)
        imp[s][h] += std::abs(gates[s].has_grad() ? gates[s].grad()[h] : 0.0) / static_cast<double>(batch.size());
  }
  return imp;
}

enum class HeadBaseline { random, grad_local, grad_all };

inline HeadBaseline parse_head_baseline(const std::string& s) {
  if (s == "random") return HeadBaseline::random;
  if (s == "grad_local") return HeadBaseline::grad_local;
  if (s == "grad_all") return HeadBaseline::grad_all;
  throw std::invalid_argument("unknown head baseline '" + s + "' (expected random, grad_local or grad_all)");
}

/// Head masks per module. random and grad_local keep ceil(ratio * H) heads in
/// each module; grad_all keeps ceil(ratio * H * modules) heads model-wide,
/// ties broken by (module, head).
inline std::vector<std::vector<double>> baseline_head_prune(HeadBaseline kind,
                                                            const std::vector<std::vector<double>>& importance,
                                                            double ratio, RngStream& rng) {
  std::vector<std::vector<double>> masks;
  for (const auto& row : importance) masks.emplace_back(row.size(), 0.0);
  if (importance.empty()) return masks;
  if (kind == HeadBaseline::grad_all) {
    std::vector<double> flat;
    std::vector<std::pair<std::size_t, std::size_t>> where;
    for (std::size_t mi = 0; mi < importance.size(); ++mi)
      for (std::size_t h = 0; h < importance[mi].size(); ++h) {
        flat.push_back(importance[mi][h]);
        where.emplace_back(mi, h);
      }
    for (auto i : detail::top_k(flat, kept_count(ratio, flat.size()))) masks[where[i].first][where[i].second] = 1.0;
    return masks;
  }
  for (std::size_t mi = 0; mi < importance.size(); ++mi) {
    const std::size_t k = kept_count(ratio, importance[mi].size());
    if (kind == HeadBaseline::random) {
      const auto perm = rng.permutation(importance[mi].size());
      for (std::size_t i = 0; i < k; ++i) masks[mi][perm[i]] = 1.0;
    } else {
      for (auto h : detail::top_k(importance[mi], k)) masks[mi][h] = 1.0;
    }
  }
  return masks;
}

// ---------------------------------------------------------------------------
// Ablation harness
//
// Token methods are compared at a matched mean FLOPs ratio with every head
// kept; head methods at a matched mean head retention with every token kept.
// Each method has one scalar knob (threshold offset for the trimmers,
// retention ratio for the baselines) tuned by bisection on the validation
// split; accuracy is then measured on the test split.

enum class AblationFamily { token, head };

struct AblationMethod {
  std::string name;
  AblationFamily family;
};

inline const std::vector<AblationMethod>& ablation_methods() {
  static const std::vector<AblationMethod> v = {
      {"xmodal", AblationFamily::token},      {"local", AblationFamily::token},
      {"random", AblationFamily::token},      {"attn", AblationFamily::token},
      {"head_xmodal", AblationFamily::head},  {"head_random", AblationFamily::head},
      {"grad_local", AblationFamily::head},   {"grad_all", AblationFamily::head},
  };
  return v;
}

inline const AblationMethod& find_ablation_method(const std::string& name) {
  for (const auto& m : ablation_methods())
    if (m.name == name) return m;
  throw std::invalid_argument("unknown ablation method '" + name + "'");
}

struct AblationRow {
  std::string method;
  std::string matched;  // "flops_ratio" or "head_retention"
  double target = 0, knob = 0;
  double val_matched = 0;  // achieved value of the matched quantity on val
  double test_accuracy = 0, test_flops_ratio = 0, test_speedup = 0, test_beta_T = 0, test_beta_H = 0;
};

class AblationHarness {
 public:
  AblationHarness(const ModelParams& m, std::vector<SyntheticInstance> val, std::vector<SyntheticInstance> test,
                  std::size_t importance_sample = 64)
      : m_(m), val_(std::move(val)), test_(std::move(test)) {
    const std::size_t n = std::min(importance_sample, val_.size());
    if (n > 0 && !head_sites(m_.cfg).empty())
      importance_ = grad_head_importance(m_, std::vector<SyntheticInstance>(val_.begin(), val_.begin() + n));
  }

  AblationRow run(const std::string& method, double target) const {
    const auto& am = find_ablation_method(method);
    const bool token = am.family == AblationFamily::token;
    const bool trimmer = method == "xmodal" || method == "local" || method == "head_xmodal";
    auto measure = [&](const std::vector<SyntheticInstance>& data, double knob) {
      return summarize(run_policy(method, knob, data));
    };
    auto matched = [&](const EvalSummary& s) { return token ? s.mean_ratio : s.beta_H; };

    // Matched quantity decreases with a threshold offset and increases with
    // a retention ratio.
    double lo = trimmer ? -30.0 : 1e-6, hi = trimmer ? 30.0 : 1.0;
    double best_knob = trimmer ? 0.0 : 1.0, best_err = 1e300, best_val = 0.0;
    for (int it = 0; it < 40; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double v = matched(measure(val_, mid));
      const double err = std::abs(v - target);
      if (err < best_err) {
        best_err = err;
        best_knob = mid;
        best_val = v;
      }
      if (err < 1e-3) break;
      const bool too_much = v > target;
      if (trimmer == too_much) lo = mid; else hi = mid;
    }
    const EvalSummary s = measure(test_, best_knob);
    AblationRow r;
    r.method = method;
    r.matched = token ? "flops_ratio" : "head_retention";
    r.target = target;
    r.knob = best_knob;
    r.val_matched = best_val;
    r.test_accuracy = s.accuracy;
    r.test_flops_ratio = s.mean_ratio;
    r.test_speedup = s.mean_speedup;
    r.test_beta_T = s.beta_T;
    r.test_beta_H = s.beta_H;
    return r;
  }

  std::vector<InstanceResult> run_policy(const std::string& method, double knob,
                                         const std::vector<SyntheticInstance>& data) const {
    std::vector<InstanceResult> out;
    out.reserve(data.size());
    for (const auto& inst : data) {
      RngStream rng(derive_seed(0xab1a7e, inst.index));
      out.push_back(evaluate_instance(m_, inst, policy(method, knob, rng)));
    }
    return out;
  }

  const std::vector<std::vector<double>>& importance() const { return importance_; }

 private:
  GatheredPolicy policy(const std::string& method, double knob, RngStream& rng) const {
    const auto& am = find_ablation_method(method);
    GatheredPolicy p = all_ones_gathered_policy();
    if (am.family == AblationFamily::token) {
      if (method == "xmodal" || method == "local") {
        const bool use_global = method == "xmodal";
        p.token = [use_global, knob](const GatheredTokenSite& s) {
          const Tensor& pi = use_global ? s.scores.total : s.scores.local;
          return inference_mask(pi.data(), InferenceMode::deterministic, true, nullptr, knob);
        };
      } else {
        const TokenBaseline kind = parse_token_baseline(method);
        p.token = [kind, knob, &rng](const GatheredTokenSite& s) {
          if (kind == TokenBaseline::attn && s.cls_attention.empty())
            return std::vector<double>(s.alive.size(), 1.0);  // no attention map yet
          return baseline_token_prune(kind, s.alive.size(), s.cls_attention, knob, rng);
        };
      }
      return p;
    }
    if (method == "head_xmodal") {
      p.head = [knob](const HeadSite& s) {
        return inference_mask(*s.scores, InferenceMode::deterministic, false, nullptr, knob);
      };
      return p;
    }
    // Static baselines: masks fixed per instance, looked up by module order.
    const auto masks = std::make_shared<std::vector<std::vector<double>>>(
        baseline_head_prune(parse_head_baseline(method.substr(method.rfind("head_") == 0 ? 5 : 0)), importance_,
                            knob, rng));
    const auto sites = std::make_shared<std::vector<HeadSiteInfo>>(head_sites(m_.cfg));
    p.head = [masks, sites](const HeadSite& s) {
      for (std::size_t i = 0; i < sites->size(); ++i)
        if ((*sites)[i].name == s.name) return (*masks)[i];
      throw std::logic_error("no baseline head mask for " + s.name);
    };
    return p;
  }

  const ModelParams& m_;
  std::vector<SyntheticInstance> val_, test_;
  std::vector<std::vector<double>> importance_;
};

}  // namespace adaprune
