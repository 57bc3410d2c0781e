#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaprune/backbone.hpp"
#include "adaprune/config.hpp"

namespace adaprune {

// Analytical FLOPs with the multiply-accumulate = 2 FLOPs convention. Each
// activation element costs 1; softmax, norms, bias adds and residual adds are
// not counted. Pruned heads skip their slices of the Q/K/V and output
// projections.

using flops_t = std::uint64_t;

struct AttentionFlops {
  flops_t qkv = 0, scores = 0, context = 0, out_proj = 0;
  flops_t total() const { return qkv + scores + context + out_proj; }
};

inline AttentionFlops flops_attention_parts(std::size_t nq, std::size_t nkv, std::size_t d, std::size_t heads_kept,
                                            std::size_t head_dim) {
  const flops_t w = static_cast<flops_t>(heads_kept) * head_dim;
  AttentionFlops f;
  f.qkv = 2 * static_cast<flops_t>(nq + 2 * nkv) * d * w;
  f.scores = 2 * static_cast<flops_t>(nq) * nkv * w;
  f.context = 2 * static_cast<flops_t>(nq) * nkv * w;
  f.out_proj = 2 * static_cast<flops_t>(nq) * w * d;
  return f;
}

inline flops_t flops_attention(std::size_t nq, std::size_t nkv, std::size_t d, std::size_t heads_kept,
                               std::size_t head_dim) {
  return flops_attention_parts(nq, nkv, d, heads_kept, head_dim).total();
}

/// Two linear layers plus the activation.
inline flops_t flops_ffn(std::size_t n, std::size_t d, std::size_t d_ff) {
  return 2 * static_cast<flops_t>(n) * d * d_ff * 2 + static_cast<flops_t>(n) * d_ff;
}

/// Token trimmer over n rows: reduction, local MLP, fused CLS projection and
/// the bilinear global score.
inline flops_t flops_token_trimmer(std::size_t n, std::size_t d, std::size_t dp) {
  const flops_t N = n, D = d, P = dp;
  const flops_t reduce = 2 * N * D * P;
  const flops_t local = 2 * N * P * P + N * P + 2 * N * P;
  const flops_t global = 2 * (2 * D) * P + 2 * P * P + 2 * P * N;
  return reduce + local + global;
}

inline flops_t flops_head_trimmer(std::size_t in, std::size_t dp, std::size_t heads) {
  return 2 * static_cast<flops_t>(in) * dp + dp + 2 * static_cast<flops_t>(dp) * heads;
}

struct FlopsBreakdown {
  flops_t qkv = 0, scores = 0, context = 0, out_proj = 0;
  flops_t ffn = 0, token_trimmers = 0, head_trimmers = 0, embeddings = 0, head = 0;
  flops_t baseline = 0;  // same config with all-ones masks

  flops_t attention() const { return qkv + scores + context + out_proj; }
  flops_t trimmers() const { return token_trimmers + head_trimmers; }
  flops_t total() const { return attention() + ffn + trimmers() + embeddings + head; }
  double speedup() const { return static_cast<double>(baseline) / static_cast<double>(total()); }
  double ratio() const { return static_cast<double>(total()) / static_cast<double>(baseline); }

  void add(const AttentionFlops& a) {
    qkv += a.qkv;
    scores += a.scores;
    context += a.context;
    out_proj += a.out_proj;
  }
};

namespace detail {

struct FlopsWalker {
  const ModelConfig& c;
  const MaskSet& masks;
  FlopsBreakdown f;

  static void require_binary(const SiteMask& m) {
    for (double v : m.values)
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("model_flops: soft mask value at site " + m.site +
                                    " (FLOPs accounting needs binary masks)");
  }

  // Applies a cumulative token mask; CLS survives regardless.
  void token_site(const std::string& name, std::vector<bool>& alive, std::size_t& count) {
    const auto* m = masks.find_token(name);
    if (!m) throw std::invalid_argument("model_flops: MaskSet has no token mask for site " + name);
    if (m->values.size() != alive.size())
      throw std::invalid_argument("model_flops: token mask at " + name + " has wrong length");
    require_binary(*m);
    f.token_trimmers += flops_token_trimmer(count, c.d_model, c.trimmer_width());
    count = 0;
    for (std::size_t j = 0; j < alive.size(); ++j) {
      alive[j] = j == 0 || (alive[j] && m->values[j] != 0.0);
      count += alive[j];
    }
  }

  std::size_t head_site(const std::string& name, bool cross_input) {
    const auto* m = masks.find_head(name);
    if (!m) throw std::invalid_argument("model_flops: MaskSet has no head mask for site " + name);
    if (m->values.size() != c.heads)
      throw std::invalid_argument("model_flops: head mask at " + name + " has wrong length");
    require_binary(*m);
    f.head_trimmers += flops_head_trimmer(cross_input ? 2 * c.d_model : c.d_model, c.trimmer_width(), c.heads);
    return static_cast<std::size_t>(std::count(m->values.begin(), m->values.end(), 1.0));
  }

  void attention(std::size_t nq, std::size_t nkv, std::size_t kept) {
    f.add(flops_attention_parts(nq, nkv, c.d_model, kept, c.head_dim()));
  }

  void run() {
    std::vector<bool> alive_t(c.n_text, true), alive_v(c.n_visual, true);
    std::size_t nt = c.n_text, nv = c.n_visual;
    f.embeddings = 2 * static_cast<flops_t>(c.n_visual - 1) * c.patch_dim * c.d_model;

    auto uni = [&](Stream s, bool tok, std::vector<bool>& alive, std::size_t& n) {
      for (std::size_t i = 0; i < c.layers_uni; ++i) {
        const auto p = uni_prefix(s, i);
        if (tok) token_site(p + ".tok", alive, n);
        const std::size_t kept = c.head_prune_uni ? head_site(p + ".msa", false) : c.heads;
        attention(n, n, kept);
        f.ffn += flops_ffn(n, c.d_model, c.d_ff);
      }
    };
    uni(Stream::text, c.token_prune_text, alive_t, nt);
    uni(Stream::visual, c.token_prune_visual, alive_v, nv);

    for (std::size_t i = 0; i < c.layers_cross; ++i) {
      const auto pv = cross_prefix(Stream::visual, i), pt = cross_prefix(Stream::text, i);
      if (c.token_prune_cross_visual) token_site(pv + ".tok", alive_v, nv);
      if (c.token_prune_cross_text) token_site(pt + ".tok", alive_t, nt);
      std::size_t kv = c.heads, kt = c.heads, kvc = c.heads, ktc = c.heads;
      if (c.head_prune_cross) {
        kv = head_site(pv + ".msa", false);
        kt = head_site(pt + ".msa", false);
      }
      attention(nv, nv, kv);
      attention(nt, nt, kt);
      if (c.head_prune_cross) {
        kvc = head_site(pv + ".mca", true);
        ktc = head_site(pt + ".mca", true);
      }
      attention(nv, nt, kvc);
      attention(nt, nv, ktc);
      f.ffn += flops_ffn(nv, c.d_model, c.d_ff) + flops_ffn(nt, c.d_model, c.d_ff);
    }
    f.head = 2 * static_cast<flops_t>(2 * c.d_model) * c.num_classes;
  }
};

}  // namespace detail

/// FLOPs of one inference forward under a binary MaskSet. Token counts follow
/// the cumulative surviving set; trimmer costs are included, in the baseline
/// too. Soft masks are rejected.
inline FlopsBreakdown model_flops(const ModelConfig& cfg, const MaskSet& masks) {
  detail::FlopsWalker w{cfg, masks, {}};
  w.run();
  const MaskSet ones = all_ones_masks(cfg);
  detail::FlopsWalker b{cfg, ones, {}};
  b.run();
  w.f.baseline = b.f.total();
  return w.f;
}

// ---------------------------------------------------------------------------
// Report helpers

/// Linear-interpolation percentile, q in [0, 1].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile: empty sample");
  if (q < 0.0 || q > 1.0) throw std::invalid_argument("percentile: q outside [0, 1]");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct HistogramBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over [min, max]; the last bin is closed. Counts sum to
/// the sample size.
inline std::vector<HistogramBin> histogram(const std::vector<double>& v, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("histogram: need at least one bin");
  std::vector<HistogramBin> out(bins);
  if (v.empty()) return out;
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  const double lo = *mn, hi = *mx;
  const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = lo + width * static_cast<double>(b);
    out[b].hi = lo + width * static_cast<double>(b + 1);
  }
  if (hi > lo) out.back().hi = hi;
  for (double x : v) {
    auto b = static_cast<std::size_t>((x - lo) / width);
    if (b >= bins) b = bins - 1;
    while (b > 0 && x < out[b].lo) --b;
    while (b + 1 < bins && x >= out[b + 1].lo) ++b;
    ++out[b].count;
  }
  return out;
}

struct ParetoPoint {
  std::string label;
  double flops = 0.0;
  double accuracy = 0.0;
};

/// Points not dominated by another (lower-or-equal FLOPs and higher-or-equal
/// accuracy, strictly better in one), sorted by FLOPs.
inline std::vector<ParetoPoint> pareto_front(std::vector<ParetoPoint> pts) {
  std::sort(pts.begin(), pts.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
    return a.flops != b.flops ? a.flops < b.flops : a.accuracy > b.accuracy;
  });
  std::vector<ParetoPoint> out;
  for (const auto& p : pts)
    if (out.empty() || p.accuracy > out.back().accuracy) out.push_back(p);
  return out;
}

}  // namespace adaprune
