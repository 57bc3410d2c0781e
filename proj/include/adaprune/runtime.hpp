#pragma once

#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "adaprune/backbone.hpp"
#include "adaprune/rng.hpp"
#include "adaprune/trimmers.hpp"

namespace adaprune {

/// How the trimmers turn scores into masks.
struct TrimmerOptions {
  // Training (soft) path.
  double tau = 1.0;
  bool straight_through = false;
  // Inference (gathered) path.
  InferenceMode inference = InferenceMode::deterministic;
  double token_threshold = 0.0;
  double head_threshold = 0.0;
  // Ablation switches.
  bool use_global = true;
  bool prune_tokens = true;
  bool prune_heads = true;
};

/// Gumbel-sigmoid soft masks from the trimmers. Noise is drawn from rng in
/// site execution order, so a fixed seed reproduces the same noise.
inline SoftPolicy trimmer_soft_policy(const TrimmerOptions& opt, RngStream& rng) {
  SoftPolicy p;
  p.token = [&opt, &rng](const SoftTokenSite& s) {
    if (!opt.prune_tokens) return s.prev;
    const auto scores = token_importance(s.trimmer, s.x, s.x_cls, s.y_cls, &s.prev, opt.use_global);
    Tensor m = gumbel_sigmoid_sample(scores.total, opt.tau, rng);
    if (opt.straight_through) m = straight_through(m);
    return mul(s.prev, force_cls(m));
  };
  p.head = [&opt, &rng](const HeadSite& s) {
    if (!opt.prune_heads) return Tensor::filled({s.heads}, 1.0);
    const Tensor pi = head_importance(s.trimmer, s.kind, s.x_cls, s.y_cls);
    Tensor m = gumbel_sigmoid_sample(pi, opt.tau, rng);
    if (opt.straight_through) m = straight_through(m);
    return m;
  };
  return p;
}

/// Binary decisions from the trimmer scores (threshold or Bernoulli).
inline GatheredPolicy trimmer_gathered_policy(const TrimmerOptions& opt, RngStream* rng = nullptr) {
  GatheredPolicy p;
  p.token = [&opt, rng](const GatheredTokenSite& s) {
    if (!opt.prune_tokens) return std::vector<double>(s.alive.size(), 1.0);
    const Tensor& pi = opt.use_global ? s.scores.total : s.scores.local;
    return inference_mask(pi.data(), opt.inference, /*has_cls=*/true, rng, opt.token_threshold);
  };
  p.head = [&opt, rng](const HeadSite& s) {
    if (!opt.prune_heads) return std::vector<double>(s.heads, 1.0);
    return inference_mask(*s.scores, opt.inference, /*has_cls=*/false, rng, opt.head_threshold);
  };
  return p;
}

inline GatheredPolicy all_ones_gathered_policy() {
  GatheredPolicy p;
  p.token = [](const GatheredTokenSite& s) { return std::vector<double>(s.alive.size(), 1.0); };
  p.head = [](const HeadSite& s) { return std::vector<double>(s.heads, 1.0); };
  return p;
}

enum class RunMode { train, infer };

struct AdaptiveResult {
  std::vector<double> logits;
  MaskSet masks;
  std::optional<SoftForward> soft;  // train mode: differentiable logits and masks
};

/// Adaptive forward. Train mode: soft Gumbel-sigmoid masks over full-length
/// sequences. Infer mode: binary masks, pruned tokens gathered out.
inline AdaptiveResult forward_adaptive(const ModelParams& m, const ModelInput& in, RunMode mode, RngStream& rng,
                                       const TrimmerOptions& opt = {}, Activations* acts = nullptr) {
  AdaptiveResult r;
  if (mode == RunMode::train) {
    r.soft = encode_soft(m, in, trimmer_soft_policy(opt, rng), acts);
    r.logits = r.soft->logits.values();
    r.masks = r.soft->mask_set();
  } else {
    auto g = encode_gathered(m, in, trimmer_gathered_policy(opt, &rng), acts);
    r.logits = std::move(g.logits);
    r.masks = std::move(g.masks);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Retention ratios

struct RetentionStats {
  double beta_T = 1.0;  // mean over token sites of m/N
  double beta_H = 1.0;  // mean over head sites of m/H
  std::vector<std::pair<std::string, double>> token_sites;
  std::vector<std::pair<std::string, double>> head_sites;
};

/// m is the mask sum (the retained count for binary masks); N is the site's
/// full length. Kinds without sites report 1.
inline RetentionStats retention_stats(const MaskSet& masks) {
  RetentionStats st;
  auto ratio = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  double acc = 0.0;
  for (const auto& m : masks.token) {
    st.token_sites.emplace_back(m.site, ratio(m.values));
    acc += st.token_sites.back().second;
  }
  if (!masks.token.empty()) st.beta_T = acc / static_cast<double>(masks.token.size());
  acc = 0.0;
  for (const auto& m : masks.head) {
    st.head_sites.emplace_back(m.site, ratio(m.values));
    acc += st.head_sites.back().second;
  }
  if (!masks.head.empty()) st.beta_H = acc / static_cast<double>(masks.head.size());
  return st;
}

/// Differentiable retention ratios of a soft forward. Unset when the model
/// has no site of that kind.
struct RetentionTensors {
  std::optional<Tensor> beta_T, beta_H;
};

inline RetentionTensors retention_tensors(const SoftForward& f) {
  RetentionTensors r;
  auto avg = [](const std::vector<std::pair<std::string, Tensor>>& sites) -> std::optional<Tensor> {
    if (sites.empty()) return std::nullopt;
    std::optional<Tensor> acc;
    for (const auto& [_, t] : sites) {
      const Tensor ratio = scale(sum(t), 1.0 / static_cast<double>(t.size()));
      acc = acc ? add(*acc, ratio) : ratio;
    }
    return scale(*acc, 1.0 / static_cast<double>(sites.size()));
  };
  r.beta_T = avg(f.token_masks);
  r.beta_H = avg(f.head_masks);
  return r;
}

// ---------------------------------------------------------------------------
// Mask trace
//
// Tab-separated text. Lines starting with '#' are comments. Each record:
//   <instance>\t<token|head>\t<site>\t<v0,v1,...>
// Records of one instance are contiguous and in execution order.

struct MaskTraceEntry {
  std::size_t instance = 0;
  MaskSet masks;
};

inline std::string join_values(const std::vector<double>& v) {
  std::string s;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    if (i) s += ',';
    s += buf;
  }
  return s;
}

inline void write_mask_trace(std::ostream& os, const std::vector<MaskTraceEntry>& entries) {
  for (const auto& e : entries) {
    for (const auto& m : e.masks.token) os << e.instance << "\ttoken\t" << m.site << '\t' << join_values(m.values) << '\n';
    for (const auto& m : e.masks.head) os << e.instance << "\thead\t" << m.site << '\t' << join_values(m.values) << '\n';
  }
}

inline std::vector<MaskTraceEntry> read_mask_trace(std::istream& is) {
  std::vector<MaskTraceEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string inst, kind, site, vals;
    if (!std::getline(ls, inst, '\t') || !std::getline(ls, kind, '\t') || !std::getline(ls, site, '\t') ||
        !std::getline(ls, vals))
      throw std::runtime_error("mask trace: malformed line '" + line + "'");
    const auto id = static_cast<std::size_t>(std::stoull(inst));
    if (out.empty() || out.back().instance != id) out.push_back({id, {}});
    std::vector<double> v;
    std::istringstream vs(vals);
    std::string tok;
    while (std::getline(vs, tok, ',')) v.push_back(std::stod(tok));
    if (kind == "token")
      out.back().masks.token.push_back({site, std::move(v)});
    else if (kind == "head")
      out.back().masks.head.push_back({site, std::move(v)});
    else
      throw std::runtime_error("mask trace: unknown record kind '" + kind + "'");
  }
  return out;
}

}  // namespace adaprune
