#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaprune/model.hpp"
#include "adaprune/tensor.hpp"
#include "adaprune/trimmers.hpp"

namespace adaprune {

inline constexpr std::size_t kClsToken = 0;

/// One image-text pair as seen by the model.
struct ModelInput {
  std::vector<std::size_t> tokens;  // n_text ids, tokens[0] == kClsToken
  std::vector<double> patches;      // (n_visual - 1) x patch_dim, row-major
};

/// Per-site masks of one forward pass. Token masks are cumulative and
/// indexed by original token position; head masks are indexed by head.
struct SiteMask {
  std::string site;
  std::vector<double> values;
};

struct MaskSet {
  std::vector<SiteMask> token;
  std::vector<SiteMask> head;

  const SiteMask* find_token(const std::string& site) const {
    for (const auto& m : token)
      if (m.site == site) return &m;
    return nullptr;
  }
  const SiteMask* find_head(const std::string& site) const {
    for (const auto& m : head)
      if (m.site == site) return &m;
    return nullptr;
  }
  bool is_binary() const {
    for (const auto* group : {&token, &head})
      for (const auto& m : *group)
        for (double v : m.values)
          if (v != 0.0 && v != 1.0) return false;
    return true;
  }
};

struct AttentionRecord {
  std::string module;
  std::size_t heads = 0, nq = 0, nkv = 0;
  std::vector<double> values;  // heads x nq x nkv
};

struct TokenRecord {
  std::string block;
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
};

/// Block outputs and attention maps, in execution order.
struct Activations {
  std::vector<TokenRecord> tokens;
  std::vector<AttentionRecord> attention;
};

// ---------------------------------------------------------------------------
// Embeddings

inline Tensor embed_text(const ModelParams& m, const std::vector<std::size_t>& tokens) {
  const auto& c = m.cfg;
  if (tokens.size() != c.n_text)
    throw ShapeError("embed_text: expected " + std::to_string(c.n_text) + " tokens, got " +
                     std::to_string(tokens.size()));
  if (tokens[0] != kClsToken) throw std::invalid_argument("embed_text: position 0 must hold the CLS token");
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] >= c.vocab)
      throw std::out_of_range("embed_text: token id " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " exceeds vocab " + std::to_string(c.vocab));
  return add(gather_rows(m.tok_emb, tokens), m.txt_pos);
}

inline Tensor embed_patches(const ModelParams& m, const Tensor& patches) {
  const auto& c = m.cfg;
  if (patches.rank() != 2 || patches.rows() != c.n_visual - 1 || patches.cols() != c.patch_dim)
    throw ShapeError("embed_patches: expected [" + std::to_string(c.n_visual - 1) + "x" +
                     std::to_string(c.patch_dim) + "], got " + shape_str(patches.shape()));
  return add(concat_rows({m.vis_cls, linear(patches, m.patch)}), m.vis_pos);
}

inline Tensor patches_tensor(const ModelConfig& c, const ModelInput& in) {
  return Tensor::from({c.n_visual - 1, c.patch_dim}, in.patches);
}

// ---------------------------------------------------------------------------
// Blocks. Each returns the residual update; callers add it (gated) to x.

/// Multi-head attention update for queries x over keys/values kv (x itself
/// when kv is null). key_mask multiplies each key's softmax numerator before
/// renormalization; head_mask scales each head's context before the output
/// projection.
inline Tensor attention_update(const AttentionParams& p, std::size_t heads, const Tensor& x, const Tensor* kv,
                               const Tensor* key_mask, const Tensor* head_mask, AttentionRecord* rec = nullptr) {
  const Tensor xn = layer_norm(x, p.ln.g, p.ln.b);
  const Tensor yn = kv ? layer_norm(*kv, p.kv_ln.g, p.kv_ln.b) : xn;
  const Tensor q = linear(xn, p.q), k = linear(yn, p.k), v = linear(yn, p.v);
  const auto d = x.cols(), dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> ctx;
  ctx.reserve(heads);
  if (rec) {
    rec->heads = heads;
    rec->nq = x.rows();
    rec->nkv = yn.rows();
    rec->values.clear();
  }
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    const Tensor a = softmax_rows(scale(matmul_nt(qh, kh), inv), key_mask);
    if (rec) rec->values.insert(rec->values.end(), a.values().begin(), a.values().end());
    Tensor c = matmul(a, vh);
    if (head_mask) c = mul_element(c, *head_mask, h);
    ctx.push_back(std::move(c));
  }
  return linear(concat_cols(ctx), p.o);
}

inline Tensor ffn_update(const FfnParams& p, const Tensor& x) {
  return linear(gelu(linear(layer_norm(x, p.ln.g, p.ln.b), p.fc1)), p.fc2);
}

/// Pre-norm FFN block with each token's update scaled by its mask entry.
inline Tensor ffn_forward(const FfnParams& p, const Tensor& x, const Tensor* token_mask = nullptr) {
  const Tensor u = ffn_update(p, x);
  return add(x, token_mask ? mul_rows(u, *token_mask) : u);
}

inline Tensor msa_forward(const AttentionParams& p, std::size_t heads, const Tensor& x, const Tensor* head_mask,
                          const Tensor* token_mask, AttentionRecord* rec = nullptr) {
  const Tensor u = attention_update(p, heads, x, nullptr, token_mask, head_mask, rec);
  return add(x, token_mask ? mul_rows(u, *token_mask) : u);
}

inline Tensor mca_forward(const AttentionParams& p, std::size_t heads, const Tensor& xq, const Tensor& ykv,
                          const Tensor* head_mask, const Tensor* q_token_mask, const Tensor* kv_token_mask,
                          AttentionRecord* rec = nullptr) {
  const Tensor u = attention_update(p, heads, xq, &ykv, kv_token_mask, head_mask, rec);
  return add(xq, q_token_mask ? mul_rows(u, *q_token_mask) : u);
}

inline Tensor classify(const ModelParams& m, const Tensor& x_vis, const Tensor& x_txt) {
  const Tensor v = layer_norm(row(x_vis, 0), m.final_vis.g, m.final_vis.b);
  const Tensor t = layer_norm(row(x_txt, 0), m.final_txt.g, m.final_txt.b);
  return linear(concat_cols({v, t}), m.head);
}

namespace detail {
inline void record_tokens(Activations* acts, const std::string& block, const Tensor& x) {
  if (acts) acts->tokens.push_back({block, x.rows(), x.cols(), x.values()});
}
inline AttentionRecord* new_attention(Activations* acts, const std::string& module) {
  if (!acts) return nullptr;
  acts->attention.push_back({});
  acts->attention.back().module = module;
  return &acts->attention.back();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Site names

inline std::string uni_prefix(Stream s, std::size_t layer) {
  return std::string(s == Stream::text ? "text" : "vis") + ".L" + std::to_string(layer);
}
inline std::string cross_prefix(Stream s, std::size_t layer) {
  return "cross.L" + std::to_string(layer) + "." + stream_tag(s);
}

struct TokenSiteInfo {
  std::string name;
  Stream stream;
  std::size_t length;  // original sequence length
};

struct HeadSiteInfo {
  std::string name;
  Stream stream;
  ModuleKind kind;
  bool cross_layer;
  std::size_t layer;
};

/// Token-trimmed sites in execution order.
inline std::vector<TokenSiteInfo> token_sites(const ModelConfig& c) {
  std::vector<TokenSiteInfo> out;
  if (c.token_prune_text)
    for (std::size_t i = 0; i < c.layers_uni; ++i) out.push_back({uni_prefix(Stream::text, i) + ".tok", Stream::text, c.n_text});
  if (c.token_prune_visual)
    for (std::size_t i = 0; i < c.layers_uni; ++i)
      out.push_back({uni_prefix(Stream::visual, i) + ".tok", Stream::visual, c.n_visual});
  for (std::size_t i = 0; i < c.layers_cross; ++i) {
    if (c.token_prune_cross_visual) out.push_back({cross_prefix(Stream::visual, i) + ".tok", Stream::visual, c.n_visual});
    if (c.token_prune_cross_text) out.push_back({cross_prefix(Stream::text, i) + ".tok", Stream::text, c.n_text});
  }
  return out;
}

/// Head-trimmed attention modules in execution order.
inline std::vector<HeadSiteInfo> head_sites(const ModelConfig& c) {
  std::vector<HeadSiteInfo> out;
  if (c.head_prune_uni) {
    for (std::size_t i = 0; i < c.layers_uni; ++i)
      out.push_back({uni_prefix(Stream::text, i) + ".msa", Stream::text, ModuleKind::msa, false, i});
    for (std::size_t i = 0; i < c.layers_uni; ++i)
      out.push_back({uni_prefix(Stream::visual, i) + ".msa", Stream::visual, ModuleKind::msa, false, i});
  }
  if (c.head_prune_cross)
    for (std::size_t i = 0; i < c.layers_cross; ++i) {
      for (Stream s : {Stream::visual, Stream::text})
        out.push_back({cross_prefix(s, i) + ".msa", s, ModuleKind::msa, true, i});
      for (Stream s : {Stream::visual, Stream::text})
        out.push_back({cross_prefix(s, i) + ".mca", s, ModuleKind::mca, true, i});
    }
  return out;
}

// ---------------------------------------------------------------------------
// Plain forward: no masking code at all.

struct PlainForward {
  Tensor logits;  // [1 x classes]
  Tensor x_vis, x_txt;
};

inline PlainForward encode_plain(const ModelParams& m, const ModelInput& in, Activations* acts = nullptr) {
  const auto& c = m.cfg;
  Tensor t = embed_text(m, in.tokens);
  Tensor v = embed_patches(m, patches_tensor(c, in));
  for (std::size_t i = 0; i < c.layers_uni; ++i) {
    const auto p = uni_prefix(Stream::text, i);
    t = msa_forward(m.text[i].msa, c.heads, t, nullptr, nullptr, detail::new_attention(acts, p + ".msa"));
    t = ffn_forward(m.text[i].ffn, t);
    detail::record_tokens(acts, p, t);
  }
  for (std::size_t i = 0; i < c.layers_uni; ++i) {
    const auto p = uni_prefix(Stream::visual, i);
    v = msa_forward(m.visual[i].msa, c.heads, v, nullptr, nullptr, detail::new_attention(acts, p + ".msa"));
    v = ffn_forward(m.visual[i].ffn, v);
    detail::record_tokens(acts, p, v);
  }
  for (std::size_t i = 0; i < c.layers_cross; ++i) {
    const auto& L = m.cross[i];
    const auto pv = cross_prefix(Stream::visual, i), pt = cross_prefix(Stream::text, i);
    v = msa_forward(L.vis.msa, c.heads, v, nullptr, nullptr, detail::new_attention(acts, pv + ".msa"));
    t = msa_forward(L.txt.msa, c.heads, t, nullptr, nullptr, detail::new_attention(acts, pt + ".msa"));
    const Tensor v2 = mca_forward(L.vis.mca, c.heads, v, t, nullptr, nullptr, nullptr,
                                  detail::new_attention(acts, pv + ".mca"));
    const Tensor t2 = mca_forward(L.txt.mca, c.heads, t, v, nullptr, nullptr, nullptr,
                                  detail::new_attention(acts, pt + ".mca"));
    v = ffn_forward(L.vis.ffn, v2);
    t = ffn_forward(L.txt.ffn, t2);
    detail::record_tokens(acts, pv, v);
    detail::record_tokens(acts, pt, t);
  }
  return {classify(m, v, t), v, t};
}

// ---------------------------------------------------------------------------
// Soft-masked forward (training semantics; exact at binary masks)

struct SoftTokenSite {
  const std::string& name;
  Stream stream;
  const Tensor& x;      // block input, full length
  const Tensor& x_cls;  // own modality CLS row [1 x D]
  const Tensor& y_cls;  // other modality CLS row
  const Tensor& prev;   // cumulative mask before this site
  const TokenTrimmerParams& trimmer;
};

struct HeadSite {
  const std::string& name;
  Stream stream;
  ModuleKind kind;
  const Tensor& x_cls;
  const Tensor* y_cls;  // set for MCA
  const HeadTrimmerParams& trimmer;
  std::size_t heads;
  const std::vector<double>* scores;  // precomputed trimmer scores (gathered path only)
};

/// Decides masks at trimmed sites. token() returns the cumulative mask after
/// the site (full length, CLS entry 1); head() returns the head mask.
struct SoftPolicy {
  std::function<Tensor(const SoftTokenSite&)> token;
  std::function<Tensor(const HeadSite&)> head;
};

struct SoftForward {
  Tensor logits;
  std::vector<std::pair<std::string, Tensor>> token_masks;
  std::vector<std::pair<std::string, Tensor>> head_masks;

  MaskSet mask_set() const {
    MaskSet ms;
    for (const auto& [s, t] : token_masks) ms.token.push_back({s, t.values()});
    for (const auto& [s, t] : head_masks) ms.head.push_back({s, t.values()});
    return ms;
  }
};

inline SoftForward encode_soft(const ModelParams& m, const ModelInput& in, const SoftPolicy& policy,
                               Activations* acts = nullptr) {
  const auto& c = m.cfg;
  SoftForward out;
  Tensor t = embed_text(m, in.tokens);
  Tensor v = embed_patches(m, patches_tensor(c, in));
  Tensor mt = Tensor::filled({c.n_text}, 1.0);
  Tensor mv = Tensor::filled({c.n_visual}, 1.0);

  auto token_site = [&](const std::string& name, Stream s, Tensor& x, Tensor& mask, const Tensor& other,
                        const TokenTrimmerParams& tp) {
    const Tensor xc = row(x, 0), yc = row(other, 0);
    mask = policy.token(SoftTokenSite{name, s, x, xc, yc, mask, tp});
    if (mask.size() != x.rows()) throw ShapeError("token policy returned a mask of wrong length at " + name);
    out.token_masks.emplace_back(name, mask);
  };
  auto head_site = [&](const std::string& name, Stream s, ModuleKind k, const Tensor& x, const Tensor* other,
                       const HeadTrimmerParams& hp) {
    const Tensor xc = row(x, 0);
    std::optional<Tensor> yc;
    if (other) yc = row(*other, 0);
    Tensor hm = policy.head(HeadSite{name, s, k, xc, yc ? &*yc : nullptr, hp, c.heads, nullptr});
    if (hm.size() != c.heads) throw ShapeError("head policy returned a mask of wrong length at " + name);
    out.head_masks.emplace_back(name, hm);
    return hm;
  };

  for (std::size_t i = 0; i < c.layers_uni; ++i) {
    const auto& L = m.text[i];
    const auto p = uni_prefix(Stream::text, i);
    if (L.has_token_trimmer) token_site(p + ".tok", Stream::text, t, mt, v, L.tok_trim);
    std::optional<Tensor> hm;
    if (L.has_head_trimmer) hm = head_site(p + ".msa", Stream::text, ModuleKind::msa, t, nullptr, L.msa_head_trim);
    t = msa_forward(L.msa, c.heads, t, hm ? &*hm : nullptr, &mt, detail::new_attention(acts, p + ".msa"));
    t = ffn_forward(L.ffn, t, &mt);
    detail::record_tokens(acts, p, t);
  }
  for (std::size_t i = 0; i < c.layers_uni; ++i) {
    const auto& L = m.visual[i];
    const auto p = uni_prefix(Stream::visual, i);
    if (L.has_token_trimmer) token_site(p + ".tok", Stream::visual, v, mv, t, L.tok_trim);
    std::optional<Tensor> hm;
    if (L.has_head_trimmer) hm = head_site(p + ".msa", Stream::visual, ModuleKind::msa, v, nullptr, L.msa_head_trim);
    v = msa_forward(L.msa, c.heads, v, hm ? &*hm : nullptr, &mv, detail::new_attention(acts, p + ".msa"));
    v = ffn_forward(L.ffn, v, &mv);
    detail::record_tokens(acts, p, v);
  }
  for (std::size_t i = 0; i < c.layers_cross; ++i) {
    const auto& L = m.cross[i];
    const auto pv = cross_prefix(Stream::visual, i), pt = cross_prefix(Stream::text, i);
    {
      // Both decisions read the block inputs of both streams.
      const Tensor v_in = v, t_in = t;
      if (L.vis.has_token_trimmer) token_site(pv + ".tok", Stream::visual, v, mv, t_in, L.vis.tok_trim);
      if (L.txt.has_token_trimmer) token_site(pt + ".tok", Stream::text, t, mt, v_in, L.txt.tok_trim);
    }
    std::optional<Tensor> hv, ht, hvc, htc;
    if (L.vis.has_head_trimmers) {
      hv = head_site(pv + ".msa", Stream::visual, ModuleKind::msa, v, nullptr, L.vis.msa_head_trim);
      ht = head_site(pt + ".msa", Stream::text, ModuleKind::msa, t, nullptr, L.txt.msa_head_trim);
    }
    v = msa_forward(L.vis.msa, c.heads, v, hv ? &*hv : nullptr, &mv, detail::new_attention(acts, pv + ".msa"));
    t = msa_forward(L.txt.msa, c.heads, t, ht ? &*ht : nullptr, &mt, detail::new_attention(acts, pt + ".msa"));
    if (L.vis.has_head_trimmers) {
      hvc = head_site(pv + ".mca", Stream::visual, ModuleKind::mca, v, &t, L.vis.mca_head_trim);
      htc = head_site(pt + ".mca", Stream::text, ModuleKind::mca, t, &v, L.txt.mca_head_trim);
    }
    const Tensor v2 = mca_forward(L.vis.mca, c.heads, v, t, hvc ? &*hvc : nullptr, &mv, &mt,
                                  detail::new_attention(acts, pv + ".mca"));
    const Tensor t2 = mca_forward(L.txt.mca, c.heads, t, v, htc ? &*htc : nullptr, &mt, &mv,
                                  detail::new_attention(acts, pt + ".mca"));
    v = ffn_forward(L.vis.ffn, v2, &mv);
    t = ffn_forward(L.txt.ffn, t2, &mt);
    detail::record_tokens(acts, pv, v);
    detail::record_tokens(acts, pt, t);
  }
  out.logits = classify(m, v, t);
  return out;
}

/// Soft policy that applies a fixed MaskSet (cumulative token masks, head
/// masks). Sites missing from the set are rejected.
inline SoftPolicy fixed_soft_policy(const MaskSet& masks) {
  SoftPolicy p;
  p.token = [&masks](const SoftTokenSite& s) {
    const auto* m = masks.find_token(s.name);
    if (!m) throw std::invalid_argument("MaskSet has no token mask for site " + s.name);
    if (m->values.size() != s.prev.size())
      throw ShapeError("MaskSet token mask at " + s.name + " has wrong length");
    // Composed with the running mask so a token dropped earlier stays dropped.
    return mul(s.prev, Tensor::vector(m->values));
  };
  p.head = [&masks](const HeadSite& s) {
    const auto* m = masks.find_head(s.name);
    if (!m) throw std::invalid_argument("MaskSet has no head mask for site " + s.name);
    return Tensor::vector(m->values);
  };
  return p;
}

/// Every site keeps everything.
inline SoftPolicy all_ones_soft_policy() {
  SoftPolicy p;
  p.token = [](const SoftTokenSite& s) { return s.prev; };
  p.head = [](const HeadSite& s) { return Tensor::filled({s.heads}, 1.0); };
  return p;
}

/// All-ones MaskSet covering every trimmed site of the config.
inline MaskSet all_ones_masks(const ModelConfig& c) {
  MaskSet ms;
  for (const auto& s : token_sites(c)) ms.token.push_back({s.name, std::vector<double>(s.length, 1.0)});
  for (const auto& s : head_sites(c)) ms.head.push_back({s.name, std::vector<double>(c.heads, 1.0)});
  return ms;
}

/// Backbone forward under a MaskSet, using soft-mask semantics.
inline SoftForward encode(const ModelParams& m, const ModelInput& in, const MaskSet& masks,
                          Activations* acts = nullptr) {
  return encode_soft(m, in, fixed_soft_policy(masks), acts);
}

// ---------------------------------------------------------------------------
// Gathered forward (inference): pruned tokens are removed from the sequence,
// pruned heads are never computed.

struct GatheredTokenSite {
  const std::string& name;
  Stream stream;
  const Tensor& x;                          // surviving rows
  const std::vector<std::size_t>& alive;    // original positions of the rows
  const std::vector<double>& cls_attention; // CLS attention row over the rows (may be empty)
  const TokenScores& scores;                // trimmer scores over the rows
};

/// Binary keep decisions over the current rows / heads.
struct GatheredPolicy {
  std::function<std::vector<double>(const GatheredTokenSite&)> token;
  std::function<std::vector<double>(const HeadSite&)> head;
};

struct GatheredForward {
  std::vector<double> logits;
  MaskSet masks;
};

namespace detail {

inline Tensor take_cols(const Tensor& w, const std::vector<std::size_t>& cols) {
  const auto r = w.rows(), n = w.cols();
  std::vector<double> out(r * cols.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out[i * cols.size() + j] = w[i * n + cols[j]];
  return Tensor::from({r, cols.size()}, std::move(out));
}

inline Tensor take(const Tensor& b, const std::vector<std::size_t>& idx) {
  std::vector<double> out(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) out[j] = b[idx[j]];
  return Tensor::vector(std::move(out));
}

struct GatheredStream {
  Tensor x;
  std::vector<std::size_t> alive;
  std::vector<double> cls_attention;
};

// Attention update computing only the retained heads. Optionally writes the
// CLS query's attention averaged over retained heads.
inline Tensor gathered_attention(const AttentionParams& p, std::size_t heads, const Tensor& x, const Tensor* kv,
                                 const std::vector<double>* head_keep, AttentionRecord* rec,
                                 std::vector<double>* cls_row) {
  const auto d = x.cols(), dh = d / heads;
  std::vector<std::size_t> kept;
  for (std::size_t h = 0; h < heads; ++h)
    if (!head_keep || (*head_keep)[h] != 0.0) kept.push_back(h);
  const Tensor xn = layer_norm(x, p.ln.g, p.ln.b);
  const Tensor yn = kv ? layer_norm(*kv, p.kv_ln.g, p.kv_ln.b) : xn;
  if (rec) {
    rec->heads = kept.size();
    rec->nq = x.rows();
    rec->nkv = yn.rows();
    rec->values.clear();
  }
  if (cls_row) cls_row->assign(yn.rows(), 0.0);
  if (kept.empty()) return add_bias(Tensor::zeros({x.rows(), d}), p.o.b);

  std::vector<std::size_t> cols;
  for (auto h : kept)
    for (std::size_t j = 0; j < dh; ++j) cols.push_back(h * dh + j);
  const bool all = kept.size() == heads;
  auto proj = [&](const Tensor& in, const LinearParams& l) {
    return all ? linear(in, l) : add_bias(matmul(in, take_cols(l.w, cols)), take(l.b, cols));
  };
  const Tensor q = proj(xn, p.q), k = proj(yn, p.k), v = proj(yn, p.v);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> ctx;
  for (std::size_t r = 0; r < kept.size(); ++r) {
    const Tensor a = softmax_rows(scale(matmul_nt(slice_cols(q, r * dh, (r + 1) * dh),
                                                  slice_cols(k, r * dh, (r + 1) * dh)), inv));
    if (rec) rec->values.insert(rec->values.end(), a.values().begin(), a.values().end());
    if (cls_row)
      for (std::size_t j = 0; j < a.cols(); ++j) (*cls_row)[j] += a[j] / static_cast<double>(kept.size());
    ctx.push_back(matmul(a, slice_cols(v, r * dh, (r + 1) * dh)));
  }
  const Tensor cat = concat_cols(ctx);
  if (all) return linear(cat, p.o);
  return add_bias(matmul(cat, gather_rows(p.o.w, cols)), p.o.b);
}

}  // namespace detail

/// Inference forward with physical token removal. Trimmer scores are
/// computed at every trimmed site and handed to the policy, so trimmer cost
/// is always incurred regardless of how the policy decides.
inline GatheredForward encode_gathered(const ModelParams& m, const ModelInput& in, const GatheredPolicy& policy,
                                       Activations* acts = nullptr) {
  const auto& c = m.cfg;
  GatheredForward out;
  detail::GatheredStream T{embed_text(m, in.tokens), {}, {}};
  detail::GatheredStream V{embed_patches(m, patches_tensor(c, in)), {}, {}};
  for (std::size_t i = 0; i < c.n_text; ++i) T.alive.push_back(i);
  for (std::size_t i = 0; i < c.n_visual; ++i) V.alive.push_back(i);

  auto token_site = [&](const std::string& name, Stream s, detail::GatheredStream& S, const Tensor& other,
                        const TokenTrimmerParams& tp, std::size_t full_len) {
    const Tensor xc = row(S.x, 0), yc = row(other, 0);
    const TokenScores scores = token_importance(tp, S.x, xc, yc);
    auto keep = policy.token(GatheredTokenSite{name, s, S.x, S.alive, S.cls_attention, scores});
    if (keep.size() != S.x.rows()) throw ShapeError("token policy returned wrong length at " + name);
    keep[0] = 1.0;
    std::vector<double> eff(full_len, 0.0);
    std::vector<std::size_t> rows, alive;
    std::vector<double> attn;
    for (std::size_t r = 0; r < keep.size(); ++r) {
      if (keep[r] == 0.0) continue;
      rows.push_back(r);
      alive.push_back(S.alive[r]);
      eff[S.alive[r]] = 1.0;
      if (!S.cls_attention.empty()) attn.push_back(S.cls_attention[r]);
    }
    out.masks.token.push_back({name, std::move(eff)});
    if (rows.size() != S.x.rows()) S.x = gather_rows(S.x, rows);
    S.alive = std::move(alive);
    S.cls_attention = std::move(attn);
  };
  auto head_site = [&](const std::string& name, Stream s, ModuleKind k, const Tensor& x, const Tensor* other,
                       const HeadTrimmerParams& hp) {
    const Tensor xc = row(x, 0);
    std::optional<Tensor> yc;
    if (other) yc = row(*other, 0);
    const Tensor scores = head_importance(hp, k, xc, yc ? &*yc : nullptr);
    auto hm = policy.head(HeadSite{name, s, k, xc, yc ? &*yc : nullptr, hp, c.heads, &scores.values()});
    if (hm.size() != c.heads) throw ShapeError("head policy returned wrong length at " + name);
    out.masks.head.push_back({name, hm});
    return hm;
  };
  auto msa = [&](const AttentionParams& p, detail::GatheredStream& S, const std::vector<double>* hm,
                 const std::string& module) {
    S.x = add(S.x, detail::gathered_attention(p, c.heads, S.x, nullptr, hm, detail::new_attention(acts, module),
                                              &S.cls_attention));
  };

  for (std::size_t i = 0; i < c.layers_uni; ++i) {
    const auto& L = m.text[i];
    const auto p = uni_prefix(Stream::text, i);
    if (L.has_token_trimmer) token_site(p + ".tok", Stream::text, T, V.x, L.tok_trim, c.n_text);
    std::optional<std::vector<double>> hm;
    if (L.has_head_trimmer) hm = head_site(p + ".msa", Stream::text, ModuleKind::msa, T.x, nullptr, L.msa_head_trim);
    msa(L.msa, T, hm ? &*hm : nullptr, p + ".msa");
    T.x = ffn_forward(L.ffn, T.x);
    detail::record_tokens(acts, p, T.x);
  }
  for (std::size_t i = 0; i < c.layers_uni; ++i) {
    const auto& L = m.visual[i];
    const auto p = uni_prefix(Stream::visual, i);
    if (L.has_token_trimmer) token_site(p + ".tok", Stream::visual, V, T.x, L.tok_trim, c.n_visual);
    std::optional<std::vector<double>> hm;
    if (L.has_head_trimmer) hm = head_site(p + ".msa", Stream::visual, ModuleKind::msa, V.x, nullptr, L.msa_head_trim);
    msa(L.msa, V, hm ? &*hm : nullptr, p + ".msa");
    V.x = ffn_forward(L.ffn, V.x);
    detail::record_tokens(acts, p, V.x);
  }
  for (std::size_t i = 0; i < c.layers_cross; ++i) {
    const auto& L = m.cross[i];
    const auto pv = cross_prefix(Stream::visual, i), pt = cross_prefix(Stream::text, i);
    {
      const Tensor v_in = V.x, t_in = T.x;
      if (L.vis.has_token_trimmer) token_site(pv + ".tok", Stream::visual, V, t_in, L.vis.tok_trim, c.n_visual);
      if (L.txt.has_token_trimmer) token_site(pt + ".tok", Stream::text, T, v_in, L.txt.tok_trim, c.n_text);
    }
    std::optional<std::vector<double>> hv, ht, hvc, htc;
    if (L.vis.has_head_trimmers) {
      hv = head_site(pv + ".msa", Stream::visual, ModuleKind::msa, V.x, nullptr, L.vis.msa_head_trim);
      ht = head_site(pt + ".msa", Stream::text, ModuleKind::msa, T.x, nullptr, L.txt.msa_head_trim);
    }
    msa(L.vis.msa, V, hv ? &*hv : nullptr, pv + ".msa");
    msa(L.txt.msa, T, ht ? &*ht : nullptr, pt + ".msa");
    if (L.vis.has_head_trimmers) {
      hvc = head_site(pv + ".mca", Stream::visual, ModuleKind::mca, V.x, &T.x, L.vis.mca_head_trim);
      htc = head_site(pt + ".mca", Stream::text, ModuleKind::mca, T.x, &V.x, L.txt.mca_head_trim);
    }
    const Tensor v2 = add(V.x, detail::gathered_attention(L.vis.mca, c.heads, V.x, &T.x, hvc ? &*hvc : nullptr,
                                                          detail::new_attention(acts, pv + ".mca"), nullptr));
    const Tensor t2 = add(T.x, detail::gathered_attention(L.txt.mca, c.heads, T.x, &V.x, htc ? &*htc : nullptr,
                                                          detail::new_attention(acts, pt + ".mca"), nullptr));
    V.x = ffn_forward(L.vis.ffn, v2);
    T.x = ffn_forward(L.txt.ffn, t2);
    detail::record_tokens(acts, pv, V.x);
    detail::record_tokens(acts, pt, T.x);
  }
  out.logits = classify(m, V.x, T.x).values();
  return out;
}

/// Gathered policy applying a fixed binary MaskSet.
inline GatheredPolicy fixed_gathered_policy(const MaskSet& masks) {
  GatheredPolicy p;
  p.token = [&masks](const GatheredTokenSite& s) {
    const auto* m = masks.find_token(s.name);
    if (!m) throw std::invalid_argument("MaskSet has no token mask for site " + s.name);
    std::vector<double> keep(s.alive.size());
    for (std::size_t r = 0; r < keep.size(); ++r) keep[r] = m->values.at(s.alive[r]);
    return keep;
  };
  p.head = [&masks](const HeadSite& s) {
    const auto* m = masks.find_head(s.name);
    if (!m) throw std::invalid_argument("MaskSet has no head mask for site " + s.name);
    return m->values;
  };
  return p;
}

}  // namespace adaprune
