#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "adaprune/config.hpp"
#include "adaprune/parameters.hpp"
#include "adaprune/rng.hpp"
#include "adaprune/tensor.hpp"

namespace adaprune {

// Parameter layout of the two-stream backbone plus its trimmers.
//
// Naming: "<encoder>.L<i>.<module>.<layer>.<w|b|g>", e.g. "vis.L0.msa.q.w",
// "cross.L1.txt.mca.kv_ln.g", "cross.L0.vis.tok_trim.reduce.w".
// Linear weights are stored [in x out].

enum class Stream { text, visual };

inline const char* stream_tag(Stream s) { return s == Stream::text ? "txt" : "vis"; }

struct LinearParams {
  Tensor w, b;
};

struct NormParams {
  Tensor g, b;
};

struct AttentionParams {
  NormParams ln;     // queries (and keys/values for self-attention)
  NormParams kv_ln;  // other stream, cross-attention only
  LinearParams q, k, v, o;
  bool cross = false;
};

struct FfnParams {
  NormParams ln;
  LinearParams fc1, fc2;
};

struct TokenTrimmerParams {
  LinearParams reduce;  // D -> D'
  LinearParams local1;  // D' -> D'
  LinearParams local2;  // D' -> 1
  LinearParams fuse;    // 2D -> D'
  Tensor w_g;           // D' x D'
};

struct HeadTrimmerParams {
  LinearParams fc1;  // D (self) or 2D (cross) -> D'
  LinearParams fc2;  // D' -> H
  bool cross = false;
};

struct UniLayerParams {
  bool has_token_trimmer = false;
  TokenTrimmerParams tok_trim;
  AttentionParams msa;
  bool has_head_trimmer = false;
  HeadTrimmerParams msa_head_trim;
  FfnParams ffn;
};

struct CrossStreamParams {
  bool has_token_trimmer = false;
  TokenTrimmerParams tok_trim;
  AttentionParams msa;
  AttentionParams mca;
  bool has_head_trimmers = false;
  HeadTrimmerParams msa_head_trim;
  HeadTrimmerParams mca_head_trim;
  FfnParams ffn;
};

struct CrossLayerParams {
  CrossStreamParams vis, txt;
  const CrossStreamParams& of(Stream s) const { return s == Stream::visual ? vis : txt; }
};

/// Typed view of a ParameterStore. Tensors are shared with the store.
struct ModelParams {
  ModelConfig cfg;
  Tensor tok_emb;   // vocab x D
  Tensor txt_pos;   // N_t x D
  LinearParams patch;  // patch_dim -> D
  Tensor vis_cls;   // 1 x D
  Tensor vis_pos;   // N_v x D
  std::vector<UniLayerParams> text, visual;
  std::vector<CrossLayerParams> cross;
  NormParams final_txt, final_vis;
  LinearParams head;  // 2D -> classes, input [vis_cls ; txt_cls]
};

namespace detail {

class LayoutBuilder {
 public:
  LayoutBuilder(ParameterStore& store, RngStream* rng, bool requires_grad)
      : store_(store), rng_(rng), rg_(requires_grad) {}

  // Existing store: look up by name and check the shape.
  explicit LayoutBuilder(const ParameterStore& store)
      : store_(const_cast<ParameterStore&>(store)), lookup_(true) {}

  Tensor param(const std::string& name, Shape shape, double stddev, double fill = 0.0) {
    if (lookup_) {
      if (!store_.contains(name)) throw CheckpointError("missing parameter '" + name + "'");
      const Tensor& t = store_.get(name);
      if (t.shape() != shape)
        throw CheckpointError("parameter '" + name + "' has shape " + shape_str(t.shape()) +
                              ", expected " + shape_str(shape));
      ++seen_;
      return t;
    }
    std::vector<double> v(shape_size(shape), fill);
    if (stddev > 0)
      for (auto& x : v) x = stddev * rng_->normal();
    return store_.add(name, Tensor::from(std::move(shape), std::move(v), rg_));
  }

  LinearParams linear(const std::string& name, std::size_t in, std::size_t out, bool zero = false) {
    const double sd = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
    LinearParams l;
    l.w = param(name + ".w", {in, out}, sd);
    l.b = param(name + ".b", {out}, 0.0);
    return l;
  }

  NormParams norm(const std::string& name, std::size_t d) {
    NormParams n;
    n.g = param(name + ".g", {d}, 0.0, 1.0);
    n.b = param(name + ".b", {d}, 0.0);
    return n;
  }

  AttentionParams attention(const std::string& name, std::size_t d, bool cross) {
    AttentionParams a;
    a.cross = cross;
    a.ln = norm(name + ".ln", d);
    if (cross) a.kv_ln = norm(name + ".kv_ln", d);
    a.q = linear(name + ".q", d, d);
    a.k = linear(name + ".k", d, d);
    a.v = linear(name + ".v", d, d);
    a.o = linear(name + ".o", d, d);
    return a;
  }

  FfnParams ffn(const std::string& name, std::size_t d, std::size_t dff) {
    FfnParams f;
    f.ln = norm(name + ".ln", d);
    f.fc1 = linear(name + ".fc1", d, dff);
    f.fc2 = linear(name + ".fc2", dff, d);
    return f;
  }

  TokenTrimmerParams token_trimmer(const std::string& name, std::size_t d, std::size_t dp) {
    TokenTrimmerParams t;
    t.reduce = linear(name + ".reduce", d, dp);
    t.local1 = linear(name + ".local1", dp, dp);
    t.local2 = linear(name + ".local2", dp, 1, /*zero=*/true);
    t.fuse = linear(name + ".fuse", 2 * d, dp);
    t.w_g = param(name + ".w_g", {dp, dp}, 0.0);
    return t;
  }

  HeadTrimmerParams head_trimmer(const std::string& name, std::size_t d, std::size_t dp, std::size_t heads,
                                 bool cross) {
    HeadTrimmerParams h;
    h.cross = cross;
    h.fc1 = linear(name + ".fc1", cross ? 2 * d : d, dp);
    h.fc2 = linear(name + ".fc2", dp, heads, /*zero=*/true);
    return h;
  }

  std::size_t seen() const { return seen_; }

 private:
  ParameterStore& store_;
  RngStream* rng_ = nullptr;
  bool rg_ = false;
  bool lookup_ = false;
  std::size_t seen_ = 0;
};

inline ModelParams build_layout(const ModelConfig& c, LayoutBuilder& b) {
  ModelParams m;
  m.cfg = c;
  const auto d = c.d_model, dp = c.trimmer_width();
  m.tok_emb = b.param("emb.tok", {c.vocab, d}, 0.5);
  m.txt_pos = b.param("emb.txt_pos", {c.n_text, d}, 0.1);
  m.patch = b.linear("emb.patch", c.patch_dim, d);
  m.vis_cls = b.param("emb.vis_cls", {1, d}, 0.5);
  m.vis_pos = b.param("emb.vis_pos", {c.n_visual, d}, 0.1);

  auto uni = [&](const std::string& enc, bool tok) {
    std::vector<UniLayerParams> layers(c.layers_uni);
    for (std::size_t i = 0; i < c.layers_uni; ++i) {
      const auto p = enc + ".L" + std::to_string(i);
      auto& l = layers[i];
      l.has_token_trimmer = tok;
      if (tok) l.tok_trim = b.token_trimmer(p + ".tok_trim", d, dp);
      l.msa = b.attention(p + ".msa", d, false);
      l.has_head_trimmer = c.head_prune_uni;
      if (c.head_prune_uni) l.msa_head_trim = b.head_trimmer(p + ".msa_head_trim", d, dp, c.heads, false);
      l.ffn = b.ffn(p + ".ffn", d, c.d_ff);
    }
    return layers;
  };
  m.text = uni("text", c.token_prune_text);
  m.visual = uni("vis", c.token_prune_visual);

  m.cross.resize(c.layers_cross);
  for (std::size_t i = 0; i < c.layers_cross; ++i) {
    for (Stream s : {Stream::visual, Stream::text}) {
      auto& cs = s == Stream::visual ? m.cross[i].vis : m.cross[i].txt;
      const auto p = "cross.L" + std::to_string(i) + "." + stream_tag(s);
      cs.has_token_trimmer = s == Stream::visual ? c.token_prune_cross_visual : c.token_prune_cross_text;
      if (cs.has_token_trimmer) cs.tok_trim = b.token_trimmer(p + ".tok_trim", d, dp);
      cs.msa = b.attention(p + ".msa", d, false);
      cs.mca = b.attention(p + ".mca", d, true);
      cs.has_head_trimmers = c.head_prune_cross;
      if (c.head_prune_cross) {
        cs.msa_head_trim = b.head_trimmer(p + ".msa_head_trim", d, dp, c.heads, false);
        cs.mca_head_trim = b.head_trimmer(p + ".mca_head_trim", d, dp, c.heads, true);
      }
      cs.ffn = b.ffn(p + ".ffn", d, c.d_ff);
    }
  }
  m.final_txt = b.norm("final.txt_ln", d);
  m.final_vis = b.norm("final.vis_ln", d);
  m.head = b.linear("head", 2 * d, c.num_classes);
  return m;
}

}  // namespace detail

/// Fresh parameters. Weights ~ N(0, 1/fan_in), biases 0, norm gains 1,
/// trimmer output layers (and the global bilinear map) zero.
inline ParameterStore init_parameters(const ModelConfig& cfg, std::uint64_t seed, bool requires_grad = true) {
  cfg.validate();
  ParameterStore store;
  RngStream rng(derive_seed(seed, 0x9a7a));
  detail::LayoutBuilder b(store, &rng, requires_grad);
  detail::build_layout(cfg, b);
  return store;
}

/// Typed view over an existing store; throws CheckpointError when the
/// store does not match the layout implied by cfg.
inline ModelParams bind_parameters(const ModelConfig& cfg, const ParameterStore& store) {
  detail::LayoutBuilder b(store);
  auto m = detail::build_layout(cfg, b);
  if (b.seen() != store.entries().size())
    throw CheckpointError("parameter store has " + std::to_string(store.entries().size()) +
                          " arrays, layout expects " + std::to_string(b.seen()));
  return m;
}

/// Scalar counts split into backbone and trimmer parameters.
struct ParameterCounts {
  std::size_t backbone = 0;
  std::size_t trimmers = 0;
};

inline ParameterCounts count_parameters(const ParameterStore& store) {
  ParameterCounts c;
  for (const auto& [name, t] : store.entries()) (is_trimmer_param(name) ? c.trimmers : c.backbone) += t.size();
  return c;
}

}  // namespace adaprune
