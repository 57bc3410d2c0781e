#pragma once

#include <stdexcept>
#include <vector>

#include "adaprune/model.hpp"
#include "adaprune/rng.hpp"
#include "adaprune/tensor.hpp"

namespace adaprune {

inline Tensor linear(const Tensor& x, const LinearParams& l) { return add_bias(matmul(x, l.w), l.b); }

inline constexpr double kStandardizeEps = 1e-5;

/// (s - mean_w) / sqrt(var_w + eps) with weighted moments over the entries.
/// Unit weights give plain standardization; binary weights give the
/// statistics of the surviving entries only.
inline Tensor standardize(const Tensor& s, const Tensor* weights = nullptr) {
  Tensor w = weights ? *weights : Tensor::filled(s.shape(), 1.0);
  const Tensor total = sum(w);
  const Tensor mu = div_scalar(sum(mul(w, s)), total);
  const Tensor centered = sub_scalar(s, mu);
  const Tensor var = div_scalar(sum(mul(w, square(centered))), total);
  return div_scalar(centered, sqrt(add_constant(var, kStandardizeEps)));
}

struct TokenScores {
  Tensor local;   // [N]
  Tensor global;  // [N]
  Tensor total;   // [N]
};

/// Token importance for the rows of x [N x D], given the block-input CLS
/// rows of both modalities ([1 x D] each). `weights` marks which rows are
/// still alive for the standardization of the global score.
inline TokenScores token_importance(const TokenTrimmerParams& p, const Tensor& x, const Tensor& x_cls,
                                    const Tensor& y_cls, const Tensor* weights = nullptr,
                                    bool use_global = true) {
  const auto n = x.rows();
  const Tensor reduced = linear(x, p.reduce);
  TokenScores out;
  out.local = reshape(linear(gelu(linear(reduced, p.local1)), p.local2), {n});
  const Tensor g = linear(concat_cols({x_cls, y_cls}), p.fuse);
  const Tensor raw = reshape(matmul_nt(matmul(g, p.w_g), reduced), {n});
  out.global = standardize(raw, weights);
  out.total = use_global ? add(out.local, out.global) : out.local;
  return out;
}

enum class ModuleKind { msa, mca };

/// Per-head scores for one attention module. MCA modules read both CLS rows.
inline Tensor head_importance(const HeadTrimmerParams& p, ModuleKind kind, const Tensor& x_cls,
                              const Tensor* y_cls = nullptr) {
  Tensor in = x_cls;
  if (kind == ModuleKind::mca) {
    if (!y_cls) throw std::invalid_argument("head_importance: MCA module requires the other modality's CLS");
    in = concat_cols({x_cls, *y_cls});
  }
  const Tensor out = linear(gelu(linear(in, p.fc1)), p.fc2);
  return reshape(out, {out.size()});
}

/// Noise pair for a Gumbel-sigmoid draw.
struct GumbelNoise {
  std::vector<double> g1, g2;

  static GumbelNoise draw(std::size_t n, RngStream& rng) {
    GumbelNoise z;
    z.g1.resize(n);
    z.g2.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      z.g1[i] = rng.gumbel();
      z.g2[i] = rng.gumbel();
    }
    return z;
  }
  static GumbelNoise zero(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; }
};

/// M = exp((pi+g1)/tau) / (exp((pi+g1)/tau) + exp(g2/tau)), evaluated as
/// sigmoid((pi + g1 - g2) / tau). Differentiable in pi.
inline Tensor gumbel_sigmoid(const Tensor& pi, double tau, const GumbelNoise& noise) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_sigmoid: temperature must be positive");
  if (noise.g1.size() != pi.size() || noise.g2.size() != pi.size())
    throw ShapeError("gumbel_sigmoid: noise length mismatch");
  std::vector<double> shift(pi.size());
  for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = noise.g1[i] - noise.g2[i];
  return sigmoid(scale(add(pi, Tensor::from(pi.shape(), std::move(shift))), 1.0 / tau));
}

inline Tensor gumbel_sigmoid_sample(const Tensor& pi, double tau, RngStream& rng) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_sigmoid_sample: temperature must be positive");
  return gumbel_sigmoid(pi, tau, GumbelNoise::draw(pi.size(), rng));
}

/// Forces position 0 (CLS) of a soft mask to exactly 1; gradient to that
/// entry is cut.
inline Tensor force_cls(const Tensor& m) {
  std::vector<double> keep(m.size(), 1.0), set(m.size(), 0.0);
  keep[0] = 0.0;
  set[0] = 1.0;
  return add(mul(m, Tensor::from(m.shape(), std::move(keep))), Tensor::from(m.shape(), std::move(set)));
}

enum class InferenceMode { deterministic, bernoulli };

/// Binary mask from scores: deterministic keeps pi_i > threshold; bernoulli
/// keeps with probability sigmoid(pi_i - threshold). Position 0 is forced to
/// 1 afterwards when has_cls is set.
inline std::vector<double> inference_mask(std::span<const double> pi, InferenceMode mode, bool has_cls,
                                          RngStream* rng = nullptr, double threshold = 0.0) {
  std::vector<double> m(pi.size());
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (mode == InferenceMode::deterministic) {
      m[i] = pi[i] > threshold ? 1.0 : 0.0;
    } else {
      if (!rng) throw std::invalid_argument("inference_mask: bernoulli mode needs an RngStream");
      m[i] = rng->bernoulli(sigmoid_value(pi[i] - threshold)) ? 1.0 : 0.0;
    }
  }
  if (has_cls && !m.empty()) m[0] = 1.0;
  return m;
}

}  // namespace adaprune
