#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaprune/backbone.hpp"
#include "adaprune/config.hpp"
#include "adaprune/dataset.hpp"
#include "adaprune/efficiency.hpp"
#include "adaprune/model.hpp"
#include "adaprune/parameters.hpp"
#include "adaprune/rng.hpp"
#include "adaprune/runtime.hpp"

namespace adaprune {

// ---------------------------------------------------------------------------
// Losses

/// Cross-entropy of a [1 x C] (or [C]) logit row against a class id.
inline Tensor task_loss(const Tensor& logits, std::size_t label) {
  if (label >= logits.size())
    throw std::invalid_argument("task_loss: label " + std::to_string(label) + " out of range for " +
                                std::to_string(logits.size()) + " classes");
  const Tensor row2 = reshape(logits, {1, logits.size()});
  return neg(element(log_softmax(row2), label));
}

/// KL(p || q) with p = softmax(p_logits), q = softmax(q_logits).
inline Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  const Tensor lp = log_softmax(reshape(p_logits, {1, p_logits.size()}));
  const Tensor lq = log_softmax(reshape(q_logits, {1, q_logits.size()}));
  return sum(mul(exp(lp), sub(lp, lq)));
}

/// Full-model task loss plus KL(student || teacher); the teacher enters the
/// KL term as a constant.
inline Tensor self_distillation_loss(const Tensor& sparse_logits, const Tensor& full_logits, std::size_t label) {
  return add(task_loss(full_logits, label), kl_divergence(sparse_logits, detach(full_logits)));
}

inline double cost_loss(double beta_T, double beta_H, double gamma_T, double gamma_H) {
  return (beta_T - gamma_T) * (beta_T - gamma_T) + (beta_H - gamma_H) * (beta_H - gamma_H);
}

/// Differentiable cost. A kind with no trimmed site contributes nothing.
inline Tensor cost_loss(const RetentionTensors& beta, double gamma_T, double gamma_H) {
  Tensor total = Tensor::scalar(0.0);
  if (beta.beta_T) total = add(total, square(add_constant(*beta.beta_T, -gamma_T)));
  if (beta.beta_H) total = add(total, square(add_constant(*beta.beta_H, -gamma_H)));
  return total;
}

/// Linear decrease from 1 to target over fraction * total steps, then flat.
inline double curriculum_gamma(std::size_t step, std::size_t total_steps, double fraction, double target) {
  if (total_steps == 0 || step > total_steps)
    throw std::invalid_argument("curriculum_gamma: step must lie in [0, total_steps]");
  const double progress = std::min(static_cast<double>(step) / (fraction * static_cast<double>(total_steps)), 1.0);
  return 1.0 - (1.0 - target) * progress;
}

/// Linear warmup over warmup_fraction of the steps, then linear decay to 0.
inline double learning_rate_at(const TrainConfig& t, std::size_t step) {
  const double s = static_cast<double>(step), n = static_cast<double>(t.steps);
  const double warm = std::floor(t.warmup_fraction * n);
  if (warm > 0 && s < warm) return t.learning_rate * (s + 1.0) / warm;
  return t.learning_rate * std::max(0.0, (n - s) / std::max(1.0, n - warm));
}

inline double tau_at(const TrainConfig& t, std::size_t step) {
  if (t.steps <= 1) return t.tau;
  const double f = static_cast<double>(step) / static_cast<double>(t.steps - 1);
  return t.tau + (t.tau_final - t.tau) * f;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam without weight decay.
class Adam {
 public:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  explicit Adam(const ParameterStore& params) {
    for (const auto& [_, t] : params.entries()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step(ParameterStore& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    auto& e = params.entries();
    for (std::size_t i = 0; i < e.size(); ++i) {
      Tensor& p = e[i].second;
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      const auto w = p.mutable_leaf_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
        v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + kEps);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, t] : params.entries())
    if (t.has_grad())
      for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, t] : params.entries())
      if (t.has_grad())
        for (auto& g : t.mutable_grad()) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training step

struct StepLosses {
  double total = 0, task = 0, sd = 0, cost = 0;
  double beta_T = 0, beta_H = 0;  // soft retention, batch mean
  double gamma_T = 1, gamma_H = 1;
  double accuracy = 0;  // sparse-model batch accuracy
  double grad_norm = 0;
  double lr = 0, tau = 0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepOptions {
  bool trimmers_all_ones = false;  // sparse pass keeps everything; trimmers get no gradient
};

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// One optimizer update over a batch. Gradients are accumulated example by
/// example; each example's loss is scaled by 1/B.
inline StepLosses train_step(ParameterStore& store, const ModelParams& m, Adam& opt,
                             const std::vector<const SyntheticInstance*>& batch, const TrainConfig& t,
                             std::size_t step, RngStream& rng, const StepOptions& so = {}) {
  StepLosses out;
  out.gamma_T = curriculum_gamma(step, t.steps, t.curriculum_fraction, t.gamma_T);
  out.gamma_H = curriculum_gamma(step, t.steps, t.curriculum_fraction, t.gamma_H);
  out.lr = learning_rate_at(t, step);
  out.tau = tau_at(t, step);
  TrimmerOptions topt;
  topt.tau = out.tau;
  topt.straight_through = t.straight_through;
  if (so.trimmers_all_ones) topt.prune_tokens = topt.prune_heads = false;

  store.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto* inst : batch) {
    const SoftForward sparse = encode_soft(m, inst->input, trimmer_soft_policy(topt, rng));
    const Tensor l_task = task_loss(sparse.logits, inst->label);
    const Tensor l_sd = t.lambda_sd > 0
                            ? self_distillation_loss(sparse.logits, encode_plain(m, inst->input).logits, inst->label)
                            : Tensor::scalar(0.0);
    const RetentionTensors beta = retention_tensors(sparse);
    const Tensor l_cost = cost_loss(beta, out.gamma_T, out.gamma_H);
    const Tensor loss = add(add(l_task, scale(l_sd, t.lambda_sd)), scale(l_cost, t.lambda_cost));
    const double lv = loss.item();
    if (!std::isfinite(lv)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (instance " << inst->index << "): task=" << l_task.item()
         << " sd=" << l_sd.item() << " cost=" << l_cost.item();
      throw NonFiniteLoss(os.str());
    }
    backward(scale(loss, inv_b));
    out.total += lv * inv_b;
    out.task += l_task.item() * inv_b;
    out.sd += l_sd.item() * inv_b;
    out.cost += l_cost.item() * inv_b;
    out.beta_T += (beta.beta_T ? beta.beta_T->item() : 1.0) * inv_b;
    out.beta_H += (beta.beta_H ? beta.beta_H->item() : 1.0) * inv_b;
    out.accuracy += (argmax(sparse.logits.values()) == inst->label ? 1.0 : 0.0) * inv_b;
  }
  out.grad_norm = clip_grad_norm(store, t.grad_clip);
  opt.step(store, out.lr);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct InstanceResult {
  std::size_t index = 0, label = 0, prediction = 0, difficulty = 0;
  double beta_T = 1, beta_H = 1;
  FlopsBreakdown flops;
  MaskSet masks;
};

struct EvalSummary {
  std::size_t count = 0;
  double accuracy = 0, beta_T = 0, beta_H = 0, mean_speedup = 0, mean_flops = 0, mean_ratio = 0;
  flops_t baseline_flops = 0;
};

inline InstanceResult evaluate_instance(const ModelParams& m, const SyntheticInstance& inst, const GatheredPolicy& policy) {
  const GatheredForward g = encode_gathered(m, inst.input, policy);
  InstanceResult r;
  r.index = inst.index;
  r.label = inst.label;
  r.difficulty = inst.difficulty;
  r.prediction = argmax(g.logits);
  const auto st = retention_stats(g.masks);
  r.beta_T = st.beta_T;
  r.beta_H = st.beta_H;
  r.flops = model_flops(m.cfg, g.masks);
  r.masks = g.masks;
  return r;
}

inline EvalSummary summarize(const std::vector<InstanceResult>& rs) {
  EvalSummary s;
  s.count = rs.size();
  if (rs.empty()) return s;
  const double n = static_cast<double>(rs.size());
  for (const auto& r : rs) {
    s.accuracy += (r.prediction == r.label ? 1.0 : 0.0) / n;
    s.beta_T += r.beta_T / n;
    s.beta_H += r.beta_H / n;
    s.mean_speedup += r.flops.speedup() / n;
    s.mean_ratio += r.flops.ratio() / n;
    s.mean_flops += static_cast<double>(r.flops.total()) / n;
  }
  s.baseline_flops = rs.front().flops.baseline;
  return s;
}

/// Deterministic-threshold inference over instances.
inline std::vector<InstanceResult> evaluate(const ModelParams& m, const std::vector<SyntheticInstance>& data,
                                            const TrimmerOptions& opt = {}) {
  std::vector<InstanceResult> out;
  out.reserve(data.size());
  RngStream rng(0);
  const GatheredPolicy policy = trimmer_gathered_policy(opt, &rng);
  for (const auto& inst : data) out.push_back(evaluate_instance(m, inst, policy));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

inline constexpr const char* kTrainLogColumns =
    "kind\tstep\tlr\ttau\tgamma_T\tgamma_H\tloss\tL_task\tL_sd\tL_cost\tbeta_T\tbeta_H\taccuracy\tgrad_norm\tspeedup";

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct TrainResult {
  ParameterStore params;
  std::vector<StepLosses> history;
  std::string log;  // TSV rows, one per step plus eval rows, without header
  std::optional<EvalSummary> final_eval;
};

using TrainProgress = std::function<void(std::size_t step, const StepLosses&)>;

/// Full training run. Batches are sampled from the training split with a
/// per-step stream, so the run is a pure function of the RunConfig.
///
/// With pretrain_steps > 0 the backbone is first trained on the task loss
/// alone with every trimmer inactive ("pretrain" log rows). The adaptive
/// phase then starts with a fresh optimizer and its own learning-rate,
/// temperature and budget schedules. Progress steps count across both phases.
inline TrainResult train(const RunConfig& cfg, const TrainProgress& progress = nullptr, const StepOptions& so = {}) {
  cfg.validate();
  const SyntheticTask task(cfg.data, cfg.model);
  const auto& t = cfg.train;
  TrainResult res;
  res.params = init_parameters(cfg.model, t.seed);
  const ModelParams m = bind_parameters(cfg.model, res.params);

  const auto train_n = task.split_size("train");
  if (train_n == 0) throw ConfigError("training split is empty");
  const auto val = task.split("val", t.eval_size);
  const RngStream root(derive_seed(t.seed, 0x7a11));

  auto eval_row = [&](std::size_t step) {
    const EvalSummary s = summarize(evaluate(m, val));
    res.log += "eval\t" + std::to_string(step) + "\t\t\t\t\t\t\t\t\t" + fmt_g(s.beta_T) + '\t' + fmt_g(s.beta_H) + '\t' +
               fmt_g(s.accuracy) + "\t\t" + fmt_g(s.mean_speedup) + '\n';
    return s;
  };

  std::vector<SyntheticInstance> batch_data(t.batch_size);
  std::vector<const SyntheticInstance*> batch(t.batch_size);
  auto run_phase = [&](const char* kind, const TrainConfig& pt, const RngStream& phase_root, const StepOptions& pso,
                       std::size_t offset) {
    Adam opt(res.params);
    for (std::size_t step = 0; step < pt.steps; ++step) {
      RngStream rng = phase_root.fork(step);
      for (std::size_t b = 0; b < pt.batch_size; ++b) {
        batch_data[b] = task.make(task.split_begin("train") + static_cast<std::size_t>(rng.below(train_n)));
        batch[b] = &batch_data[b];
      }
      const StepLosses l = train_step(res.params, m, opt, batch, pt, step, rng, pso);
      res.history.push_back(l);
      res.log += std::string(kind) + '\t' + std::to_string(offset + step) + '\t' + fmt_g(l.lr) + '\t' + fmt_g(l.tau) +
                 '\t' + fmt_g(l.gamma_T) + '\t' + fmt_g(l.gamma_H) + '\t' + fmt_g(l.total) + '\t' + fmt_g(l.task) +
                 '\t' + fmt_g(l.sd) + '\t' + fmt_g(l.cost) + '\t' + fmt_g(l.beta_T) + '\t' + fmt_g(l.beta_H) + '\t' +
                 fmt_g(l.accuracy) + '\t' + fmt_g(l.grad_norm) + "\t\n";
      if (progress) progress(offset + step, l);
      if (pt.eval_every && (step + 1) % pt.eval_every == 0 && step + 1 != pt.steps) eval_row(offset + step + 1);
    }
  };

  if (t.pretrain_steps > 0) {
    TrainConfig pt = t;
    pt.steps = t.pretrain_steps;
    pt.lambda_sd = pt.lambda_cost = 0.0;
    pt.gamma_T = pt.gamma_H = 1.0;
    pt.tau_final = pt.tau;
    StepOptions pso = so;
    pso.trimmers_all_ones = true;
    run_phase("pretrain", pt, RngStream(derive_seed(t.seed, 0x97e7)), pso, 0);
  }
  run_phase("step", t, root, so, t.pretrain_steps);
  if (!val.empty()) res.final_eval = eval_row(t.pretrain_steps + t.steps);
  return res;
}

}  // namespace adaprune
