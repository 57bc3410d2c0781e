#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaprune/analysis.hpp"
#include "adaprune/config.hpp"
#include "adaprune/dataset.hpp"
#include "adaprune/efficiency.hpp"
#include "adaprune/parameters.hpp"
#include "adaprune/runtime.hpp"
#include "adaprune/training.hpp"

namespace adaprune {

// Entry points behind the command-line tool. Each writes its outputs as
// tab-separated text under a header line carrying the tool version and the
// config hash, and returns the computed values for programmatic use.

class IncompatibleCheckpoint : public std::runtime_error {
 public:
  IncompatibleCheckpoint(const std::string& what, std::vector<std::string> diff)
      : std::runtime_error(what), diff_(std::move(diff)) {}
  const std::vector<std::string>& diff() const { return diff_; }

 private:
  std::vector<std::string> diff_;
};

struct LoadedModel {
  RunConfig config;
  ParameterStore params;
  ModelParams model;
};

/// Loads a checkpoint. With a config file, the model section must match the
/// checkpoint's; the data section of the file then replaces the stored one.
inline LoadedModel load_model(const std::string& checkpoint_path, const std::string& config_path = "") {
  if (!std::filesystem::exists(checkpoint_path))
    throw std::runtime_error("checkpoint '" + checkpoint_path + "' does not exist");
  Checkpoint ck = load_checkpoint(checkpoint_path);
  LoadedModel out;
  out.config = ck.config;
  if (!config_path.empty()) {
    const RunConfig given = load_config(config_path);
    auto diff = model_config_diff(ck.config, given);
    if (!diff.empty()) {
      std::string msg = "checkpoint '" + checkpoint_path + "' is incompatible with config '" + config_path + "':";
      for (const auto& d : diff) msg += "\n  " + d;
      throw IncompatibleCheckpoint(msg, std::move(diff));
    }
    out.config = given;
  }
  out.params = std::move(ck.params);
  out.model = bind_parameters(out.config.model, out.params);
  return out;
}

namespace detail {
inline void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << text;
  if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::string sibling(const std::string& checkpoint_path, const std::string& name) {
  return (std::filesystem::path(checkpoint_path).parent_path() / name).string();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// train

struct TrainOutputs {
  std::string checkpoint_path, log_path;
  TrainResult result;
};

inline TrainOutputs cmd_train(const RunConfig& cfg, const TrainProgress& progress = nullptr) {
  TrainOutputs out;
  out.result = train(cfg, progress);
  std::filesystem::create_directories(cfg.output_dir);
  out.checkpoint_path = (std::filesystem::path(cfg.output_dir) / "checkpoint.bin").string();
  out.log_path = (std::filesystem::path(cfg.output_dir) / "train_log.tsv").string();
  save_checkpoint(out.checkpoint_path, cfg, out.result.params);
  detail::write_text(out.log_path, file_header(cfg, "train_log") + kTrainLogColumns + "\n" + out.result.log);
  return out;
}

inline TrainOutputs cmd_train(const std::string& config_path, const TrainProgress& progress = nullptr) {
  return cmd_train(load_config(config_path), progress);
}

// ---------------------------------------------------------------------------
// eval

struct EvalOutputs {
  EvalSummary summary;
  std::vector<InstanceResult> instances;
  std::string report;
};

inline EvalOutputs cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& out_path = "",
                            const std::string& config_path = "") {
  const LoadedModel lm = load_model(checkpoint, config_path);
  const SyntheticTask task(lm.config.data, lm.config.model);
  EvalOutputs out;
  out.instances = evaluate(lm.model, task.split(split));
  out.summary = summarize(out.instances);
  const auto& s = out.summary;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s\t%zu\t%.6f\t%.6f\t%.6f\t%.2f\t%.6f\n", split.c_str(), s.count, s.accuracy, s.beta_T,
                s.beta_H, s.mean_speedup, s.mean_ratio);
  out.report = file_header(lm.config, "eval") + "split\tcount\taccuracy\tbeta_T\tbeta_H\tmean_speedup\tmean_flops_ratio\n" + buf;
  detail::write_text(out_path.empty() ? detail::sibling(checkpoint, "eval_" + split + ".tsv") : out_path, out.report);
  return out;
}

// ---------------------------------------------------------------------------
// flops

struct FlopsOutputs {
  std::vector<InstanceResult> instances;
  std::vector<HistogramBin> bins;
  std::string records_path, histogram_path;
};

inline FlopsOutputs cmd_flops(const std::string& checkpoint, const std::string& split, std::size_t bins = 20,
                              const std::string& out_prefix = "", const std::string& config_path = "") {
  const LoadedModel lm = load_model(checkpoint, config_path);
  const SyntheticTask task(lm.config.data, lm.config.model);
  FlopsOutputs out;
  out.instances = evaluate(lm.model, task.split(split));
  std::ostringstream rec;
  rec << file_header(lm.config, "flops_records")
      << "index\tdifficulty\tlabel\tprediction\tbeta_T\tbeta_H\tqkv\tscores\tcontext\tout_proj\tffn\ttoken_trimmers\t"
         "head_trimmers\tembeddings\thead\ttotal\tbaseline\tspeedup\n";
  std::vector<double> totals;
  for (const auto& r : out.instances) {
    const auto& f = r.flops;
    rec << r.index << '\t' << r.difficulty << '\t' << r.label << '\t' << r.prediction << '\t' << fmt_g(r.beta_T) << '\t'
        << fmt_g(r.beta_H) << '\t' << f.qkv << '\t' << f.scores << '\t' << f.context << '\t' << f.out_proj << '\t'
        << f.ffn << '\t' << f.token_trimmers << '\t' << f.head_trimmers << '\t' << f.embeddings << '\t' << f.head
        << '\t' << f.total() << '\t' << f.baseline << '\t' << fmt_g(f.speedup()) << '\n';
    totals.push_back(static_cast<double>(f.total()));
  }
  out.bins = histogram(totals, bins);
  std::ostringstream hist;
  hist << file_header(lm.config, "flops_histogram") << "bin\tlo\thi\tcount\n";
  for (std::size_t b = 0; b < out.bins.size(); ++b)
    hist << b << '\t' << fmt_g(out.bins[b].lo) << '\t' << fmt_g(out.bins[b].hi) << '\t' << out.bins[b].count << '\n';
  const std::string prefix = out_prefix.empty() ? detail::sibling(checkpoint, "flops_" + split) : out_prefix;
  out.records_path = prefix + "_records.tsv";
  out.histogram_path = prefix + "_histogram.tsv";
  detail::write_text(out.records_path, rec.str());
  detail::write_text(out.histogram_path, hist.str());
  return out;
}

// ---------------------------------------------------------------------------
// redundancy

struct RedundancyOutputs {
  std::vector<RedundancyRow> rows;
  std::string path;
};

inline RedundancyOutputs cmd_redundancy(const std::string& checkpoint, const std::string& split, std::size_t limit = 200,
                                        const std::string& out_path = "", const std::string& config_path = "") {
  const LoadedModel lm = load_model(checkpoint, config_path);
  const SyntheticTask task(lm.config.data, lm.config.model);
  RedundancyOutputs out;
  out.rows = redundancy_profile(lm.model, task.split(split, limit));
  std::ostringstream os;
  os << file_header(lm.config, "redundancy") << "metric\tlayer\tmean\tstddev\tmin\tmax\tcount\n";
  for (const auto& r : out.rows)
    os << r.metric << '\t' << r.layer << '\t' << fmt_g(r.mean) << '\t' << fmt_g(r.stddev) << '\t' << fmt_g(r.min) << '\t'
       << fmt_g(r.max) << '\t' << r.count << '\n';
  out.path = out_path.empty() ? detail::sibling(checkpoint, "redundancy_" + split + ".tsv") : out_path;
  detail::write_text(out.path, os.str());
  return out;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOutputs {
  std::vector<AblationRow> rows;
  std::vector<ParetoPoint> pareto;
  std::string path;
};

/// methods: names from ablation_methods(), or "token", "head", "all".
inline AblateOutputs cmd_ablate(const std::string& checkpoint, const std::vector<std::string>& methods,
                                const std::vector<double>& targets, const std::string& out_path = "",
                                const std::string& config_path = "", std::size_t val_limit = 0,
                                std::size_t test_limit = 0) {
  const LoadedModel lm = load_model(checkpoint, config_path);
  const SyntheticTask task(lm.config.data, lm.config.model);
  std::vector<std::string> expanded;
  for (const auto& m : methods) {
    if (m == "all" || m == "token" || m == "head") {
      for (const auto& am : ablation_methods())
        if (m == "all" || (m == "token") == (am.family == AblationFamily::token)) expanded.push_back(am.name);
    } else {
      expanded.push_back(find_ablation_method(m).name);
    }
  }
  for (double t : targets)
    if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("ablation targets must lie in (0, 1]");
  const AblationHarness h(lm.model, task.split("val", val_limit), task.split("test", test_limit));
  AblateOutputs out;
  std::ostringstream os;
  os << file_header(lm.config, "ablation")
     << "method\tmatched\ttarget\tknob\tval_matched\ttest_accuracy\ttest_flops_ratio\ttest_speedup\ttest_beta_T\t"
        "test_beta_H\n";
  for (const auto& m : expanded)
    for (double t : targets) {
      const AblationRow r = h.run(m, t);
      out.rows.push_back(r);
      out.pareto.push_back({m + "@" + fmt_g(t), r.test_flops_ratio, r.test_accuracy});
      os << r.method << '\t' << r.matched << '\t' << fmt_g(r.target) << '\t' << fmt_g(r.knob) << '\t'
         << fmt_g(r.val_matched) << '\t' << fmt_g(r.test_accuracy) << '\t' << fmt_g(r.test_flops_ratio) << '\t'
         << fmt_g(r.test_speedup) << '\t' << fmt_g(r.test_beta_T) << '\t' << fmt_g(r.test_beta_H) << '\n';
    }
  out.pareto = pareto_front(out.pareto);
  os << "# pareto (flops_ratio, accuracy)\n";
  for (const auto& p : out.pareto) os << "# " << p.label << '\t' << fmt_g(p.flops) << '\t' << fmt_g(p.accuracy) << '\n';
  out.path = out_path.empty() ? detail::sibling(checkpoint, "ablation.tsv") : out_path;
  detail::write_text(out.path, os.str());
  return out;
}

// ---------------------------------------------------------------------------
// masks

struct MaskRow {
  std::string site;
  Stream stream;
  std::size_t retained = 0;
  std::string rendering;  // visual: grid rows joined by '/', text: kept words
};

struct MasksOutputs {
  SyntheticInstance instance;
  std::vector<MaskRow> rows;
  std::string path, trace_path;
};

inline MasksOutputs cmd_masks(const std::string& checkpoint, std::size_t instance_id, const std::string& out_path = "",
                              const std::string& config_path = "") {
  const LoadedModel lm = load_model(checkpoint, config_path);
  const SyntheticTask task(lm.config.data, lm.config.model);
  const auto& c = lm.config.model;
  MasksOutputs out;
  out.instance = task.make(instance_id);
  const auto r = evaluate(lm.model, {out.instance}).front();
  const auto sites = token_sites(c);
  const std::size_t g = lm.config.data.grid;
  for (std::size_t i = 0; i < r.masks.token.size(); ++i) {
    const auto& m = r.masks.token[i];
    MaskRow row{m.site, sites.at(i).stream, 0, ""};
    for (double v : m.values) row.retained += v != 0.0;
    if (row.stream == Stream::visual) {
      for (std::size_t y = 0; y < g; ++y) {
        if (y) row.rendering += '/';
        for (std::size_t x = 0; x < g; ++x) row.rendering += m.values[1 + y * g + x] != 0.0 ? '1' : '0';
      }
    } else {
      std::vector<std::size_t> kept;
      for (std::size_t j = 0; j < m.values.size(); ++j)
        if (m.values[j] != 0.0) kept.push_back(out.instance.input.tokens[j]);
      row.rendering = query_text(kept);
    }
    out.rows.push_back(std::move(row));
  }
  std::ostringstream os;
  os << file_header(lm.config, "masks") << "# instance " << instance_id << " label " << out.instance.label
     << " prediction " << r.prediction << " difficulty " << out.instance.difficulty << " query \""
     << query_text(out.instance.input.tokens) << "\"\n";
  os << "# object cells:";
  for (const auto& o : out.instance.objects) os << ' ' << o.cell;
  os << "\nsite\tstream\tretained\tmask\n";
  for (const auto& row : out.rows)
    os << row.site << '\t' << stream_tag(row.stream) << '\t' << row.retained << '\t' << row.rendering << '\n';
  out.path = out_path.empty() ? detail::sibling(checkpoint, "masks_" + std::to_string(instance_id) + ".tsv") : out_path;
  detail::write_text(out.path, os.str());
  std::ostringstream trace;
  trace << file_header(lm.config, "mask_trace") << "# instance\tkind\tsite\tvalues\n";
  write_mask_trace(trace, {{instance_id, r.masks}});
  out.trace_path = out.path.substr(0, out.path.rfind('.')) + "_trace.tsv";
  detail::write_text(out.trace_path, trace.str());
  return out;
}

}  // namespace adaprune
