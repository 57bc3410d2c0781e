#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "adaprune/commands.hpp"

using namespace adaprune;

namespace {

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(tok);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Input-adaptive token and head pruning for a two-stream cross-modal transformer"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config, checkpoint, split = "test", out, methods = "all", targets = "0.5";
  std::size_t bins = 20, limit = 200, instance = 0, every = 100, val_limit = 0, test_limit = 0;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "Train a model and write checkpoint.bin and train_log.tsv");
  train->add_option("config", config, "Configuration file")->required()->check(CLI::ExistingFile);
  train->add_option("--print-every", every, "Progress interval in steps (0 = silent)");

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    sub->add_option("--config", config, "Config whose model section must match the checkpoint")
        ->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out, "Output path (default: next to the checkpoint)");
  };
  auto* eval = app.add_subcommand("eval", "Accuracy, retention and mean speedup on a split");
  add_common(eval);
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* flops = app.add_subcommand("flops", "Per-instance FLOPs records and histogram");
  add_common(flops);
  flops->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  flops->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);

  auto* red = app.add_subcommand("redundancy", "Per-layer token and head similarity");
  add_common(red);
  red->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  red->add_option("--limit", limit, "Instances to use (0 = whole split)");

  auto* abl = app.add_subcommand("ablate", "Trimmers versus pruning baselines at matched budgets");
  add_common(abl);
  abl->add_option("--method", methods, "Comma list of methods, or token, head, all");
  abl->add_option("--targets", targets, "Comma list of matched FLOPs ratios / head retentions");
  abl->add_option("--val-limit", val_limit, "Validation instances used to match budgets (0 = all)");
  abl->add_option("--test-limit", test_limit, "Test instances (0 = all)");

  auto* masks = app.add_subcommand("masks", "Retained tokens per block for one instance");
  add_common(masks);
  masks->add_option("--instance", instance, "Global instance index")->required();

  auto* gen = app.add_subcommand("generate", "Write a dataset split as text");
  gen->add_option("config", config, "Configuration file")->required()->check(CLI::ExistingFile);
  gen->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  gen->add_option("-o,--out", out, "Output path")->required();

  app.add_subcommand("defaults", "Print the default configuration");
  app.add_flag("-q,--quiet", quiet, "Suppress the summary on stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const RunConfig cfg = load_config(config);
      TrainProgress progress;
      if (every > 0 && !quiet)
        progress = [&](std::size_t step, const StepLosses& l) {
          if (step % every == 0 || step + 1 == cfg.train.pretrain_steps + cfg.train.steps)
            std::fprintf(stderr, "step %zu loss %.4f task %.4f cost %.5f beta_T %.3f beta_H %.3f gamma %.3f\n", step,
                         l.total, l.task, l.cost, l.beta_T, l.beta_H, l.gamma_T);
        };
      const auto r = cmd_train(cfg, progress);
      if (!quiet) {
        std::printf("checkpoint %s\nlog %s\n", r.checkpoint_path.c_str(), r.log_path.c_str());
        if (r.result.final_eval)
          std::printf("val accuracy %.4f beta_T %.4f beta_H %.4f mean speedup %.2f\n", r.result.final_eval->accuracy,
                      r.result.final_eval->beta_T, r.result.final_eval->beta_H, r.result.final_eval->mean_speedup);
      }
    } else if (eval->parsed()) {
      const auto r = cmd_eval(checkpoint, split, out, config);
      if (!quiet) std::cout << r.report;
    } else if (flops->parsed()) {
      const auto r = cmd_flops(checkpoint, split, bins, out, config);
      if (!quiet) std::printf("records %s\nhistogram %s\n", r.records_path.c_str(), r.histogram_path.c_str());
    } else if (red->parsed()) {
      const auto r = cmd_redundancy(checkpoint, split, limit, out, config);
      if (!quiet)
        for (const auto& row : r.rows)
          std::printf("%s\t%s\t%.4f\t%.4f\n", row.metric.c_str(), row.layer.c_str(), row.mean, row.stddev);
    } else if (abl->parsed()) {
      const auto r = cmd_ablate(checkpoint, split_names(methods), parse_list(targets), out, config, val_limit, test_limit);
      if (!quiet)
        for (const auto& row : r.rows)
          std::printf("%-12s target %.3f accuracy %.4f flops_ratio %.4f beta_H %.3f\n", row.method.c_str(), row.target,
                      row.test_accuracy, row.test_flops_ratio, row.test_beta_H);
    } else if (masks->parsed()) {
      const auto r = cmd_masks(checkpoint, instance, out, config);
      if (!quiet) std::cout << read_file(r.path);
    } else if (gen->parsed()) {
      const RunConfig cfg = load_config(config);
      const SyntheticTask task(cfg.data, cfg.model);
      write_file(out, file_header(cfg, "dataset_" + split) + serialize_instances(task.split(split)));
    } else {
      std::cout << RunConfig{}.to_text();
    }
  } catch (const IncompatibleCheckpoint& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
