// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point:
//   advrobust attack run --config PATH [--resume] [--seed INT] [--out DIR]
//   advrobust mcq run ...
//   advrobust describe-classify run ...
//   advrobust report tables --in DIR --out DIR
//   advrobust report plots --in DIR --out DIR --format {svg,png}

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "advrobust/report.hpp"
#include "advrobust/runner.hpp"

namespace {

using namespace advrobust;

struct RunArgs {
  std::string config;
  bool resume = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

CLI::App* add_run(CLI::App& parent, const std::string& group, const std::string& help,
                  RunArgs& args) {
  auto* cmd = parent.add_subcommand(group, help)->require_subcommand(1);
  auto* run = cmd->add_subcommand("run", "execute the protocol described by a config file");
  run->add_option("--config", args.config, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_flag("--resume", args.resume, "skip cells whose results are already on disk");
  run->add_option("--seed", args.seed, "override the global seed");
  run->add_option("--out", args.out, "override the output directory");
  return run;
}

int run_protocol(const RunArgs& args, const std::set<Protocol>& allowed,
                 const std::string& command) {
  auto config = load_experiment_config(args.config);
  if (!allowed.contains(config.protocol)) {
    std::cerr << command << ": config protocol '" << to_string(config.protocol)
              << "' is not handled by this command\n";
    return 2;
  }
  RunOptions options;
  options.resume = args.resume;
  options.seed_override = args.seed;
  if (args.out) options.out_override = *args.out;
  const auto summary = run_experiment(config, options);
  std::cout << to_string(config.protocol) << ": " << summary.cells_run << " computed, "
            << summary.cells_skipped << " resumed, " << summary.cells_total << " total\n";
  for (const auto& e : summary.errors) std::cerr << "error: " << e << '\n';
  return summary.errors.empty() && summary.complete() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial robustness evaluation harness for vision-language models"};
  app.require_subcommand(1);

  RunArgs attack_args, mcq_args, describe_args;
  auto* attack = add_run(app, "attack", "PGD attack protocols (injection_attack, k_sweep)",
                         attack_args);
  auto* mcq = add_run(app, "mcq", "multiple-choice evaluation (mcq_eval)", mcq_args);
  auto* describe = add_run(app, "describe-classify",
                           "two-stage describe-then-classify pipeline", describe_args);

  std::string in_dir, out_dir, format = "svg";
  auto* report = app.add_subcommand("report", "tables and plots from persisted results")
                     ->require_subcommand(1);
  auto* tables = report->add_subcommand("tables", "write CSV tables");
  tables->add_option("--in", in_dir, "directory with traces or records")
      ->required()
      ->check(CLI::ExistingDirectory);
  tables->add_option("--out", out_dir, "output directory")->required();
  auto* plots = report->add_subcommand("plots", "write loss curves and their CSVs");
  plots->add_option("--in", in_dir, "directory with traces")
      ->required()
      ->check(CLI::ExistingDirectory);
  plots->add_option("--out", out_dir, "output directory")->required();
  plots->add_option("--format", format, "plot format")->check(CLI::IsMember({"svg", "png"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (attack->parsed()) {
      return run_protocol(attack_args, {Protocol::kInjectionAttack, Protocol::kKSweep},
                          "attack run");
    }
    if (mcq->parsed()) return run_protocol(mcq_args, {Protocol::kMcqEval}, "mcq run");
    if (describe->parsed()) {
      return run_protocol(describe_args, {Protocol::kDescribeClassify},
                          "describe-classify run");
    }
    if (tables->parsed()) {
      for (const auto& path : generate_tables(in_dir, out_dir)) std::cout << path.string() << '\n';
      return 0;
    }
    if (plots->parsed()) {
      for (const auto& path : generate_plots(in_dir, out_dir, parse_plot_format(format))) {
        std::cout << path.string() << '\n';
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
