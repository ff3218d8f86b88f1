// SPDX-License-Identifier: Apache-2.0
//
// Tables and figures computed from persisted traces and evaluation records.
// Every figure is emitted together with the CSV of exactly the plotted
// series; the CSV is the artifact tests compare.

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advrobust/model.hpp"
#include "advrobust/runner.hpp"
#include "advrobust/stats.hpp"

namespace advrobust {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  friend bool operator==(const Table&, const Table&) = default;
};

/// UTF-8 CSV with a header row; fields containing commas, quotes or
/// newlines are quoted.
std::string to_csv(const Table& table);

enum class CellStatistic { kMeanStderrSteps, kWindowedLoss, kAccuracy };

/// Grouping keys for trace tables: any of "model", "epsilon", "K",
/// "variation", "item_id", "security_spec", "replicate".
struct TableSpec {
  std::vector<std::string> group_by{"model", "epsilon", "K"};
  CellStatistic statistic = CellStatistic::kMeanStderrSteps;
  double alpha = 0.01;
};

/// "m.m (s.e)" over the successful runs; "--" when every run failed.
std::string steps_cell(std::span<const std::optional<int>> success_steps);

/// One row per group: the keys, the steps cell, the number of traces and
/// the number of failed traces.
Table steps_vs_k_table(std::span<const TraceFile> traces, const TableSpec& spec = {});

/// Rows per (model, item, security_spec) with one column per checkpoint.
/// A cell reads "Attack Success" when any replicate succeeded at or before
/// the checkpoint, otherwise mean (std dev) of the windowed minimum loss.
Table injection_summary(std::span<const TraceFile> traces,
                        std::span<const int> checkpoints = std::vector<int>{100, 300},
                        int radius = 10);

/// Rows per (model, data condition): no-CoT and CoT accuracy in percent,
/// the exact McNemar p-value and the verdict at `alpha`.  Groups holding a
/// single compute condition get that accuracy only, with the rest empty.
Table accuracy_table(std::span<const EvalRecord> records, double alpha = 0.01);

/// Outcomes pairing the no-CoT (baseline) and CoT (treatment) records of
/// one model and data condition.
std::vector<PairedOutcome> pair_compute_conditions(std::span<const EvalRecord> records,
                                                   const std::string& model,
                                                   const std::string& data_condition);

struct LossSeries {
  int repeat_count = 0;
  std::vector<TraceRecord> records;
  std::optional<int> success_step;
};

/// All traces sharing a step axis, one series per K.
struct LossCurveGroup {
  std::string key;
  std::vector<LossSeries> series;
};

/// Groups by (model, item, variation, epsilon, replicate, security_spec).
std::vector<LossCurveGroup> loss_curves(std::span<const TraceFile> traces);

/// Columns K, step, loss, success_marker (1 exactly at the success step).
Table loss_curve_table(const LossCurveGroup& group);

/// Mean steps-to-success against K for each (model, epsilon).
Table steps_vs_k_series(std::span<const TraceFile> traces);

enum class PlotFormat { kSvg, kPng };
PlotFormat parse_plot_format(std::string_view text);

std::string render_loss_curve_svg(const LossCurveGroup& group);
void write_loss_curve_png(const LossCurveGroup& group, const std::filesystem::path& path);

/// Row-major saliency values, one CSV row per image row.
std::string saliency_csv(const SaliencyMap& map);

/// Every trace file under `dir` (recursive, *.jsonl with a header line),
/// sorted by path.
std::vector<TraceFile> load_traces(const std::filesystem::path& dir);
/// Every records.jsonl under `dir`, concatenated in path order.
std::vector<EvalRecord> load_records(const std::filesystem::path& dir);

/// Writes steps_vs_k.csv, injection_summary.csv and accuracy.csv for
/// whatever inputs exist.  Returns the files written.
std::vector<std::filesystem::path> generate_tables(const std::filesystem::path& in_dir,
                                                   const std::filesystem::path& out_dir);
std::vector<std::filesystem::path> generate_plots(const std::filesystem::path& in_dir,
                                                  const std::filesystem::path& out_dir,
                                                  PlotFormat format);

}  // namespace advrobust
