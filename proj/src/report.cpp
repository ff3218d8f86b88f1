// SPDX-License-Identifier: Apache-2.0

#include "advrobust/report.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

namespace advrobust {

namespace fs = std::filesystem;

std::string to_csv(const Table& table) {
  auto field = [](const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
      if (ch == '"') out += '"';
      out += ch;
    }
    return out + "\"";
  };
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out += ',';
      out += field(cells[i]);
    }
    return out + "\n";
  };
  std::string out = line(table.header);
  for (const auto& row : table.rows) out += line(row);
  return out;
}

namespace {

std::string real_text(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

// 64/255 style when the budget sits on the 8-bit grid.
std::string epsilon_text(double epsilon) {
  const double levels = epsilon * 255.0;
  if (std::abs(levels - std::round(levels)) < 1e-9) {
    return std::to_string(static_cast<long>(std::round(levels))) + "/255";
  }
  return real_text(epsilon);
}

std::string key_value(const TraceFile& t, const std::string& key) {
  const auto& h = t.header;
  if (key == "model") return h.model;
  if (key == "epsilon") return epsilon_text(h.epsilon);
  if (key == "K") return std::to_string(h.repeat_count);
  if (key == "variation") return h.variation ? std::string(to_string(*h.variation)) : "none";
  if (key == "item_id") return h.item_id;
  if (key == "security_spec") return h.security_spec ? "Yes" : "No";
  if (key == "replicate") return std::to_string(h.replicate);
  throw InvariantError("unknown grouping key '" + key + "'");
}

// Compares part by part in key order; numeric parts compare as numbers.
struct GroupKey {
  std::vector<std::string> text;
  std::vector<std::optional<double>> numeric;

  bool operator<(const GroupKey& o) const {
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (numeric[i] && o.numeric[i] && *numeric[i] != *o.numeric[i]) {
        return *numeric[i] < *o.numeric[i];
      }
      if (text[i] != o.text[i]) return text[i] < o.text[i];
    }
    return false;
  }
};

GroupKey group_key(const TraceFile& t, const std::vector<std::string>& keys) {
  GroupKey g;
  for (const auto& k : keys) {
    g.text.push_back(key_value(t, k));
    std::optional<double> numeric;
    if (k == "epsilon") numeric = t.header.epsilon;
    if (k == "K") numeric = t.header.repeat_count;
    if (k == "replicate") numeric = t.header.replicate;
    g.numeric.push_back(numeric);
  }
  return g;
}

}  // namespace

std::string steps_cell(std::span<const std::optional<int>> success_steps) {
  std::vector<double> steps;
  for (const auto& s : success_steps) {
    if (s) steps.push_back(*s);
  }
  if (steps.empty()) return "--";
  return format_mean_spread(mean_stderr(steps));
}

Table steps_vs_k_table(std::span<const TraceFile> traces, const TableSpec& spec) {
  if (traces.empty()) throw InvariantError("no traces to tabulate");
  if (spec.statistic != CellStatistic::kMeanStderrSteps) {
    throw InvariantError("steps_vs_k_table needs the mean_stderr_steps statistic");
  }
  std::map<GroupKey, std::vector<std::optional<int>>> groups;
  for (const auto& t : traces) {
    groups[group_key(t, spec.group_by)].push_back(t.trace.success_step);
  }
  Table table;
  table.header = spec.group_by;
  table.header.insert(table.header.end(), {"steps", "n_traces", "n_failed"});
  for (const auto& [key, steps] : groups) {
    auto row = key.text;
    const auto failed = std::count(steps.begin(), steps.end(), std::nullopt);
    row.push_back(steps_cell(steps));
    row.push_back(std::to_string(steps.size()));
    row.push_back(std::to_string(failed));
    table.rows.push_back(std::move(row));
  }
  return table;
}

Table injection_summary(std::span<const TraceFile> traces, std::span<const int> checkpoints,
                        int radius) {
  if (traces.empty()) throw InvariantError("no traces to summarize");
  const std::vector<std::string> keys{"model", "item_id", "security_spec"};
  std::map<GroupKey, std::vector<const TraceFile*>> groups;
  for (const auto& t : traces) groups[group_key(t, keys)].push_back(&t);

  Table table;
  table.header = keys;
  for (int step : checkpoints) table.header.push_back("step_" + std::to_string(step));
  for (const auto& [key, members] : groups) {
    auto row = key.text;
    for (int checkpoint : checkpoints) {
      bool succeeded = false;
      std::vector<double> minima;
      for (const auto* t : members) {
        if (t->trace.success_step && *t->trace.success_step <= checkpoint) {
          succeeded = true;
          continue;
        }
        if (t->trace.records.empty() || t->trace.records.back().step < checkpoint) {
          throw InvariantError("trace for '" + t->header.item_id +
                               "' ends before step " + std::to_string(checkpoint) +
                               " without a recorded success");
        }
        minima.push_back(windowed_min_loss(t->trace, checkpoint, radius));
      }
      row.push_back(succeeded ? "Attack Success" : format_mean_spread(mean_stddev(minima)));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::vector<PairedOutcome> pair_compute_conditions(std::span<const EvalRecord> records,
                                                   const std::string& model,
                                                   const std::string& data_condition) {
  std::map<std::string, std::pair<std::optional<bool>, std::optional<bool>>> by_item;
  for (const auto& r : records) {
    if (r.model != model || r.data_condition != data_condition) continue;
    auto& slot = by_item[r.item_id];
    auto& target = r.compute_condition == "nocot" ? slot.first : slot.second;
    if (target) {
      throw InvariantError("duplicate record for item '" + r.item_id + "'");
    }
    target = r.correct;
  }
  std::vector<PairedOutcome> out;
  for (const auto& [item, pair] : by_item) {
    if (!pair.first || !pair.second) {
      throw InvariantError("item '" + item + "' lacks a paired compute condition");
    }
    out.push_back({item, *pair.first, *pair.second});
  }
  return out;
}

Table accuracy_table(std::span<const EvalRecord> records, double alpha) {
  if (records.empty()) throw InvariantError("no records to tabulate");
  std::set<std::pair<std::string, std::string>> groups;
  for (const auto& r : records) {
    if (r.compute_condition != "cot" && r.compute_condition != "nocot") {
      throw InvariantError("unknown compute condition '" + r.compute_condition + "'");
    }
    groups.emplace(r.model, r.data_condition);
  }
  Table table;
  table.header = {"model", "data", "no_cot", "cot", "p_value", "benefit"};
  // clean before adv within a model
  std::vector<std::pair<std::string, std::string>> ordered(groups.begin(), groups.end());
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return (a.second == "clean") > (b.second == "clean");
  });
  for (const auto& [model, data] : ordered) {
    // A single-condition run (one classifier, say) has nothing to pair.
    std::set<std::string> computes;
    for (const auto& r : records) {
      if (r.model == model && r.data_condition == data) computes.insert(r.compute_condition);
    }
    if (computes.size() == 1) {
      std::vector<char> flags;
      for (const auto& r : records) {
        if (r.model == model && r.data_condition == data) flags.push_back(r.correct);
      }
      auto correct = std::make_unique<bool[]>(flags.size());
      std::copy(flags.begin(), flags.end(), correct.get());
      const auto pct = format_percent(accuracy({correct.get(), flags.size()}));
      const bool cot = *computes.begin() == "cot";
      table.rows.push_back({model, data, cot ? "" : pct, cot ? pct : "", "", ""});
      continue;
    }
    const auto outcomes = pair_compute_conditions(records, model, data);
    const std::size_t n = outcomes.size();
    auto baseline = std::make_unique<bool[]>(n);
    auto treatment = std::make_unique<bool[]>(n);
    for (std::size_t i = 0; i < n; ++i) {
      baseline[i] = outcomes[i].baseline_correct;
      treatment[i] = outcomes[i].treatment_correct;
    }
    const double p = mcnemar_exact(paired_counts(outcomes));
    const auto verdict = benefit_decision(p, alpha);
    table.rows.push_back({model, data, format_percent(accuracy({baseline.get(), n})),
                          format_percent(accuracy({treatment.get(), n})), format_p_value(p),
                          std::string(to_string(verdict)) + " (" + format_p_value(p) + ")"});
  }
  return table;
}

std::vector<LossCurveGroup> loss_curves(std::span<const TraceFile> traces) {
  if (traces.empty()) throw InvariantError("no traces to plot");
  const std::vector<std::string> keys{"model",   "item_id",   "variation",
                                      "epsilon", "replicate", "security_spec"};
  std::map<GroupKey, std::vector<const TraceFile*>> groups;
  for (const auto& t : traces) groups[group_key(t, keys)].push_back(&t);
  std::vector<LossCurveGroup> out;
  for (const auto& [key, members] : groups) {
    LossCurveGroup group;
    for (std::size_t i = 0; i < key.text.size(); ++i) {
      if (i > 0) group.key += "__";
      std::string part = key.text[i];
      std::replace(part.begin(), part.end(), '/', '-');
      group.key += part;
    }
    for (const auto* t : members) {
      group.series.push_back({t->header.repeat_count, t->trace.records, t->trace.success_step});
    }
    std::stable_sort(group.series.begin(), group.series.end(),
                     [](const auto& a, const auto& b) { return a.repeat_count < b.repeat_count; });
    out.push_back(std::move(group));
  }
  return out;
}

Table loss_curve_table(const LossCurveGroup& group) {
  Table table;
  table.header = {"K", "step", "loss", "success_marker"};
  for (const auto& s : group.series) {
    for (const auto& r : s.records) {
      table.rows.push_back({std::to_string(s.repeat_count), std::to_string(r.step),
                            real_text(r.loss),
                            s.success_step && *s.success_step == r.step ? "1" : "0"});
    }
  }
  return table;
}

Table steps_vs_k_series(std::span<const TraceFile> traces) {
  if (traces.empty()) throw InvariantError("no traces to plot");
  std::map<GroupKey, std::vector<std::optional<int>>> groups;
  const std::vector<std::string> keys{"model", "epsilon", "K"};
  for (const auto& t : traces) groups[group_key(t, keys)].push_back(t.trace.success_step);
  Table table;
  table.header = {"model", "epsilon", "K", "mean_steps", "stderr", "n_failed"};
  for (const auto& [key, steps] : groups) {
    std::vector<double> ok;
    for (const auto& s : steps) {
      if (s) ok.push_back(*s);
    }
    const auto failed = std::to_string(steps.size() - ok.size());
    if (ok.empty()) {
      table.rows.push_back({key.text[0], key.text[1], key.text[2], "", "", failed});
    } else {
      auto ms = mean_stderr(ok);
      table.rows.push_back({key.text[0], key.text[1], key.text[2], real_text(ms.mean),
                            real_text(ms.spread), failed});
    }
  }
  return table;
}

PlotFormat parse_plot_format(std::string_view text) {
  if (text == "svg") return PlotFormat::kSvg;
  if (text == "png") return PlotFormat::kPng;
  throw InvariantError("plot format must be svg or png");
}

namespace {

constexpr std::array<const char*, 6> kPalette = {"#1f77b4", "#2ca02c", "#9467bd",
                                                 "#ff7f0e", "#8c564b", "#17becf"};
constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMargin = 50;

struct Frame {
  int max_step = 1;
  double lo = 0.0;
  double hi = 1.0;

  double x(int step) const {
    return kMargin + (kWidth - 2.0 * kMargin) * (step - 1) / std::max(1, max_step - 1);
  }
  double y(double loss) const {
    return kHeight - kMargin - (kHeight - 2.0 * kMargin) * (loss - lo) / (hi - lo);
  }
};

Frame frame_for(const LossCurveGroup& group) {
  Frame f;
  f.lo = std::numeric_limits<double>::infinity();
  f.hi = -std::numeric_limits<double>::infinity();
  for (const auto& s : group.series) {
    for (const auto& r : s.records) {
      f.max_step = std::max(f.max_step, r.step);
      f.lo = std::min(f.lo, r.loss);
      f.hi = std::max(f.hi, r.loss);
    }
  }
  if (!std::isfinite(f.lo)) f.lo = 0.0, f.hi = 1.0;
  if (f.hi - f.lo < 1e-12) f.lo -= 0.5, f.hi += 0.5;
  return f;
}

}  // namespace

std::string render_loss_curve_svg(const LossCurveGroup& group) {
  const Frame f = frame_for(group);
  std::ostringstream svg;
  char buf[128];
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kHeight - kMargin << "\" x2=\""
      << kWidth - kMargin << "\" y2=\"" << kHeight - kMargin << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin
      << "\" y2=\"" << kHeight - kMargin << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 12
      << "\" text-anchor=\"middle\" font-size=\"12\">PGD step</text>\n";
  svg << "<text x=\"14\" y=\"" << kHeight / 2
      << "\" font-size=\"12\" transform=\"rotate(-90 14," << kHeight / 2
      << ")\" text-anchor=\"middle\">target loss</text>\n";
  std::snprintf(buf, sizeof buf, "%.3g", f.hi);
  svg << "<text x=\"" << kMargin - 4 << "\" y=\"" << kMargin + 4
      << "\" text-anchor=\"end\" font-size=\"10\">" << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.3g", f.lo);
  svg << "<text x=\"" << kMargin - 4 << "\" y=\"" << kHeight - kMargin
      << "\" text-anchor=\"end\" font-size=\"10\">" << buf << "</text>\n";
  for (std::size_t i = 0; i < group.series.size(); ++i) {
    const auto& s = group.series[i];
    const char* color = kPalette[i % kPalette.size()];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
    for (const auto& r : s.records) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", f.x(r.step), f.y(r.loss));
      svg << buf;
    }
    svg << "\"/>\n";
    for (const auto& r : s.records) {
      if (s.success_step && r.step == *s.success_step) {
        std::snprintf(buf, sizeof buf, "%.2f\" cy=\"%.2f", f.x(r.step), f.y(r.loss));
        svg << "<circle cx=\"" << buf << "\" r=\"4\" fill=\"red\"/>\n";
      }
    }
    svg << "<text x=\"" << kWidth - kMargin + 4 << "\" y=\"" << kMargin + 14 * i
        << "\" font-size=\"10\" fill=\"" << color << "\">K=" << s.repeat_count
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

namespace {

struct Canvas {
  int width;
  int height;
  std::vector<unsigned char> rgb;

  Canvas(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w * h * 3), 255) {}

  void put(int x, int y, std::array<unsigned char, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &rgb[static_cast<std::size_t>((y * width + x) * 3)];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }

  void line(double x0, double y0, double x1, double y1, std::array<unsigned char, 3> c) {
    const int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      put(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
          static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
  }

  void dot(double cx, double cy, int r, std::array<unsigned char, 3> c) {
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        if (dx * dx + dy * dy <= r * r) {
          put(static_cast<int>(std::lround(cx)) + dx, static_cast<int>(std::lround(cy)) + dy, c);
        }
      }
    }
  }
};

std::array<unsigned char, 3> hex_color(const char* hex) {
  auto nibble = [](char ch) {
    return static_cast<unsigned char>(ch <= '9' ? ch - '0' : ch - 'a' + 10);
  };
  return {static_cast<unsigned char>(nibble(hex[1]) * 16 + nibble(hex[2])),
          static_cast<unsigned char>(nibble(hex[3]) * 16 + nibble(hex[4])),
          static_cast<unsigned char>(nibble(hex[5]) * 16 + nibble(hex[6]))};
}

}  // namespace

void write_loss_curve_png(const LossCurveGroup& group, const fs::path& path) {
  const Frame f = frame_for(group);
  Canvas canvas(kWidth, kHeight);
  const std::array<unsigned char, 3> black{0, 0, 0};
  canvas.line(kMargin, kHeight - kMargin, kWidth - kMargin, kHeight - kMargin, black);
  canvas.line(kMargin, kMargin, kMargin, kHeight - kMargin, black);
  for (std::size_t i = 0; i < group.series.size(); ++i) {
    const auto& s = group.series[i];
    const auto color = hex_color(kPalette[i % kPalette.size()]);
    for (std::size_t j = 1; j < s.records.size(); ++j) {
      canvas.line(f.x(s.records[j - 1].step), f.y(s.records[j - 1].loss),
                  f.x(s.records[j].step), f.y(s.records[j].loss), color);
    }
    if (s.records.size() == 1) {
      canvas.dot(f.x(s.records[0].step), f.y(s.records[0].loss), 1, color);
    }
    for (const auto& r : s.records) {
      if (s.success_step && r.step == *s.success_step) {
        canvas.dot(f.x(r.step), f.y(r.loss), 4, {220, 0, 0});
      }
    }
  }

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, kWidth, kHeight, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < kHeight; ++y) {
    png_write_row(png, &canvas.rgb[static_cast<std::size_t>(y * kWidth * 3)]);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

std::string saliency_csv(const SaliencyMap& map) {
  std::string out;
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      if (c > 0) out += ',';
      out += real_text(map.at(r, c));
    }
    out += '\n';
  }
  return out;
}

namespace {

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& suffix) {
  std::vector<fs::path> files;
  if (!fs::exists(dir)) return files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    if (name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

bool starts_with_header(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) return false;
  auto j = nlohmann::json::parse(line, nullptr, false);
  return j.is_object() && j.value("type", std::string{}) == "header";
}

}  // namespace

std::vector<TraceFile> load_traces(const fs::path& dir) {
  std::vector<TraceFile> out;
  for (const auto& path : sorted_files(dir, ".jsonl")) {
    if (starts_with_header(path)) out.push_back(read_trace_file(path));
  }
  return out;
}

std::vector<EvalRecord> load_records(const fs::path& dir) {
  std::vector<EvalRecord> out;
  for (const auto& path : sorted_files(dir, "records.jsonl")) {
    if (path.filename() != "records.jsonl") continue;
    auto records = read_eval_records(path);
    out.insert(out.end(), records.begin(), records.end());
  }
  return out;
}

std::vector<fs::path> generate_tables(const fs::path& in_dir, const fs::path& out_dir) {
  std::vector<fs::path> written;
  const auto traces = load_traces(in_dir);
  std::vector<TraceFile> sweep, injection;
  for (const auto& t : traces) {
    (t.header.protocol == Protocol::kInjectionAttack ? injection : sweep).push_back(t);
  }
  if (!sweep.empty()) {
    written.push_back(out_dir / "steps_vs_k.csv");
    write_file_atomic(written.back(), to_csv(steps_vs_k_table(sweep)));
  }
  if (!injection.empty()) {
    // Checkpoints and window come from the recorded configs.
    std::set<int> steps;
    for (const auto& t : injection) steps.insert(t.header.config.max_steps);
    std::vector<int> checkpoints{100};
    for (int s : steps) {
      if (s != 100) checkpoints.push_back(s);
    }
    written.push_back(out_dir / "injection_summary.csv");
    write_file_atomic(written.back(),
                      to_csv(injection_summary(injection, checkpoints,
                                               injection.front().header.config.window_radius)));
  }
  const auto records = load_records(in_dir);
  if (!records.empty()) {
    written.push_back(out_dir / "accuracy.csv");
    write_file_atomic(written.back(), to_csv(accuracy_table(records)));
  }
  if (written.empty()) {
    throw InvariantError("no traces or records found under " + in_dir.string());
  }
  return written;
}

std::vector<fs::path> generate_plots(const fs::path& in_dir, const fs::path& out_dir,
                                     PlotFormat format) {
  const auto traces = load_traces(in_dir);
  if (traces.empty()) throw InvariantError("no traces found under " + in_dir.string());
  std::vector<fs::path> written;
  for (const auto& group : loss_curves(traces)) {
    const auto stem = out_dir / ("loss__" + group.key);
    written.push_back(fs::path(stem) += ".csv");
    write_file_atomic(written.back(), to_csv(loss_curve_table(group)));
    if (format == PlotFormat::kSvg) {
      written.push_back(fs::path(stem) += ".svg");
      write_file_atomic(written.back(), render_loss_curve_svg(group));
    } else {
      written.push_back(fs::path(stem) += ".png");
      write_loss_curve_png(group, written.back());
    }
  }
  written.push_back(out_dir / "steps_vs_k_series.csv");
  write_file_atomic(written.back(), to_csv(steps_vs_k_series(traces)));
  return written;
}

}  // namespace advrobust
