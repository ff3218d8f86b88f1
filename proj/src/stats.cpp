// SPDX-License-Identifier: Apache-2.0

#include "advrobust/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

namespace advrobust {

DiscordantCounts paired_counts(std::span<const PairedOutcome> outcomes) {
  std::set<std::string> seen;
  DiscordantCounts counts;
  for (const auto& o : outcomes) {
    if (!seen.insert(o.item_id).second) {
      throw InvariantError("duplicate item_id '" + o.item_id + "'");
    }
    if (o.baseline_correct && !o.treatment_correct) ++counts.b;
    if (!o.baseline_correct && o.treatment_correct) ++counts.c;
  }
  counts.n_items = static_cast<long>(outcomes.size());
  return counts;
}

double mcnemar_exact(const DiscordantCounts& counts) {
  if (counts.b < 0 || counts.c < 0) {
    throw InvariantError("discordant counts must be >= 0");
  }
  const long m = counts.b + counts.c;
  if (m == 0) return 1.0;
  const long tail = std::min(counts.b, counts.c);
  // Binomial(m, 1/2) lower tail in log space; 2^-m underflows past m ~ 1074.
  const double log_half_m = -static_cast<double>(m) * std::log(2.0);
  double log_term = log_half_m;  // k = 0
  double peak = log_term;
  std::vector<double> logs{log_term};
  for (long k = 1; k <= tail; ++k) {
    log_term += std::log(static_cast<double>(m - k + 1)) -
                std::log(static_cast<double>(k));
    logs.push_back(log_term);
    peak = std::max(peak, log_term);
  }
  double sum = 0.0;
  for (double l : logs) sum += std::exp(l - peak);
  const double p = 2.0 * std::exp(peak + std::log(sum));
  return std::min(1.0, p);
}

double mcnemar_chi_square(const DiscordantCounts& counts,
                          bool continuity_correction) {
  const long m = counts.b + counts.c;
  if (m == 0) return 1.0;
  double diff = std::abs(static_cast<double>(counts.b - counts.c));
  if (continuity_correction) diff = std::max(0.0, diff - 1.0);
  const double statistic = diff * diff / static_cast<double>(m);
  return std::erfc(std::sqrt(statistic / 2.0));
}

std::string_view to_string(Verdict verdict) {
  return verdict == Verdict::kYes ? "Yes" : "No";
}

Verdict benefit_decision(double p, double alpha) {
  if (!(p > 0.0 && p <= 1.0)) throw InvariantError("p must lie in (0, 1]");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw InvariantError("alpha must lie in (0, 1)");
  }
  return p < alpha ? Verdict::kYes : Verdict::kNo;
}

double accuracy(std::span<const bool> correct) {
  if (correct.empty()) throw InvariantError("accuracy of an empty list");
  const auto hits = std::count(correct.begin(), correct.end(), true);
  return static_cast<double>(hits) / static_cast<double>(correct.size());
}

MeanSpread mean_stddev(std::span<const double> values) {
  if (values.empty()) throw InvariantError("mean of an empty list");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

MeanSpread mean_stderr(std::span<const double> values) {
  auto result = mean_stddev(values);
  result.spread /= std::sqrt(static_cast<double>(values.size()));
  return result;
}

namespace {

std::string one_decimal(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  std::string s(buf);
  if (s == "-0.0") s = "0.0";
  return s;
}

}  // namespace

std::string format_mean_spread(const MeanSpread& value) {
  return one_decimal(value.mean) + " (" + one_decimal(value.spread) + ")";
}

std::string format_p_value(double p) {
  if (p == 0.0) return "0.0e0";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1e", p);
  // "4.5e-03" -> "4.5e-3", "1.0e+00" -> "1.0e0"
  std::string s(buf);
  auto e = s.find('e');
  std::string mantissa = s.substr(0, e);
  int exponent = std::stoi(s.substr(e + 1));
  return mantissa + "e" + std::to_string(exponent);
}

std::string format_percent(double fraction) { return one_decimal(100.0 * fraction); }

}  // namespace advrobust
