// SPDX-License-Identifier: Apache-2.0
//
// Paired significance testing and the aggregate statistics printed in the
// result tables.

#pragma once

#include <span>
#include <string>

#include "advrobust/core.hpp"

namespace advrobust {

struct DiscordantCounts {
  /// Baseline correct, treatment wrong.
  long b = 0;
  /// Baseline wrong, treatment correct.
  long c = 0;
  long n_items = 0;

  friend bool operator==(const DiscordantCounts&, const DiscordantCounts&) = default;
};

/// Throws InvariantError on a duplicate item_id.
DiscordantCounts paired_counts(std::span<const PairedOutcome> outcomes);

/// Exact two-sided binomial McNemar test:
///   p = min(1, 2 * sum_{k <= min(b,c)} C(b+c, k) / 2^(b+c)),  p = 1 if b+c = 0.
double mcnemar_exact(const DiscordantCounts& counts);

/// Chi-square McNemar with one degree of freedom, optionally with Edwards'
/// continuity correction.  Provided for comparison with the exact test.
double mcnemar_chi_square(const DiscordantCounts& counts,
                          bool continuity_correction = true);

enum class Verdict { kYes, kNo };
std::string_view to_string(Verdict verdict);

/// kYes iff p < alpha.
Verdict benefit_decision(double p, double alpha = 0.01);

/// Fraction of true entries.  Throws on an empty list.
double accuracy(std::span<const bool> correct);

struct MeanSpread {
  double mean = 0.0;
  double spread = 0.0;
};

/// Mean and sample standard deviation (n - 1).  A single value has zero
/// spread.
MeanSpread mean_stddev(std::span<const double> values);

/// Mean and standard error of the mean: sample standard deviation / sqrt(n).
MeanSpread mean_stderr(std::span<const double> values);

/// "m.m (s.s)", both rounded to one decimal.
std::string format_mean_spread(const MeanSpread& value);

/// Two significant digits, plain exponent: 4.5e-3, 7.9e-1, 1.0e0.
std::string format_p_value(double p);

/// Percentage with one decimal: 0.62 -> "62.0".
std::string format_percent(double fraction);

}  // namespace advrobust
