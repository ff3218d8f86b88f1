// SPDX-License-Identifier: Apache-2.0

#include "advrobust/pgd.hpp"

#include <algorithm>
#include <cmath>

#include "advrobust/prompt.hpp"

namespace advrobust {

void project_linf(std::span<const double> candidate, std::span<const double> center,
                  double radius, std::span<double> out) {
  if (candidate.size() != center.size() || out.size() != center.size()) {
    throw InvariantError("projection shapes differ");
  }
  for (std::size_t i = 0; i < center.size(); ++i) {
    const double lo = std::max(0.0, center[i] - radius);
    const double hi = std::min(1.0, center[i] + radius);
    out[i] = std::clamp(candidate[i], lo, hi);
  }
}

Image project_linf(const Image& candidate, const ProjectionBall& ball) {
  if (candidate.shape() != ball.center.shape()) {
    throw InvariantError("projection shapes differ");
  }
  if (!(ball.radius >= 0.0)) throw InvariantError("radius must be >= 0");
  std::vector<double> out(candidate.size());
  project_linf(candidate.pixels(), ball.center.pixels(), ball.radius, out);
  return Image(candidate.shape(), std::move(out));
}

bool check_success(std::string_view generated, std::string_view target,
                   SuccessMatch mode) {
  auto stripped = generated;
  while (!stripped.empty() &&
         std::isspace(static_cast<unsigned char>(stripped.front()))) {
    stripped.remove_prefix(1);
  }
  if (mode == SuccessMatch::kPrefix) return stripped.starts_with(target);
  return trim(generated) == target;
}

namespace {

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

AttackTrace pgd_attack(ModelAdapter& adapter, const Image& clean_image,
                       const PromptSpec& spec, const AttackConfig& config,
                       const StepCallback& on_step) {
  validate_config(config);
  validate_prompt_spec(spec, /*require_target=*/true);
  if (!adapter.capabilities().can_attack()) {
    throw UnsupportedCapability(adapter.name() +
                                " cannot be attacked: needs gradients and generation");
  }

  AttackTrace trace;
  trace.config_hash = config_hash(config, spec);

  auto current = adapter.target_nll(clean_image, spec);
  if (!std::isfinite(current.loss) || !all_finite(current.gradient.values)) {
    trace.diagnostic = "non-finite loss or gradient at the clean image";
    return trace;
  }
  trace.initial_loss = current.loss;

  const auto center = clean_image.pixels();
  std::vector<double> candidate(center.size());
  std::vector<double> iterate(center.begin(), center.end());

  for (int step = 1; step <= config.max_steps; ++step) {
    for (std::size_t i = 0; i < iterate.size(); ++i) {
      candidate[i] = iterate[i] - config.step_size * sign(current.gradient.values[i]);
    }
    project_linf(candidate, center, config.epsilon, iterate);
    Image x(clean_image.shape(), iterate);

    current = adapter.target_nll(x, spec);
    if (!std::isfinite(current.loss) || !all_finite(current.gradient.values)) {
      trace.diagnostic =
          "non-finite loss or gradient at step " + std::to_string(step);
      break;
    }
    const auto generated = adapter.generate(x, spec, config.max_new_tokens);

    TraceRecord record;
    record.step = step;
    record.loss = current.loss;
    record.success = check_success(generated, spec.target, config.success_match);
    record.linf_dev = linf_distance(x, clean_image);
    trace.records.push_back(record);
    if (on_step) on_step(record, x);

    if (record.success && !trace.success_step) {
      trace.success_step = step;
      if (config.early_stop) break;
    }
  }
  return trace;
}

double windowed_min_loss(const AttackTrace& trace, int step, int radius) {
  if (trace.records.empty() || step < 1 ||
      step > trace.records.back().step) {
    throw InvariantError("step " + std::to_string(step) +
                         " is outside the recorded range");
  }
  if (radius < 0) throw InvariantError("window radius must be >= 0");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : trace.records) {
    if (r.step >= step - radius && r.step <= step + radius) {
      best = std::min(best, r.loss);
    }
  }
  return best;
}

std::vector<double> best_so_far(const AttackTrace& trace) {
  std::vector<double> out;
  out.reserve(trace.records.size());
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : trace.records) {
    best = std::min(best, r.loss);
    out.push_back(best);
  }
  return out;
}

}  // namespace advrobust
