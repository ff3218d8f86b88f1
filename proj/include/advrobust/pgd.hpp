// SPDX-License-Identifier: Apache-2.0
//
// Targeted l-infinity projected gradient descent against a model adapter.

#pragma once

#include <functional>
#include <string_view>

#include "advrobust/core.hpp"
#include "advrobust/model.hpp"

namespace advrobust {

/// The feasible set {x : |x - center|_inf <= radius} intersected with [0,1].
struct ProjectionBall {
  Image center;
  double radius = 0.0;
};

/// Elementwise clamp to [center - r, center + r] and then to [0,1].
Image project_linf(const Image& candidate, const ProjectionBall& ball);

/// Raw-vector form of project_linf, used inside the attack loop.  Writes
/// the projection of `candidate` into `out`.
void project_linf(std::span<const double> candidate, std::span<const double> center,
                  double radius, std::span<double> out);

bool check_success(std::string_view generated, std::string_view target,
                   SuccessMatch mode);

/// Invoked once per executed step with the freshly appended record and the
/// iterate it describes.
using StepCallback = std::function<void(const TraceRecord&, const Image&)>;

/// Runs the attack from the clean image.  Step t applies
///   x_t = project(x_{t-1} - step_size * sign(grad NLL(x_{t-1})))
/// then records the loss, deviation and greedy-generation success at x_t.
/// A non-finite loss or gradient ends the run with trace.diagnostic set.
AttackTrace pgd_attack(ModelAdapter& adapter, const Image& clean_image,
                       const PromptSpec& spec, const AttackConfig& config,
                       const StepCallback& on_step = {});

/// Minimum loss over records with step in [step - radius, step + radius].
double windowed_min_loss(const AttackTrace& trace, int step, int radius = 10);

/// Running minimum of the per-step losses.
std::vector<double> best_so_far(const AttackTrace& trace);

}  // namespace advrobust
