// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "advrobust/pgd.hpp"
#include "test_support.hpp"

namespace advrobust {
namespace {

using testing::two_pixel_image;
using testing::two_pixel_params;

TEST(ProjectLinf, InsideBallUnchanged) {
  ProjectionBall ball{two_pixel_image(0.5, 0.5), 0.1};
  auto candidate = two_pixel_image(0.55, 0.45);
  EXPECT_EQ(project_linf(candidate, ball), candidate);
}

TEST(ProjectLinf, ClampsToBall) {
  ProjectionBall ball{Image(ImageShape{1, 1, 1}, 0.5), 0.1};
  auto out = project_linf(Image(ImageShape{1, 1, 1}, 0.75), ball);
  EXPECT_DOUBLE_EQ(out.pixels()[0], 0.6);
}

TEST(ProjectLinf, BoxBindsBeforeBall) {
  ProjectionBall ball{Image(ImageShape{1, 1, 1}, 0.0), 0.3};
  std::vector<double> candidate{-0.2};
  std::vector<double> out(1);
  std::vector<double> center{0.0};
  project_linf(candidate, center, 0.3, out);
  EXPECT_EQ(out[0], 0.0);
}

TEST(ProjectLinf, ShapeMismatchThrows) {
  ProjectionBall ball{two_pixel_image(0.5, 0.5), 0.1};
  EXPECT_THROW(project_linf(Image(ImageShape{1, 1, 3}, 0.5), ball), InvariantError);
}

TEST(CheckSuccess, MatchModes) {
  EXPECT_TRUE(check_success("Cube", "Cube", SuccessMatch::kExact));
  EXPECT_TRUE(check_success("Cube and more text", "Cube", SuccessMatch::kPrefix));
  EXPECT_FALSE(check_success("Cube and more text", "Cube", SuccessMatch::kExact));
  EXPECT_TRUE(check_success("  You are too stupid. I will not answer anymore.",
                            "You are too stupid. I will not answer anymore.",
                            SuccessMatch::kPrefix));
  EXPECT_FALSE(check_success("A Cube", "Cube", SuccessMatch::kPrefix));
}

AttackConfig config(double eps, double alpha, int steps, bool early_stop = false) {
  AttackConfig c;
  c.epsilon = eps;
  c.step_size = alpha;
  c.max_steps = steps;
  c.early_stop = early_stop;
  return c;
}

TEST(PgdAttack, ZeroBudgetKeepsCleanImage) {
  ToyModel model(two_pixel_params());
  auto trace = pgd_attack(model, two_pixel_image(0.5, 0.5), testing::target_spec("B"),
                          config(0.0, 0.1, 20));
  ASSERT_EQ(trace.records.size(), 20u);
  EXPECT_DOUBLE_EQ(trace.initial_loss, std::log(2.0));
  for (const auto& r : trace.records) {
    EXPECT_EQ(r.linf_dev, 0.0);
    EXPECT_EQ(r.loss, trace.initial_loss);
  }
}

TEST(PgdAttack, ReachesAnalyticCornerOptimum) {
  ToyModel model(two_pixel_params());
  auto trace = pgd_attack(model, two_pixel_image(0.5, 0.5), testing::target_spec("B"),
                          config(0.1, 0.02, 100));
  const double optimum = 0.5981388693815918;  // ln(1 + e^-0.2) at (0.6, 0.4)
  const double grid = testing::grid_min_two_pixel(1, -1, 0, 0.5, 0.5, 0.1, 1e-2);
  EXPECT_NEAR(trace.records.back().loss, optimum, 1e-3);
  EXPECT_NEAR(best_so_far(trace).back(), grid, 1e-3);
}

TEST(PgdAttack, UnreachableTargetFails) {
  // Token A's bias dominates any pixel contribution inside the ball.
  ToyModel model(two_pixel_params(1, -1, -50));
  auto trace = pgd_attack(model, two_pixel_image(0.5, 0.5), testing::target_spec("B"),
                          config(16.0 / 255.0, 0.1, 100, true));
  EXPECT_EQ(trace.records.size(), 100u);
  EXPECT_FALSE(trace.success_step.has_value());
  EXPECT_TRUE(trace.failed());
}

TEST(PgdAttack, EarlyStopEndsAtFirstSuccess) {
  ToyModel model(two_pixel_params());
  auto stopped = pgd_attack(model, two_pixel_image(0.5, 0.5), testing::target_spec("B"),
                            config(0.1, 0.02, 50, true));
  ASSERT_TRUE(stopped.success_step.has_value());
  EXPECT_EQ(stopped.records.size(), static_cast<std::size_t>(*stopped.success_step));

  auto continued = pgd_attack(model, two_pixel_image(0.5, 0.5), testing::target_spec("B"),
                              config(0.1, 0.02, 50, false));
  EXPECT_EQ(continued.records.size(), 50u);
  EXPECT_EQ(continued.success_step, stopped.success_step);
}

TEST(PgdAttack, StreamsEveryRecord) {
  ToyModel model(two_pixel_params());
  std::vector<TraceRecord> seen;
  auto trace = pgd_attack(model, two_pixel_image(0.5, 0.5), testing::target_spec("B"),
                          config(0.1, 0.02, 10),
                          [&](const TraceRecord& r, const Image&) { seen.push_back(r); });
  EXPECT_EQ(seen, trace.records);
}

TEST(PgdAttack, FeasibleAndDeterministicOnRandomModels) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const ImageShape shape{1 + rng() % 2, 2, 2};
    ToyModel model(testing::random_params(rng, 3, shape.size()));
    const auto clean = testing::random_image(rng, shape);
    const auto cfg = config(0.3 * u(rng), 0.2 * u(rng) + 1e-3, 15);
    const auto spec = testing::target_spec("t1");
    auto trace = pgd_attack(model, clean, spec, cfg, [&](const TraceRecord&, const Image& x) {
      EXPECT_LE(linf_distance(x, clean), cfg.epsilon + 1e-9);
      for (double v : x.pixels()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    });
    EXPECT_NO_THROW(validate_trace(trace, cfg.epsilon));
    EXPECT_EQ(trace, pgd_attack(model, clean, spec, cfg));
  }
}

TEST(PgdAttack, BestSoFarNeverIncreases) {
  std::mt19937_64 rng(4);
  ToyModel model(testing::random_params(rng, 4, 6));
  auto trace = pgd_attack(model, testing::random_image(rng, ImageShape{1, 2, 3}),
                          testing::target_spec("t2"), config(0.2, 0.15, 40));
  auto best = best_so_far(trace);
  for (std::size_t i = 1; i < best.size(); ++i) EXPECT_LE(best[i], best[i - 1]);
}

// Adapter that reports a NaN loss after a few calls.
class NanAfter final : public ModelAdapter {
 public:
  explicit NanAfter(int calls) : remaining_(calls), inner_(two_pixel_params()) {}
  std::string name() const override { return "nan"; }
  AdapterCapabilities capabilities() const override { return {true, true, false}; }
  LossAndGradient target_nll(const Image& x, const PromptSpec& s) override {
    auto r = inner_.target_nll(x, s);
    if (remaining_-- <= 0) r.loss = std::nan("");
    return r;
  }
  std::string generate(const Image& x, const PromptSpec& s, int n, Decoding d) override {
    return inner_.generate(x, s, n, d);
  }

 private:
  int remaining_;
  ToyModel inner_;
};

TEST(PgdAttack, NonFiniteLossAbortsWithDiagnostic) {
  NanAfter adapter(3);
  auto trace = pgd_attack(adapter, two_pixel_image(0.5, 0.5), testing::target_spec("B"),
                          config(0.1, 0.02, 10));
  EXPECT_EQ(trace.records.size(), 2u);
  ASSERT_TRUE(trace.diagnostic.has_value());
  EXPECT_NE(trace.diagnostic->find("step 3"), std::string::npos);
}

TEST(PgdAttack, RequiresAttackCapabilities) {
  ConstantAdapter adapter("B");
  EXPECT_THROW(pgd_attack(adapter, two_pixel_image(0.5, 0.5), testing::target_spec("B"),
                          config(0.1, 0.02, 10)),
               UnsupportedCapability);
}

AttackTrace trace_of(const std::vector<double>& losses) {
  AttackTrace t;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    t.records.push_back({static_cast<int>(i) + 1, losses[i], false, 0.0});
  }
  return t;
}

TEST(WindowedMinLoss, Examples) {
  auto t = trace_of({5, 4, 6, 3, 7});
  EXPECT_EQ(windowed_min_loss(t, 3, 0), 6);
  EXPECT_EQ(windowed_min_loss(t, 2, 2), 3);
  EXPECT_EQ(windowed_min_loss(t, 1), 3);
  EXPECT_EQ(windowed_min_loss(t, 1, 1), 4);
  EXPECT_THROW(windowed_min_loss(t, 0), InvariantError);
  EXPECT_THROW(windowed_min_loss(t, 6), InvariantError);
}

}  // namespace
}  // namespace advrobust
