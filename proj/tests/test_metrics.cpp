#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"
#include "trackrl/metrics.hpp"

namespace trackrl {
namespace {

Trajectory straight() {
  return generate_track(TrackKind::kStraight, {.length = 10.0, .speed = 2.0});
}

// One tick per waypoint, offset sideways by `offset(k)`.
TrajectoryLog log_along(const Trajectory& t, const std::function<double(std::size_t)>& offset) {
  TrajectoryLog log;
  for (std::size_t k = 0; k < t.size(); ++k) {
    LogTick tick;
    tick.t = 0.05 * static_cast<double>(k);
    tick.state = {t[k].x, t[k].y + offset(k), 0.0, t[k].v, 0.0};
    tick.waypoint = k;
    log.ticks.push_back(tick);
  }
  return log;
}

TEST(Metrics, OnTrackIsAllZero) {
  const Trajectory t = straight();
  const Metrics m = compute_metrics(log_along(t, [](std::size_t) { return 0.0; }), t);
  EXPECT_EQ(m.max_pos_de, 0.0);
  EXPECT_EQ(m.max_neg_de, 0.0);
  EXPECT_EQ(m.max_abs_de, 0.0);
  EXPECT_EQ(m.mean_abs_de, 0.0);
  EXPECT_EQ(m.mean_vel_err, 0.0);
  EXPECT_TRUE(m.completed);
}

TEST(Metrics, SinglePositiveExcursion) {
  const Trajectory t = straight();
  const Metrics m =
      compute_metrics(log_along(t, [](std::size_t k) { return k == 7 ? 0.7 : 0.0; }), t);
  EXPECT_NEAR(m.max_pos_de, 0.7, 1e-12);
  EXPECT_EQ(m.max_neg_de, 0.0);
  EXPECT_NEAR(m.max_abs_de, 0.7, 1e-12);
  EXPECT_NEAR(m.mean_abs_de, 0.7 / static_cast<double>(t.size()), 1e-12);
}

TEST(Metrics, IncompleteAndDivergedRuns) {
  const Trajectory t = straight();
  TrajectoryLog log = log_along(t, [](std::size_t) { return 0.1; });
  log.ticks.pop_back();
  EXPECT_FALSE(compute_metrics(log, t).completed);
  const TrajectoryLog far = log_along(t, [](std::size_t k) { return k == 3 ? -4.5 : 0.0; });
  const Metrics m = compute_metrics(far, t);
  EXPECT_FALSE(m.completed);
  EXPECT_NEAR(m.max_neg_de, -4.5, 1e-12);
  EXPECT_TRUE(compute_metrics(far, t, 5.0).completed);
}

TEST(Metrics, EmptyLogThrows) {
  EXPECT_THROW(compute_metrics({}, straight()), EmptyLog);
}

// Oracle: an exhaustive scan over ticks with d_e recomputed independently
// as the signed distance to the line through the tick's segment.
TEST(Metrics, MatchBruteForceScan) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> off(-3, 3), v(0, 5);
  for (int c = 0; c < 50; ++c) {
    const Trajectory t = testing::random_polyline(rng, 40);
    TrajectoryLog log;
    std::size_t i = 0;
    const int n = 1 + static_cast<int>(rng() % 80);
    for (int k = 0; k < n; ++k) {
      i = std::min(t.size() - 1, i + rng() % 2);
      LogTick tick;
      tick.state = {t[i].x + off(rng), t[i].y + off(rng), 0.0, v(rng), 0.0};
      tick.waypoint = i;
      log.ticks.push_back(tick);
    }
    double pos = 0.0, neg = 0.0, abs_sum = 0.0, vel_sum = 0.0;
    for (const LogTick& tick : log.ticks) {
      const std::size_t a = tick.waypoint + 1 < t.size() ? tick.waypoint : tick.waypoint - 1;
      const double dx = t[a + 1].x - t[a].x, dy = t[a + 1].y - t[a].y;
      const double de = (dx * (tick.state.y - t[a].y) - dy * (tick.state.x - t[a].x)) /
                        std::hypot(dx, dy);
      pos = std::max(pos, de);
      neg = std::min(neg, de);
      abs_sum += std::abs(de);
      vel_sum += std::abs(t[tick.waypoint].v - tick.state.v);
    }
    const Metrics m = compute_metrics(log, t, 1e9);
    EXPECT_NEAR(m.max_pos_de, pos, 1e-9);
    EXPECT_NEAR(m.max_neg_de, neg, 1e-9);
    EXPECT_NEAR(m.max_abs_de, std::max(pos, -neg), 1e-9);
    EXPECT_NEAR(m.mean_abs_de, abs_sum / n, 1e-9);
    EXPECT_NEAR(m.mean_vel_err, vel_sum / n, 1e-9);
    EXPECT_GE(m.max_pos_de, 0.0);
    EXPECT_LE(m.max_neg_de, 0.0);
  }
}

TEST(TrajectoryLogFile, RoundTripAndErrors) {
  const Trajectory t = straight();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  TrajectoryLog log = log_along(t, [&](std::size_t) { return u(rng); });
  for (auto& tick : log.ticks) {
    tick.command = {u(rng) + 2.0, u(rng)};
    tick.state.omega = u(rng);
    tick.d_e = u(rng);
  }
  const auto dir = testing::scratch_dir("metrics_log");
  save_trajectory_log(log, dir / "log.csv");
  const TrajectoryLog back = load_trajectory_log(dir / "log.csv");
  ASSERT_EQ(back.ticks.size(), log.ticks.size());
  for (std::size_t k = 0; k < log.ticks.size(); ++k) {
    EXPECT_EQ(back.ticks[k].t, log.ticks[k].t);
    EXPECT_EQ(back.ticks[k].state.x, log.ticks[k].state.x);
    EXPECT_EQ(back.ticks[k].state.y, log.ticks[k].state.y);
    EXPECT_EQ(back.ticks[k].state.omega, log.ticks[k].state.omega);
    EXPECT_EQ(back.ticks[k].command.v_cmd, log.ticks[k].command.v_cmd);
    EXPECT_EQ(back.ticks[k].waypoint, log.ticks[k].waypoint);
    EXPECT_EQ(back.ticks[k].d_e, log.ticks[k].d_e);
  }
  EXPECT_THROW(load_trajectory_log(dir / "missing.csv"), Error);
}

TEST(Evaluation, BudgetAndStartState) {
  const Trajectory t = generate_track(TrackKind::kCircle, {.radius = 10.0, .speed = 4.0});
  const EvalConfig cfg;
  // 2 * (2 pi 10 m) / (4 m/s * 0.05 s) = 628 ticks.
  EXPECT_NEAR(evaluation_step_budget(t, cfg), 2.0 * t.length() / (4.0 * 0.05), 1.0);
  const Trajectory s = straight();
  EXPECT_EQ(evaluation_step_budget(s, {.min_steps = 500}), 500);
  const VehicleState st = start_state(t);
  EXPECT_EQ(st.x, t[0].x);
  EXPECT_EQ(st.phi, t[0].theta);
  EXPECT_EQ(st.v, 0.0);
}

TEST(Evaluation, ScriptedControllerIsLoggedPerTick) {
  auto t = std::make_shared<Trajectory>(straight());
  const Controller drive = [](const Observation&, const TrackingEnv&) { return Action{2.0, 0.0}; };
  const TrajectoryLog log = run_controller(drive, t, {}, 1);
  ASSERT_FALSE(log.ticks.empty());
  const Metrics m = compute_metrics(log, *t);
  EXPECT_TRUE(m.completed);
  EXPECT_LT(m.max_abs_de, 1e-12);
  for (std::size_t k = 1; k < log.ticks.size(); ++k) {
    EXPECT_NEAR(log.ticks[k].t - log.ticks[k - 1].t, 0.05, 1e-12);
    EXPECT_GE(log.ticks[k].waypoint, log.ticks[k - 1].waypoint);
  }
}

}  // namespace
}  // namespace trackrl
