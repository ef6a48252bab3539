#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "trackrl/env.hpp"
#include "trackrl/net.hpp"

namespace trackrl {

// One control tick of a tracking run (policy or ILQR).
struct LogTick {
  double t = 0.0;
  VehicleState state;
  Action command;
  std::size_t waypoint = 0;
  double d_e = 0.0;
};

struct TrajectoryLog {
  std::vector<LogTick> ticks;
};

struct Metrics {
  double max_pos_de = 0.0;
  double max_neg_de = 0.0;
  double max_abs_de = 0.0;
  double mean_abs_de = 0.0;
  double mean_vel_err = 0.0;
  bool completed = false;
};

// Recomputes signed d_e for every tick from the logged pose and waypoint
// index. completed means the final tick sits on the last waypoint and the
// run never exceeded the divergence cutoff.
Metrics compute_metrics(const TrajectoryLog& log, const Trajectory& traj,
                        double divergence_cutoff = 4.0);

// CSV header: t,x,y,phi,v,omega,v_cmd,omega_cmd,waypoint,de
void save_trajectory_log(const TrajectoryLog& log,
                         const std::filesystem::path& path);
TrajectoryLog load_trajectory_log(const std::filesystem::path& path);

struct EvalConfig {
  EnvConfig env;
  // Tick budget is max(min_steps, slack * track length / (speed * dt)).
  double step_slack = 2.0;
  int min_steps = 200;
};

int evaluation_step_budget(const Trajectory& traj, const EvalConfig& cfg);

// Vehicle at rest on waypoint 0 with the waypoint heading.
VehicleState start_state(const Trajectory& traj);

using Controller = std::function<Action(const Observation&, const TrackingEnv&)>;

// Runs a controller from start_state until the last waypoint, divergence or
// the step budget; the plant noise stream is seeded by `noise_seed`.
TrajectoryLog run_controller(const Controller& controller,
                             std::shared_ptr<const Trajectory> traj,
                             const EvalConfig& cfg, std::uint64_t noise_seed);

// Deterministic (mean-action) policy rollout.
TrajectoryLog evaluate_policy(const PolicyNet& policy,
                              std::shared_ptr<const Trajectory> traj,
                              const EvalConfig& cfg, std::uint64_t noise_seed);

}  // namespace trackrl
