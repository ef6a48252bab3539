#include "trackrl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

namespace trackrl {

Metrics compute_metrics(const TrajectoryLog& log, const Trajectory& traj,
                        double divergence_cutoff) {
  if (log.ticks.empty()) throw EmptyLog("trajectory log has no ticks");
  Metrics m;
  double abs_sum = 0.0;
  double vel_sum = 0.0;
  for (const auto& tick : log.ticks) {
    const std::size_t i = std::min(tick.waypoint, traj.size() - 1);
    const double de = crosstrack_error(traj, tick.state.x, tick.state.y, i);
    m.max_pos_de = std::max(m.max_pos_de, de);
    m.max_neg_de = std::min(m.max_neg_de, de);
    abs_sum += std::abs(de);
    vel_sum += std::abs(traj[i].v - tick.state.v);
  }
  const double n = static_cast<double>(log.ticks.size());
  m.max_abs_de = std::max(m.max_pos_de, -m.max_neg_de);
  m.mean_abs_de = abs_sum / n;
  m.mean_vel_err = vel_sum / n;
  m.completed = log.ticks.back().waypoint == traj.size() - 1 &&
                m.max_abs_de <= divergence_cutoff;
  return m;
}

void save_trajectory_log(const TrajectoryLog& log,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write trajectory log " + path.string());
  out << std::setprecision(17);
  out << "t,x,y,phi,v,omega,v_cmd,omega_cmd,waypoint,de\n";
  for (const auto& k : log.ticks) {
    out << k.t << ',' << k.state.x << ',' << k.state.y << ',' << k.state.phi
        << ',' << k.state.v << ',' << k.state.omega << ',' << k.command.v_cmd
        << ',' << k.command.omega_cmd << ',' << k.waypoint << ',' << k.d_e
        << '\n';
  }
}

TrajectoryLog load_trajectory_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("trajectory log not found: " + path.string());
  TrajectoryLog log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    double f[10];
    int count = 0;
    while (std::getline(ss, field, ',') && count < 10) {
      try {
        f[count++] = std::stod(field);
      } catch (const std::exception&) {
        throw MalformedRecord(path.string() + ": line " +
                              std::to_string(line_no) + " is not numeric");
      }
    }
    if (count != 10) {
      throw MalformedRecord(path.string() + ": line " + std::to_string(line_no) +
                            " needs 10 fields");
    }
    LogTick k;
    k.t = f[0];
    k.state = {f[1], f[2], f[3], f[4], f[5]};
    k.command = {f[6], f[7]};
    k.waypoint = static_cast<std::size_t>(f[8]);
    k.d_e = f[9];
    log.ticks.push_back(k);
  }
  return log;
}

int evaluation_step_budget(const Trajectory& traj, const EvalConfig& cfg) {
  double speed = 0.0;
  for (const auto& w : traj.waypoints()) speed += w.v;
  speed = std::max(speed / static_cast<double>(traj.size()), 0.5);
  const double nominal = traj.length() / (speed * cfg.env.episode.dt);
  return std::max(cfg.min_steps, static_cast<int>(std::ceil(cfg.step_slack * nominal)));
}

VehicleState start_state(const Trajectory& traj) {
  VehicleState s;
  s.x = traj[0].x;
  s.y = traj[0].y;
  s.phi = traj[0].theta;
  return s;
}

TrajectoryLog run_controller(const Controller& controller,
                             std::shared_ptr<const Trajectory> traj,
                             const EvalConfig& cfg, std::uint64_t noise_seed) {
  EnvConfig env_cfg = cfg.env;
  env_cfg.episode.max_steps = evaluation_step_budget(*traj, cfg);
  TrackingEnv env({traj}, env_cfg, noise_seed);
  Observation obs = env.reset_to(0, start_state(*traj));

  TrajectoryLog log;
  log.ticks.push_back({0.0, env.state(), Action{}, env.waypoint_index(),
                       crosstrack_error(*traj, env.state().x, env.state().y,
                                        env.waypoint_index())});
  while (!env.done()) {
    const Action a = clamp_action(controller(obs, env));
    const StepResult r = env.step(a);
    obs = r.obs;
    log.ticks.push_back({env.steps() * env_cfg.episode.dt, env.state(), a,
                         r.info.i, r.info.d_e});
  }
  return log;
}

TrajectoryLog evaluate_policy(const PolicyNet& policy,
                              std::shared_ptr<const Trajectory> traj,
                              const EvalConfig& cfg, std::uint64_t noise_seed) {
  return run_controller(
      [&policy](const Observation& o, const TrackingEnv&) {
        return forward(policy, o).mean;
      },
      std::move(traj), cfg, noise_seed);
}

}  // namespace trackrl
