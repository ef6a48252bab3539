#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "trackrl/metrics.hpp"

namespace trackrl {

struct ILQRConfig {
  int horizon = 40;
  double dt = kDefaultDt;
  Eigen::Vector3d state_cost{10.0, 10.0, 1.0};     // x, y, phi deviation
  Eigen::Vector2d control_cost{0.1, 0.1};          // v, omega deviation
  Eigen::Vector3d terminal_cost{100.0, 100.0, 10.0};
  int max_iters = 50;
  double reg_init = 1e-3;
  double reg_max = 1e10;
  double tol = 1e-6;  // absolute cost change that ends the iteration

  void validate() const;
};

struct RefPoint {
  double x = 0.0;
  double y = 0.0;
  double phi = 0.0;
  double v = 0.0;
};

struct Linearization {
  Eigen::Matrix3d A;
  Eigen::Matrix<double, 3, 2> B;
};

// Jacobians of the Euler unicycle step w.r.t. (x, y, phi) and
// (v_cmd, omega_cmd), evaluated at the command (no clamping).
Linearization linearize(const VehicleState& s, Action a, double dt);

// Unclamped Euler unicycle step on the pose (x, y, phi).
Eigen::Vector3d unicycle_step(const Eigen::Vector3d& x, Action a, double dt);

struct ILQRResult {
  std::vector<Action> actions;         // horizon
  std::vector<Eigen::Vector3d> states; // horizon + 1, states[0] = start pose
  double cost = 0.0;
  std::vector<double> cost_history;    // accepted iterates, first = initial
  int iterations = 0;
  bool no_descent = false;  // regularization exhausted before convergence
};

// Tracking cost of a control sequence: states 1..H-1 against ref[0..H-2]
// with state_cost, state H against ref[H-1] with terminal_cost, controls
// against (ref.v, 0) with control_cost. Heading deviations are wrapped.
double ilqr_cost(const Eigen::Vector3d& x0, const std::vector<Action>& u,
                 const std::vector<RefPoint>& ref, const ILQRConfig& cfg);

// Commands are clamped to the actuation box during rollouts. `init` seeds
// the control sequence (default: reference speed and heading rate).
ILQRResult ilqr_solve(const VehicleState& s0, const std::vector<RefPoint>& ref,
                      const ILQRConfig& cfg,
                      const std::vector<Action>* init = nullptr);

// Reference points 1..horizon ahead of the projection of (x, y) onto the
// segment at waypoint i, spaced by waypoint speed * dt along the track.
std::vector<RefPoint> reference_window(const Trajectory& traj, double x,
                                       double y, std::size_t i,
                                       const ILQRConfig& cfg);

struct TrackRun {
  TrajectoryLog log;
  Metrics metrics;
};

// Receding-horizon tracking: at each tick solve on the kinematic model,
// apply the first command to the plant (kinematic or surrogate), warm-start
// the next solve with the shifted sequence.
TrackRun ilqr_track(std::shared_ptr<const Trajectory> traj,
                    const std::optional<SurrogateParams>& plant,
                    const ILQRConfig& cfg, const EvalConfig& eval,
                    std::uint64_t noise_seed);

}  // namespace trackrl
