#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "trackrl/trajectory.hpp"
#include "trackrl/vehicle.hpp"

namespace trackrl {

inline constexpr std::size_t kLookahead = 10;
inline constexpr std::size_t kFeaturesPerWaypoint = 4;
inline constexpr std::size_t kObsDim = kLookahead * kFeaturesPerWaypoint;

// For j = 1..10 the tuple (range, waypoint heading - phi, bearing - phi,
// waypoint speed - v) of waypoint min(i + j, n - 1), flattened.
using Observation = std::array<double, kObsDim>;

struct RewardWeights {
  double beta1 = 1.0;  // crosstrack * velocity * heading product
  double beta2 = 1.0;  // linear command change
  double beta3 = 0.5;  // angular command change
};

struct EpisodeConfig {
  int max_steps = 200;
  double dt = kDefaultDt;
  double reset_jitter_pos = 0.5;
  double reset_jitter_heading = 0.2;
};

struct EnvConfig {
  RewardWeights weights;
  EpisodeConfig episode;
  double divergence_cutoff = 4.0;
  std::size_t search_window = kDefaultSearchWindow;
  // Plant; kinematic when empty.
  std::optional<SurrogateParams> surrogate;
};

Observation observe(const Trajectory& traj, const VehicleState& s,
                    std::size_t i);

struct TrackingErrors {
  double d_e = 0.0;    // signed crosstrack error
  double v_e = 0.0;    // waypoint speed - realized speed
  double phi_e = 0.0;  // wrap(waypoint heading - phi)
};

TrackingErrors tracking_errors(const Trajectory& traj, const VehicleState& s,
                               std::size_t i);

// -b1 |d_e||v_e||phi_e| - b2 |dv_cmd| - b3 |domega_cmd|, always <= 0.
double reward(const Trajectory& traj, const VehicleState& s, std::size_t i,
              Action a, Action a_prev, const RewardWeights& w);

// Uniform waypoint, uniform jitter in position and heading, at rest.
std::pair<VehicleState, std::size_t> reset_state(const Trajectory& traj,
                                                 const EpisodeConfig& cfg,
                                                 Rng& rng);

struct StepInfo {
  double d_e = 0.0;
  double v_e = 0.0;
  double phi_e = 0.0;
  std::size_t i = 0;
  bool diverged = false;     // |d_e| exceeded the cutoff
  bool reached_end = false;  // closest waypoint is the last one
  bool truncated = false;    // step budget exhausted
};

struct StepResult {
  Observation obs{};
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

// Gym-style tracking environment over one or more tracks (one is drawn per
// episode). Single-owner; independent instances share nothing mutable.
class TrackingEnv {
 public:
  TrackingEnv(std::vector<std::shared_ptr<const Trajectory>> tracks,
              EnvConfig cfg, std::uint64_t seed);

  Observation reset();
  // Deterministic start for evaluation rollouts.
  Observation reset_to(std::size_t track, const VehicleState& s);
  StepResult step(Action a);

  const VehicleState& state() const { return state_; }
  std::size_t waypoint_index() const { return index_; }
  const Trajectory& track() const { return *tracks_[track_]; }
  const EnvConfig& config() const { return cfg_; }
  bool done() const { return done_; }
  int steps() const { return steps_; }

 private:
  std::vector<std::shared_ptr<const Trajectory>> tracks_;
  EnvConfig cfg_;
  Rng rng_;
  Plant plant_;
  std::size_t track_ = 0;
  VehicleState state_;
  std::size_t index_ = 0;
  Action prev_action_;
  int steps_ = 0;
  bool done_ = true;
};

}  // namespace trackrl
