#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <random>
#include <string_view>

#include "trackrl/common.hpp"

namespace trackrl {

using Rng = std::mt19937_64;

inline constexpr double kMaxLinearVelocity = 5.0;
inline constexpr double kMaxAngularVelocity = 2.0;
inline constexpr double kDefaultDt = 0.05;

struct VehicleState {
  double x = 0.0;
  double y = 0.0;
  double phi = 0.0;    // heading, (-pi, pi]
  double v = 0.0;      // realized linear velocity
  double omega = 0.0;  // realized angular velocity
};

struct Action {
  double v_cmd = 0.0;
  double omega_cmd = 0.0;
};

// Clamps a command into [0, 5] x [-2, 2].
Action clamp_action(Action a);

// Ideal unicycle Euler step; commands take effect instantly.
VehicleState step_kinematic(const VehicleState& s, Action a, double dt);

// Hidden dynamics of the surrogate "real" vehicle.
struct SurrogateParams {
  double gain_v = 1.0;
  double gain_w = 1.0;
  double tau_v = kDefaultDt;
  double tau_w = kDefaultDt;
  int delay_steps = 0;
  double slip_gain = 0.0;
  double noise_std_v = 0.0;
  double noise_std_w = 0.0;

  void validate() const;
};

// Surrogate that reproduces step_kinematic exactly at the given dt.
SurrogateParams identity_surrogate(double dt = kDefaultDt);

// "warthog-like", "moose-like" or "identity".
SurrogateParams surrogate_preset(std::string_view name);
SurrogateParams load_surrogate_params(const std::filesystem::path& path);

// Dead-time buffer: holds the last delay_steps commands, oldest first.
class CommandQueue {
 public:
  CommandQueue() = default;
  explicit CommandQueue(int delay_steps) { reset(delay_steps); }

  void reset(int delay_steps);
  std::size_t size() const { return pending_.size(); }

  // Enqueues `a` and returns the command that is due now.
  Action push(Action a);

 private:
  std::deque<Action> pending_;
};

// One control tick of the surrogate. The applied command is the one queued
// delay_steps ticks ago plus Gaussian noise; realized velocities follow a
// first-order lag toward gain * command; the pose integrates the new
// velocities and is displaced outward by slip_gain * v * omega * dt.
VehicleState step_surrogate(const VehicleState& s, const SurrogateParams& hidden,
                            CommandQueue& queue, Action a, double dt, Rng& rng);

// Owns whichever plant an episode runs on. Kinematic when constructed
// without surrogate parameters.
class Plant {
 public:
  Plant() = default;
  Plant(SurrogateParams params, std::uint64_t noise_seed);

  bool is_surrogate() const { return params_.has_value(); }
  const std::optional<SurrogateParams>& params() const { return params_; }

  // Clears the dead-time queue (zero commands) before a new episode.
  void reset();
  VehicleState step(const VehicleState& s, Action a, double dt);

 private:
  std::optional<SurrogateParams> params_;
  CommandQueue queue_;
  Rng rng_;
};

}  // namespace trackrl
