#include "trackrl/env.hpp"

#include <algorithm>
#include <cmath>

namespace trackrl {

Observation observe(const Trajectory& traj, const VehicleState& s,
                    std::size_t i) {
  Observation o{};
  const std::size_t n = traj.size();
  for (std::size_t j = 1; j <= kLookahead; ++j) {
    const auto& w = traj[std::min(i + j, n - 1)];
    const double dx = w.x - s.x;
    const double dy = w.y - s.y;
    const double r = std::hypot(dx, dy);
    double* f = &o[(j - 1) * kFeaturesPerWaypoint];
    f[0] = r;
    f[1] = wrap_angle(w.theta - s.phi);
    f[2] = r < 1e-6 ? 0.0 : wrap_angle(std::atan2(dy, dx) - s.phi);
    f[3] = w.v - s.v;
  }
  return o;
}

TrackingErrors tracking_errors(const Trajectory& traj, const VehicleState& s,
                               std::size_t i) {
  const auto& w = traj[i];
  return {crosstrack_error(traj, s.x, s.y, i), w.v - s.v,
          wrap_angle(w.theta - s.phi)};
}

double reward(const Trajectory& traj, const VehicleState& s, std::size_t i,
              Action a, Action a_prev, const RewardWeights& w) {
  const auto e = tracking_errors(traj, s, i);
  const double tracking = std::abs(e.d_e) * std::abs(e.v_e) * std::abs(e.phi_e);
  return -w.beta1 * tracking - w.beta2 * std::abs(a.v_cmd - a_prev.v_cmd) -
         w.beta3 * std::abs(a.omega_cmd - a_prev.omega_cmd);
}

std::pair<VehicleState, std::size_t> reset_state(const Trajectory& traj,
                                                 const EpisodeConfig& cfg,
                                                 Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, traj.size() - 1);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const std::size_t k = pick(rng);
  const auto& w = traj[k];
  VehicleState s;
  s.x = w.x + cfg.reset_jitter_pos * unit(rng);
  s.y = w.y + cfg.reset_jitter_pos * unit(rng);
  s.phi = wrap_angle(w.theta + cfg.reset_jitter_heading * unit(rng));
  return {s, k};
}

TrackingEnv::TrackingEnv(std::vector<std::shared_ptr<const Trajectory>> tracks,
                         EnvConfig cfg, std::uint64_t seed)
    : tracks_(std::move(tracks)), cfg_(cfg), rng_(seed) {
  if (tracks_.empty()) throw InvalidParams("environment needs a track");
  if (cfg_.episode.max_steps <= 0 || !(cfg_.episode.dt > 0.0)) {
    throw InvalidParams("episode needs max_steps > 0 and dt > 0");
  }
  if (cfg_.surrogate) {
    plant_ = Plant(*cfg_.surrogate, rng_());
  }
}

Observation TrackingEnv::reset() {
  if (tracks_.size() > 1) {
    track_ = std::uniform_int_distribution<std::size_t>(0, tracks_.size() - 1)(
        rng_);
  }
  auto [s, k] = reset_state(*tracks_[track_], cfg_.episode, rng_);
  state_ = s;
  index_ = k;
  prev_action_ = Action{state_.v, state_.omega};
  steps_ = 0;
  done_ = false;
  plant_.reset();
  return observe(*tracks_[track_], state_, index_);
}

Observation TrackingEnv::reset_to(std::size_t track, const VehicleState& s) {
  track_ = std::min(track, tracks_.size() - 1);
  state_ = s;
  index_ = closest_waypoint(*tracks_[track_], s.x, s.y, 0, cfg_.search_window);
  prev_action_ = Action{state_.v, state_.omega};
  steps_ = 0;
  done_ = false;
  plant_.reset();
  return observe(*tracks_[track_], state_, index_);
}

StepResult TrackingEnv::step(Action a) {
  if (done_) throw SteppedAfterDone("step() called on a finished episode");
  const Trajectory& traj = *tracks_[track_];
  a = clamp_action(a);
  state_ = plant_.step(state_, a, cfg_.episode.dt);
  index_ = closest_waypoint(traj, state_.x, state_.y, index_,
                            cfg_.search_window);
  ++steps_;

  StepResult r;
  const auto e = tracking_errors(traj, state_, index_);
  r.reward = reward(traj, state_, index_, a, prev_action_, cfg_.weights);
  r.obs = observe(traj, state_, index_);
  r.info.d_e = e.d_e;
  r.info.v_e = e.v_e;
  r.info.phi_e = e.phi_e;
  r.info.i = index_;
  r.info.diverged = std::abs(e.d_e) > cfg_.divergence_cutoff;
  r.info.reached_end = index_ == traj.size() - 1;
  r.info.truncated = steps_ >= cfg_.episode.max_steps;
  r.done = r.info.diverged || r.info.reached_end || r.info.truncated;
  prev_action_ = a;
  done_ = r.done;
  return r;
}

}  // namespace trackrl
