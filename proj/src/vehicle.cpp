#include "trackrl/vehicle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"

namespace trackrl {

Action clamp_action(Action a) {
  return {std::clamp(a.v_cmd, 0.0, kMaxLinearVelocity),
          std::clamp(a.omega_cmd, -kMaxAngularVelocity, kMaxAngularVelocity)};
}

VehicleState step_kinematic(const VehicleState& s, Action a, double dt) {
  a = clamp_action(a);
  VehicleState n;
  n.x = s.x + a.v_cmd * std::cos(s.phi) * dt;
  n.y = s.y + a.v_cmd * std::sin(s.phi) * dt;
  n.phi = wrap_angle(s.phi + a.omega_cmd * dt);
  n.v = a.v_cmd;
  n.omega = a.omega_cmd;
  return n;
}

void SurrogateParams::validate() const {
  if (!(gain_v > 0.0) || !(gain_w > 0.0)) {
    throw InvalidParams("surrogate gains must be > 0");
  }
  if (!(tau_v > 0.0) || !(tau_w > 0.0)) {
    throw InvalidParams("surrogate lags must be > 0");
  }
  if (delay_steps < 0) throw InvalidParams("surrogate delay must be >= 0");
  if (noise_std_v < 0.0 || noise_std_w < 0.0) {
    throw InvalidParams("surrogate noise must be >= 0");
  }
}

SurrogateParams identity_surrogate(double dt) {
  SurrogateParams p;
  p.tau_v = dt;
  p.tau_w = dt;
  return p;
}

// The moose-like vehicle is the heavier one (1590 kg vs 280 kg), so it gets
// the longer lags, more dead time and more slip.
SurrogateParams surrogate_preset(std::string_view name) {
  if (name == "warthog-like") {
    return {.gain_v = 0.9, .gain_w = 0.85, .tau_v = 0.35, .tau_w = 0.25,
            .delay_steps = 2, .slip_gain = 0.03, .noise_std_v = 0.02,
            .noise_std_w = 0.02};
  }
  if (name == "moose-like") {
    return {.gain_v = 0.85, .gain_w = 0.75, .tau_v = 0.6, .tau_w = 0.45,
            .delay_steps = 4, .slip_gain = 0.05, .noise_std_v = 0.03,
            .noise_std_w = 0.03};
  }
  if (name == "identity") return identity_surrogate();
  throw UnknownPreset("unknown surrogate preset '" + std::string(name) + "'");
}

SurrogateParams load_surrogate_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open surrogate file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    SurrogateParams p;
    p.gain_v = j.at("gain_v").get<double>();
    p.gain_w = j.at("gain_w").get<double>();
    p.tau_v = j.at("tau_v").get<double>();
    p.tau_w = j.at("tau_w").get<double>();
    p.delay_steps = j.at("delay_steps").get<int>();
    p.slip_gain = j.at("slip_gain").get<double>();
    p.noise_std_v = j.at("noise_std_v").get<double>();
    p.noise_std_w = j.at("noise_std_w").get<double>();
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidParams("surrogate file " + path.string() + ": " + e.what());
  }
}

void CommandQueue::reset(int delay_steps) {
  pending_.assign(static_cast<std::size_t>(std::max(delay_steps, 0)), Action{});
}

Action CommandQueue::push(Action a) {
  if (pending_.empty()) return a;
  pending_.push_back(a);
  Action due = pending_.front();
  pending_.pop_front();
  return due;
}

VehicleState step_surrogate(const VehicleState& s, const SurrogateParams& p,
                            CommandQueue& queue, Action a, double dt,
                            Rng& rng) {
  const Action applied = queue.push(clamp_action(a));
  double cmd_v = applied.v_cmd;
  double cmd_w = applied.omega_cmd;
  if (p.noise_std_v > 0.0) {
    cmd_v += std::normal_distribution<double>(0.0, p.noise_std_v)(rng);
  }
  if (p.noise_std_w > 0.0) {
    cmd_w += std::normal_distribution<double>(0.0, p.noise_std_w)(rng);
  }

  const double v_limit = 1.5 * p.gain_v * kMaxLinearVelocity;
  const double w_limit = 1.5 * p.gain_w * kMaxAngularVelocity;
  VehicleState n;
  n.v = std::clamp(s.v + (p.gain_v * cmd_v - s.v) * dt / p.tau_v, -v_limit,
                   v_limit);
  n.omega = std::clamp(s.omega + (p.gain_w * cmd_w - s.omega) * dt / p.tau_w,
                       -w_limit, w_limit);

  const double c = std::cos(s.phi);
  const double sn = std::sin(s.phi);
  const double slip = p.slip_gain * n.v * n.omega * dt;
  // Outward (to the right when turning left).
  n.x = s.x + n.v * c * dt + slip * sn;
  n.y = s.y + n.v * sn * dt - slip * c;
  n.phi = wrap_angle(s.phi + n.omega * dt);
  return n;
}

Plant::Plant(SurrogateParams params, std::uint64_t noise_seed)
    : params_(params), rng_(noise_seed) {
  params_->validate();
  queue_.reset(params_->delay_steps);
}

void Plant::reset() {
  if (params_) queue_.reset(params_->delay_steps);
}

VehicleState Plant::step(const VehicleState& s, Action a, double dt) {
  if (!params_) return step_kinematic(s, a, dt);
  return step_surrogate(s, *params_, queue_, a, dt, rng_);
}

}  // namespace trackrl
