#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "trackrl/env.hpp"
#include "trackrl/net.hpp"

namespace trackrl {

struct PPOConfig {
  int steps_per_iter = 4096;
  int minibatch_size = 256;
  int epochs_per_iter = 10;
  double clip_eps = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  double lr = 3e-4;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  int total_iters = 500;
  int num_envs = 8;
  // Adam and update details.
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_grad_norm = 0.5;  // <= 0 disables clipping
  double init_log_std = -0.5;
  bool anneal_lr = false;  // linear decay to 0 over total_iters
  // Episodes that end by divergence are treated as terminal (zero
  // bootstrap); time-limit and end-of-track endings bootstrap from V.
  bool bootstrap_on_divergence = false;

  void validate() const;
};

struct Transition {
  Observation obs{};
  Action action;
  Eigen::Vector2d pre_sample = Eigen::Vector2d::Zero();
  double log_prob = 0.0;
  double reward = 0.0;
  double value = 0.0;
  bool done = false;
  // Value of the successor state used for bootstrapping: V(s_{t+1}) inside
  // an episode, 0 after a terminal step, V(s_next) after a truncation.
  double next_value = 0.0;
  // True when the GAE recursion must stop after this step (episode ended or
  // the env's slice of the buffer ends).
  bool boundary = false;
  double abs_de = 0.0;
};

struct RolloutBuffer {
  std::vector<Transition> steps;
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<double> episode_returns;  // episodes that finished in this batch

  std::size_t size() const { return steps.size(); }
};

// A batch of independently seeded environments plus the state needed to
// continue their episodes across collection calls.
class VecEnv {
 public:
  VecEnv(std::vector<std::shared_ptr<const Trajectory>> tracks,
         const EnvConfig& cfg, int num_envs, std::uint64_t seed);

  std::size_t size() const { return slots_.size(); }

  struct Slot {
    TrackingEnv env;
    Rng policy_rng;
    Observation obs{};
    double episode_return = 0.0;
  };

  Slot& slot(std::size_t k) { return slots_[k]; }
  std::vector<Slot>& slots() { return slots_; }

 private:
  std::vector<Slot> slots_;
};

// Runs `steps` transitions in env k's slice of the buffer.
void collect_env_slice(const PolicyNet& policy, VecEnv::Slot& slot,
                       int steps, const PPOConfig& cfg,
                       std::vector<Transition>& out,
                       std::vector<double>& finished_returns);

// Number of steps each env contributes so the total is exactly `steps`.
std::vector<int> split_steps(int steps, std::size_t num_envs);

// Fills advantages (raw, unnormalized) and returns = advantages + values.
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda);

// Advantages shifted/scaled to mean 0, std 1 (left unchanged if std == 0).
std::vector<double> normalized_advantages(const std::vector<double>& adv);

class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, double beta1, double beta2, double eps);

  // Descent step on params[0, grad.size()).
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, double lr);
  long steps() const { return t_; }

 private:
  Eigen::VectorXd m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

struct LossStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};

struct LossGradient {
  LossStats stats;
  double total_loss = 0.0;  // -clip objective + c_v * value loss - c_e * H
  Eigen::VectorXd grad;     // flat, PolicyNet layout
};

// Minimized objective on one minibatch and its exact gradient.
LossGradient ppo_loss_gradient(const PolicyNet& policy,
                               const RolloutBuffer& buffer,
                               std::span<const std::size_t> indices,
                               std::span<const double> advantages,
                               const PPOConfig& cfg);

struct UpdateStats {
  LossStats loss;
  int minibatches = 0;
};

// One PPO update; lr <= 0 means cfg.lr.
UpdateStats ppo_update(PolicyNet& policy, Adam& adam,
                       const RolloutBuffer& buffer, const PPOConfig& cfg,
                       Rng& rng, double lr = -1.0);

struct IterationMetrics {
  int iter = 0;
  long steps = 0;
  double mean_reward = 0.0;
  double mean_abs_de = 0.0;
  LossStats loss;
};

using IterationCallback =
    std::function<void(const IterationMetrics&, const PolicyNet&)>;

struct TrainResult {
  PolicyNet policy;
  std::vector<IterationMetrics> metrics;
};

TrainResult train(const PPOConfig& cfg, const EnvConfig& env_cfg,
                  std::vector<std::shared_ptr<const Trajectory>> tracks,
                  std::uint64_t seed, const IterationCallback& on_iter = {});

}  // namespace trackrl
