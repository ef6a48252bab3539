#pragma once

// Data-parallel kernels. Each OpenMP kernel has a serial reference twin that
// the tests compare it against. Work is split into fixed chunks (per env,
// per minibatch slice, per evaluation task) and partial results are reduced
// in chunk order, so results do not depend on the thread count.

#include <span>
#include <vector>

#include "trackrl/ppo.hpp"

namespace trackrl {

inline constexpr std::size_t kGradientChunk = 64;

// Collects exactly `steps` transitions, env k's slice stored contiguously
// after env k-1's. One OpenMP task per environment.
RolloutBuffer collect_rollouts(const PolicyNet& policy, VecEnv& envs, int steps,
                               const PPOConfig& cfg);
RolloutBuffer collect_rollouts_serial(const PolicyNet& policy, VecEnv& envs,
                                      int steps, const PPOConfig& cfg);

// Partial PPO objective over a slice of a minibatch. `scale` is 1 / B for
// the full minibatch, so partials from different slices simply add.
struct PPOPartial {
  double objective = 0.0;   // sum of min(r A, clip(r) A) * scale
  double value_loss = 0.0;  // sum of (V - R)^2 * scale
  double clipped = 0.0;     // clipped-sample count * scale
  Eigen::VectorXd grad;     // gradient of the minimized loss, flat
};

PPOPartial ppo_partial_sums(const PolicyNet& policy, const RolloutBuffer& buffer,
                            std::span<const std::size_t> indices,
                            std::span<const double> advantages,
                            const PPOConfig& cfg, double scale = -1.0);

// Adds the entropy term and packages stats.
LossGradient finish_ppo_gradient(const PolicyNet& policy, PPOPartial part,
                                 std::size_t batch, const PPOConfig& cfg);

// Chunked OpenMP version of ppo_loss_gradient.
LossGradient ppo_loss_gradient_chunked(const PolicyNet& policy,
                                       const RolloutBuffer& buffer,
                                       std::span<const std::size_t> indices,
                                       std::span<const double> advantages,
                                       const PPOConfig& cfg);

}  // namespace trackrl
