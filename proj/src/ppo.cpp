#include "trackrl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trackrl/kernels.hpp"

namespace trackrl {

void PPOConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InvalidParams("gamma must be in (0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidParams("lambda must be in [0, 1]");
  if (!(clip_eps > 0.0)) throw InvalidParams("clip_eps must be > 0");
  if (steps_per_iter <= 0 || minibatch_size <= 0 || epochs_per_iter < 0 ||
      num_envs <= 0 || total_iters < 0) {
    throw InvalidParams("PPO step/batch/epoch counts must be positive");
  }
  if (!(lr > 0.0)) throw InvalidParams("learning rate must be > 0");
}

VecEnv::VecEnv(std::vector<std::shared_ptr<const Trajectory>> tracks,
               const EnvConfig& cfg, int num_envs, std::uint64_t seed) {
  if (num_envs <= 0) throw InvalidParams("need at least one environment");
  Rng seeder(seed);
  slots_.reserve(static_cast<std::size_t>(num_envs));
  for (int k = 0; k < num_envs; ++k) {
    const std::uint64_t env_seed = seeder();
    const std::uint64_t policy_seed = seeder();
    slots_.push_back(Slot{TrackingEnv(tracks, cfg, env_seed), Rng(policy_seed),
                          Observation{}, 0.0});
    slots_.back().obs = slots_.back().env.reset();
  }
}

std::vector<int> split_steps(int steps, std::size_t num_envs) {
  std::vector<int> out(num_envs, steps / static_cast<int>(num_envs));
  for (int k = 0; k < steps % static_cast<int>(num_envs); ++k) ++out[static_cast<std::size_t>(k)];
  return out;
}

void collect_env_slice(const PolicyNet& policy, VecEnv::Slot& slot, int steps,
                       const PPOConfig& cfg, std::vector<Transition>& out,
                       std::vector<double>& finished_returns) {
  const std::size_t first = out.size();
  for (int t = 0; t < steps; ++t) {
    const PolicyOutput po = forward(policy, slot.obs);
    const SampledAction s = sample_from(po, slot.policy_rng);
    Transition tr;
    tr.obs = slot.obs;
    tr.action = s.action;
    tr.pre_sample = s.pre_sample;
    tr.log_prob = s.log_prob;
    tr.value = po.value;

    const StepResult r = slot.env.step(s.action);
    tr.reward = r.reward;
    tr.done = r.done;
    tr.abs_de = std::abs(r.info.d_e);
    slot.episode_return += r.reward;

    if (r.done) {
      const bool terminal = r.info.diverged && !cfg.bootstrap_on_divergence;
      tr.next_value = terminal ? 0.0 : forward(policy, r.obs).value;
      tr.boundary = true;
      finished_returns.push_back(slot.episode_return);
      slot.episode_return = 0.0;
      slot.obs = slot.env.reset();
    } else {
      slot.obs = r.obs;
    }
    out.push_back(tr);
  }
  // Link successor values inside the slice; bootstrap at the slice end.
  for (std::size_t k = first; k < out.size(); ++k) {
    if (out[k].boundary) continue;
    if (k + 1 < out.size()) {
      out[k].next_value = out[k + 1].value;
    }
  }
  if (out.size() > first && !out.back().boundary) {
    out.back().next_value = forward(policy, slot.obs).value;
    out.back().boundary = true;
  }
}

void compute_gae(RolloutBuffer& buffer, double gamma, double lambda) {
  const std::size_t n = buffer.steps.size();
  buffer.advantages.assign(n, 0.0);
  buffer.returns.assign(n, 0.0);
  double running = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const auto& tr = buffer.steps[k];
    const double delta = tr.reward + gamma * tr.next_value - tr.value;
    if (tr.boundary) running = 0.0;
    running = delta + gamma * lambda * running;
    buffer.advantages[k] = running;
    buffer.returns[k] = running + tr.value;
  }
}

std::vector<double> normalized_advantages(const std::vector<double>& adv) {
  if (adv.empty()) return {};
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(adv.size());
  for (std::size_t k = 0; k < adv.size(); ++k) {
    out[k] = sd > 1e-12 ? (adv[k] - mean) / (sd + 1e-8) : adv[k] - mean;
  }
  return out;
}

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad,
                double lr) {
  const Eigen::Index n = grad.size();
  ++t_;
  m_.head(n) = beta1_ * m_.head(n) + (1.0 - beta1_) * grad;
  v_.head(n) = beta2_ * v_.head(n) + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.head(n).array() -=
      lr * (m_.head(n).array() / c1) / ((v_.head(n).array() / c2).sqrt() + eps_);
}

LossGradient ppo_loss_gradient(const PolicyNet& policy,
                               const RolloutBuffer& buffer,
                               std::span<const std::size_t> indices,
                               std::span<const double> advantages,
                               const PPOConfig& cfg) {
  PPOPartial part = ppo_partial_sums(policy, buffer, indices, advantages, cfg);
  return finish_ppo_gradient(policy, part, indices.size(), cfg);
}

UpdateStats ppo_update(PolicyNet& policy, Adam& adam,
                       const RolloutBuffer& buffer, const PPOConfig& cfg,
                       Rng& rng, double lr) {
  if (lr <= 0.0) lr = cfg.lr;
  const std::vector<double> adv = normalized_advantages(buffer.advantages);
  std::vector<std::size_t> order(buffer.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  UpdateStats stats;
  Eigen::VectorXd params = policy.flatten();
  const auto mb = static_cast<std::size_t>(cfg.minibatch_size);
  for (int epoch = 0; epoch < cfg.epochs_per_iter; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += mb) {
      const std::size_t len = std::min(mb, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      LossGradient lg = ppo_loss_gradient_chunked(policy, buffer, idx, adv, cfg);
      if (!std::isfinite(lg.total_loss) || !lg.grad.allFinite()) {
        throw NonFiniteLoss("PPO loss became non-finite (policy_loss=" +
                            std::to_string(lg.stats.policy_loss) +
                            ", value_loss=" +
                            std::to_string(lg.stats.value_loss) + ")");
      }
      if (cfg.max_grad_norm > 0.0) {
        const double norm = lg.grad.norm();
        if (norm > cfg.max_grad_norm) lg.grad *= cfg.max_grad_norm / norm;
      }
      adam.step(params, lg.grad, lr);
      policy.assign(params);
      stats.loss.policy_loss += lg.stats.policy_loss;
      stats.loss.value_loss += lg.stats.value_loss;
      stats.loss.entropy += lg.stats.entropy;
      stats.loss.clip_fraction += lg.stats.clip_fraction;
      ++stats.minibatches;
    }
  }
  if (stats.minibatches > 0) {
    const double n = stats.minibatches;
    stats.loss.policy_loss /= n;
    stats.loss.value_loss /= n;
    stats.loss.entropy /= n;
    stats.loss.clip_fraction /= n;
  }
  return stats;
}

TrainResult train(const PPOConfig& cfg, const EnvConfig& env_cfg,
                  std::vector<std::shared_ptr<const Trajectory>> tracks,
                  std::uint64_t seed, const IterationCallback& on_iter) {
  cfg.validate();
  Rng master(seed);
  Rng init_rng(master());
  Rng update_rng(master());
  const std::uint64_t env_seed = master();

  TrainResult result{PolicyNet::random(init_rng, cfg.init_log_std), {}};
  if (cfg.total_iters == 0) return result;

  PolicyNet& policy = result.policy;
  VecEnv envs(std::move(tracks), env_cfg, cfg.num_envs, env_seed);
  Adam adam(policy.parameter_count(), cfg.adam_beta1, cfg.adam_beta2,
            cfg.adam_eps);

  long total_steps = 0;
  int consecutive_failures = 0;
  for (int it = 0; it < cfg.total_iters; ++it) {
    RolloutBuffer buffer = collect_rollouts(policy, envs, cfg.steps_per_iter, cfg);
    compute_gae(buffer, cfg.gamma, cfg.lambda);
    total_steps += static_cast<long>(buffer.size());

    IterationMetrics m;
    m.iter = it + 1;
    m.steps = total_steps;
    double de_sum = 0.0;
    for (const auto& tr : buffer.steps) de_sum += tr.abs_de;
    m.mean_abs_de = de_sum / static_cast<double>(buffer.size());
    if (!buffer.episode_returns.empty()) {
      m.mean_reward = std::accumulate(buffer.episode_returns.begin(),
                                      buffer.episode_returns.end(), 0.0) /
                      static_cast<double>(buffer.episode_returns.size());
    } else {
      double partial = 0.0;
      for (auto& slot : envs.slots()) partial += slot.episode_return;
      m.mean_reward = partial / static_cast<double>(envs.size());
    }

    const PolicyNet snapshot = policy;
    const Adam adam_snapshot = adam;
    try {
      const double lr =
          cfg.anneal_lr
              ? cfg.lr * (1.0 - static_cast<double>(it) / cfg.total_iters)
              : cfg.lr;
      m.loss = ppo_update(policy, adam, buffer, cfg, update_rng, lr).loss;
      consecutive_failures = 0;
    } catch (const NonFiniteLoss&) {
      policy = snapshot;
      adam = adam_snapshot;
      if (++consecutive_failures >= 3) throw;
    }
    if (!std::isfinite(m.mean_reward)) {
      throw NonFiniteLoss("mean episode reward is not finite at iteration " +
                          std::to_string(m.iter));
    }
    result.metrics.push_back(m);
    if (on_iter) on_iter(m, policy);
  }
  return result;
}

}  // namespace trackrl
