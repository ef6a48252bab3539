#include "trackrl/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace trackrl {
namespace {

constexpr double kHalfLog2PiE = 1.4189385332046727418;  // 0.5 * log(2 pi e)

RolloutBuffer merge_slices(std::vector<std::vector<Transition>>& slices,
                           std::vector<std::vector<double>>& returns) {
  RolloutBuffer buffer;
  std::size_t total = 0;
  for (const auto& s : slices) total += s.size();
  buffer.steps.reserve(total);
  for (std::size_t k = 0; k < slices.size(); ++k) {
    buffer.steps.insert(buffer.steps.end(), slices[k].begin(), slices[k].end());
    buffer.episode_returns.insert(buffer.episode_returns.end(),
                                  returns[k].begin(), returns[k].end());
  }
  return buffer;
}

}  // namespace

RolloutBuffer collect_rollouts(const PolicyNet& policy, VecEnv& envs, int steps,
                               const PPOConfig& cfg) {
  const std::vector<int> share = split_steps(steps, envs.size());
  const int n = static_cast<int>(envs.size());
  std::vector<std::vector<Transition>> slices(envs.size());
  std::vector<std::vector<double>> returns(envs.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (int k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    slices[i].reserve(static_cast<std::size_t>(share[i]));
    collect_env_slice(policy, envs.slot(i), share[i], cfg, slices[i],
                      returns[i]);
  }
  return merge_slices(slices, returns);
}

RolloutBuffer collect_rollouts_serial(const PolicyNet& policy, VecEnv& envs,
                                      int steps, const PPOConfig& cfg) {
  const std::vector<int> share = split_steps(steps, envs.size());
  std::vector<std::vector<Transition>> slices(envs.size());
  std::vector<std::vector<double>> returns(envs.size());
  for (std::size_t i = 0; i < envs.size(); ++i) {
    collect_env_slice(policy, envs.slot(i), share[i], cfg, slices[i],
                      returns[i]);
  }
  return merge_slices(slices, returns);
}

PPOPartial ppo_partial_sums(const PolicyNet& policy, const RolloutBuffer& buffer,
                            std::span<const std::size_t> indices,
                            std::span<const double> advantages,
                            const PPOConfig& cfg, double scale) {
  const std::size_t batch = indices.size();
  if (scale < 0.0) scale = 1.0 / static_cast<double>(batch);
  std::vector<Observation> obs(batch);
  for (std::size_t b = 0; b < batch; ++b) obs[b] = buffer.steps[indices[b]].obs;
  const BatchForward fwd = forward_batch(policy, obs);
  const Eigen::Vector2d log_std = policy.clamped_log_std();
  const Eigen::Vector2d inv_var = (-2.0 * log_std).array().exp();

  const auto cols = static_cast<Eigen::Index>(batch);
  OutputGradients up;
  up.d_mean_pre = Eigen::MatrixXd::Zero(2, cols);
  up.d_value = Eigen::RowVectorXd::Zero(cols);

  PPOPartial part;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto c = static_cast<Eigen::Index>(b);
    const Transition& tr = buffer.steps[indices[b]];
    const double adv = advantages[indices[b]];
    const double ret = buffer.returns[indices[b]];
    const Eigen::Vector2d mean_pre = fwd.mean_pre.col(c);
    const double logp = squashed_log_prob(mean_pre, log_std, tr.pre_sample);
    const double ratio = std::exp(logp - tr.log_prob);
    const double clipped_ratio =
        std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    const double surr1 = ratio * adv;
    const double surr2 = clipped_ratio * adv;
    part.objective += std::min(surr1, surr2) * scale;
    if (std::abs(ratio - 1.0) > cfg.clip_eps) part.clipped += scale;

    // d(-objective)/d(logp) for this sample.
    const double g = surr1 <= surr2 ? -ratio * adv * scale : 0.0;
    const Eigen::Vector2d diff = tr.pre_sample - mean_pre;
    up.d_mean_pre.col(c) = g * diff.cwiseProduct(inv_var);
    up.d_log_std += g * (diff.cwiseProduct(diff).cwiseProduct(inv_var).array() - 1.0)
                            .matrix();

    const double verr = fwd.value[c] - ret;
    part.value_loss += verr * verr * scale;
    up.d_value[c] = cfg.value_coef * 2.0 * verr * scale;
  }
  part.grad = backward_batch(policy, fwd, up).flatten();
  return part;
}

LossGradient finish_ppo_gradient(const PolicyNet& policy, PPOPartial part,
                                 std::size_t /*batch*/, const PPOConfig& cfg) {
  LossGradient out;
  const Eigen::Vector2d log_std = policy.clamped_log_std();
  const double entropy = log_std.sum() + 2.0 * kHalfLog2PiE;
  const Eigen::Index n = part.grad.size();
  for (int k = 0; k < 2; ++k) {
    const bool inside =
        policy.log_std[k] >= kLogStdMin && policy.log_std[k] <= kLogStdMax;
    if (inside) part.grad[n - 2 + k] -= cfg.entropy_coef;
  }
  out.stats.policy_loss = -part.objective;
  out.stats.value_loss = part.value_loss;
  out.stats.entropy = entropy;
  out.stats.clip_fraction = part.clipped;
  out.total_loss =
      -part.objective + cfg.value_coef * part.value_loss - cfg.entropy_coef * entropy;
  out.grad = std::move(part.grad);
  return out;
}

LossGradient ppo_loss_gradient_chunked(const PolicyNet& policy,
                                       const RolloutBuffer& buffer,
                                       std::span<const std::size_t> indices,
                                       std::span<const double> advantages,
                                       const PPOConfig& cfg) {
  const std::size_t batch = indices.size();
  const double scale = 1.0 / static_cast<double>(batch);
  const std::size_t chunks = (batch + kGradientChunk - 1) / kGradientChunk;
  std::vector<PPOPartial> parts(chunks);
#pragma omp parallel for schedule(static, 1)
  for (int c = 0; c < static_cast<int>(chunks); ++c) {
    const std::size_t start = static_cast<std::size_t>(c) * kGradientChunk;
    const std::size_t len = std::min(kGradientChunk, batch - start);
    parts[static_cast<std::size_t>(c)] = ppo_partial_sums(
        policy, buffer, indices.subspan(start, len), advantages, cfg, scale);
  }
  PPOPartial total = std::move(parts[0]);
  for (std::size_t c = 1; c < chunks; ++c) {
    total.objective += parts[c].objective;
    total.value_loss += parts[c].value_loss;
    total.clipped += parts[c].clipped;
    total.grad += parts[c].grad;
  }
  return finish_ppo_gradient(policy, std::move(total), batch, cfg);
}

}  // namespace trackrl
