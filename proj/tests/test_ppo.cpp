#include <gtest/gtest.h>

#include <numeric>

#include "test_support.hpp"
#include "trackrl/kernels.hpp"
#include "trackrl/ppo.hpp"

namespace trackrl {
namespace {

std::shared_ptr<const Trajectory> circle() {
  return std::make_shared<Trajectory>(generate_track(TrackKind::kCircle, {}));
}

// Random buffer with random episode boundaries and successor values.
RolloutBuffer random_buffer(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::bernoulli_distribution end(0.15);
  RolloutBuffer b;
  b.steps.resize(n);
  for (auto& tr : b.steps) {
    tr.reward = g(rng);
    tr.value = g(rng);
    tr.boundary = end(rng);
  }
  b.steps.back().boundary = true;
  for (std::size_t k = 0; k < n; ++k) {
    auto& tr = b.steps[k];
    if (!tr.boundary) {
      tr.next_value = b.steps[k + 1].value;
    } else {
      // Terminal (0) or truncated (bootstrap from some V).
      tr.next_value = std::bernoulli_distribution(0.5)(rng) ? 0.0 : g(rng);
    }
  }
  return b;
}

// O(T^2) oracle: A_t = sum_l (gamma lambda)^l delta_{t+l} up to and including
// the first boundary at or after t.
std::vector<double> gae_oracle(const RolloutBuffer& b, double gamma, double lambda) {
  const std::size_t n = b.size();
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double weight = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      const auto& tr = b.steps[k];
      adv[t] += weight * (tr.reward + gamma * tr.next_value - tr.value);
      if (tr.boundary) break;
      weight *= gamma * lambda;
    }
  }
  return adv;
}

TEST(GAE, MatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 64)(rng);
    RolloutBuffer b = random_buffer(rng, n);
    const double gamma = std::uniform_real_distribution<double>(0.8, 1.0)(rng);
    const double lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    compute_gae(b, gamma, lambda);
    const std::vector<double> ref = gae_oracle(b, gamma, lambda);
    for (std::size_t k = 0; k < n; ++k) {
      ASSERT_NEAR(b.advantages[k], ref[k], 1e-10);
      ASSERT_NEAR(b.returns[k], ref[k] + b.steps[k].value, 1e-10);
    }
  }
}

TEST(GAE, LambdaZeroIsTdError) {
  std::mt19937_64 rng(2);
  RolloutBuffer b = random_buffer(rng, 40);
  compute_gae(b, 0.99, 0.0);
  for (std::size_t k = 0; k < b.size(); ++k) {
    const auto& tr = b.steps[k];
    EXPECT_NEAR(b.advantages[k], tr.reward + 0.99 * tr.next_value - tr.value, 1e-14);
  }
}

TEST(GAE, LambdaOneIsMonteCarlo) {
  std::mt19937_64 rng(3);
  RolloutBuffer b = random_buffer(rng, 30);
  for (std::size_t k = 0; k + 1 < b.size(); ++k) {
    b.steps[k].boundary = false;
    b.steps[k].next_value = b.steps[k + 1].value;
  }
  b.steps.back().next_value = 0.0;  // terminal
  const double gamma = 0.95;
  compute_gae(b, gamma, 1.0);
  for (std::size_t t = 0; t < b.size(); ++t) {
    double g = 0.0, w = 1.0;
    for (std::size_t k = t; k < b.size(); ++k, w *= gamma) g += w * b.steps[k].reward;
    EXPECT_NEAR(b.advantages[t], g - b.steps[t].value, 1e-10);
  }
}

TEST(Rollouts, SingleStepAndDeterminism) {
  PPOConfig cfg;
  cfg.num_envs = 1;
  Rng rng(4);
  const PolicyNet p = PolicyNet::random(rng);
  VecEnv one({circle()}, {}, 1, 7);
  EXPECT_EQ(collect_rollouts(p, one, 1, cfg).size(), 1u);

  auto collect = [&] {
    VecEnv envs({circle()}, {}, 3, 9);
    return collect_rollouts(p, envs, 500, cfg);
  };
  const RolloutBuffer a = collect(), b = collect();
  ASSERT_EQ(a.size(), 500u);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a.steps[k].reward, b.steps[k].reward);
    EXPECT_EQ(a.steps[k].pre_sample, b.steps[k].pre_sample);
    EXPECT_EQ(a.steps[k].next_value, b.steps[k].next_value);
  }
  // Every env slice ends on a boundary so GAE never crosses envs.
  const auto share = split_steps(500, 3);
  std::size_t end = 0;
  for (int s : share) {
    end += static_cast<std::size_t>(s);
    EXPECT_TRUE(a.steps[end - 1].boundary);
  }
}

TEST(Rollouts, ZeroRewardGivesZeroAdvantages) {
  EnvConfig env;
  env.weights = {0.0, 0.0, 0.0};
  PPOConfig cfg;
  VecEnv envs({circle()}, env, 2, 3);
  RolloutBuffer b = collect_rollouts(PolicyNet::zeros(), envs, 300, cfg);
  compute_gae(b, cfg.gamma, cfg.lambda);
  for (double a : b.advantages) EXPECT_EQ(a, 0.0);
}

TEST(Rollouts, DivergenceBootstrapSwitch) {
  // Drive straight off a straight track so every episode diverges.
  auto line = std::make_shared<Trajectory>(
      generate_track(TrackKind::kStraight, {.length = 100.0}));
  EnvConfig env;
  env.episode.max_steps = 1000;
  Rng rng(5);
  PolicyNet p = PolicyNet::random(rng);
  p.value_head.layers.back().bias[0] = 3.0;
  for (bool bootstrap : {false, true}) {
    PPOConfig cfg;
    cfg.bootstrap_on_divergence = bootstrap;
    VecEnv envs({line}, env, 1, 1);
    envs.slot(0).obs = envs.slot(0).env.reset_to(0, {0, 0, kPi / 2, 0, 0});
    std::vector<Transition> out;
    std::vector<double> returns;
    // Starting perpendicular to the track, the untrained policy crosses
    // the 4 m cutoff within the slice.
    collect_env_slice(p, envs.slot(0), 400, cfg, out, returns);
    bool saw = false;
    for (const auto& tr : out) {
      if (tr.done && tr.abs_de > env.divergence_cutoff) {
        saw = true;
        if (bootstrap) {
          EXPECT_NE(tr.next_value, 0.0);
        } else {
          EXPECT_EQ(tr.next_value, 0.0);
        }
      }
    }
    EXPECT_TRUE(saw);
  }
}

TEST(SplitSteps, SumsExactly) {
  for (int steps : {1, 7, 8, 4096, 4097}) {
    for (std::size_t envs : {1u, 3u, 8u}) {
      const auto s = split_steps(steps, envs);
      EXPECT_EQ(std::accumulate(s.begin(), s.end(), 0), steps);
      EXPECT_LE(*std::max_element(s.begin(), s.end()) -
                    *std::min_element(s.begin(), s.end()),
                1);
    }
  }
}

TEST(NormalizedAdvantages, MeanZeroStdOne) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(3.0, 5.0);
  std::vector<double> a(1000);
  for (double& x : a) x = g(rng);
  const auto n = normalized_advantages(a);
  const double mean = std::accumulate(n.begin(), n.end(), 0.0) / 1000.0;
  double var = 0.0;
  for (double x : n) var += (x - mean) * (x - mean);
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(std::sqrt(var / 1000.0), 1.0, 1e-6);
  for (double x : normalized_advantages(std::vector<double>(5, 2.0))) EXPECT_EQ(x, 0.0);
}

struct LossFixture {
  PolicyNet policy;
  RolloutBuffer buffer;
  std::vector<std::size_t> idx;
  std::vector<double> adv;
};

// Buffer from a perturbed copy of the policy, so ratios are spread around 1
// and some samples are clipped.
LossFixture make_loss_fixture(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  LossFixture f;
  f.policy = PolicyNet::random(rng, -0.3);
  PolicyNet old = f.policy;
  Eigen::VectorXd flat = old.flatten();
  std::normal_distribution<double> g(0.0, 0.05);
  for (Eigen::Index k = 0; k < flat.size(); ++k) flat[k] += g(rng);
  old.assign(flat);
  VecEnv envs({circle()}, {}, 2, seed + 1);
  PPOConfig cfg;
  f.buffer = collect_rollouts(old, envs, static_cast<int>(n), cfg);
  compute_gae(f.buffer, 0.99, 0.95);
  f.adv = normalized_advantages(f.buffer.advantages);
  f.idx.resize(n);
  std::iota(f.idx.begin(), f.idx.end(), std::size_t{0});
  return f;
}

TEST(PPOLoss, GradientMatchesFiniteDifferences) {
  LossFixture f = make_loss_fixture(7, 96);
  PPOConfig cfg;
  cfg.entropy_coef = 0.03;
  cfg.clip_eps = 0.1;
  const LossGradient lg = ppo_loss_gradient(f.policy, f.buffer, f.idx, f.adv, cfg);
  EXPECT_GT(lg.stats.clip_fraction, 0.0);
  auto loss = [&](const Eigen::VectorXd& theta) {
    PolicyNet q = f.policy;
    q.assign(theta);
    return ppo_loss_gradient(q, f.buffer, f.idx, f.adv, cfg).total_loss;
  };
  std::mt19937_64 rng(8);
  // Clip kinks make a few coordinates non-smooth at h; a smaller step keeps
  // every sample on one side of its kink.
  EXPECT_LT(testing::worst_fd_error(loss, f.policy.flatten(), lg.grad, 200, rng, 1e-6),
            1e-4);
}

// With an unbounded clip and ratio 1 the gradient of the policy term is the
// plain policy gradient -mean_b A_b grad log pi(a_b | o_b).
TEST(PPOLoss, UnclippedRatioOneIsPolicyGradient) {
  Rng rng(9);
  const PolicyNet p = PolicyNet::random(rng, -0.4);
  VecEnv envs({circle()}, {}, 1, 10);
  PPOConfig cfg;
  RolloutBuffer b = collect_rollouts(p, envs, 3, cfg);
  compute_gae(b, 0.99, 0.95);
  const std::vector<double> adv{0.7, -1.3, 0.4};
  const std::vector<std::size_t> idx{0, 1, 2};
  cfg.clip_eps = 1e9;
  cfg.value_coef = 0.0;
  const LossGradient lg = ppo_loss_gradient(p, b, idx, adv, cfg);

  const Eigen::VectorXd x = p.flatten();
  Eigen::VectorXd expected = Eigen::VectorXd::Zero(x.size());
  const double h = 1e-6;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Eigen::VectorXd xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    PolicyNet qp = p, qm = p;
    qp.assign(xp);
    qm.assign(xm);
    for (std::size_t s = 0; s < 3; ++s) {
      const auto& tr = b.steps[s];
      const double lp = squashed_log_prob(forward(qp, tr.obs).mean_pre,
                                          qp.clamped_log_std(), tr.pre_sample);
      const double lm = squashed_log_prob(forward(qm, tr.obs).mean_pre,
                                          qm.clamped_log_std(), tr.pre_sample);
      expected[k] -= adv[s] * (lp - lm) / (2 * h) / 3.0;
    }
  }
  EXPECT_LT((lg.grad - expected).cwiseAbs().maxCoeff(),
            1e-6 * std::max(1.0, expected.cwiseAbs().maxCoeff()));
}

TEST(PPOUpdate, ZeroAdvantagesLeaveMeanPathUntouched) {
  LossFixture f = make_loss_fixture(11, 128);
  std::fill(f.buffer.advantages.begin(), f.buffer.advantages.end(), 0.0);
  PPOConfig cfg;
  cfg.minibatch_size = 32;
  cfg.epochs_per_iter = 2;
  cfg.value_coef = 0.0;
  PolicyNet p = f.policy;
  Adam adam(p.parameter_count(), 0.9, 0.999, 1e-8);
  Rng rng(1);
  ppo_update(p, adam, f.buffer, cfg, rng);
  EXPECT_EQ(p.flatten(), f.policy.flatten());

  cfg.entropy_coef = 0.01;
  PolicyNet q = f.policy;
  Adam adam2(q.parameter_count(), 0.9, 0.999, 1e-8);
  ppo_update(q, adam2, f.buffer, cfg, rng);
  const auto mp = static_cast<Eigen::Index>(q.mean_path_parameter_count());
  EXPECT_EQ(q.flatten().head(mp), f.policy.flatten().head(mp));
  EXPECT_GT(q.log_std[0], f.policy.log_std[0]);  // entropy bonus widens
}

TEST(PPOUpdate, NonFiniteLossThrows) {
  LossFixture f = make_loss_fixture(12, 64);
  f.buffer.returns[3] = std::nan("");
  PPOConfig cfg;
  PolicyNet p = f.policy;
  Adam adam(p.parameter_count(), 0.9, 0.999, 1e-8);
  Rng rng(1);
  EXPECT_THROW(ppo_update(p, adam, f.buffer, cfg, rng), NonFiniteLoss);
}

TEST(Adam, FirstStepIsSignTimesLr) {
  Adam adam(3, 0.9, 0.999, 1e-12);
  Eigen::VectorXd x(3);
  x << 1.0, 2.0, 3.0;
  Eigen::VectorXd g(3);
  g << 0.5, -4.0, 0.0;
  adam.step(x, g, 0.1);
  EXPECT_NEAR(x[0], 0.9, 1e-9);
  EXPECT_NEAR(x[1], 2.1, 1e-9);
  EXPECT_EQ(x[2], 3.0);
  EXPECT_EQ(adam.steps(), 1);
}

TEST(Train, ZeroItersReturnsInitialPolicy) {
  PPOConfig cfg;
  cfg.total_iters = 0;
  const TrainResult r = train(cfg, {}, {circle()}, 5);
  Rng master(5);
  Rng init(master());
  EXPECT_EQ(r.policy.flatten(), PolicyNet::random(init, cfg.init_log_std).flatten());
  EXPECT_TRUE(r.metrics.empty());
}

TEST(Train, SameSeedSameMetrics) {
  PPOConfig cfg;
  cfg.total_iters = 2;
  cfg.steps_per_iter = 256;
  cfg.minibatch_size = 64;
  cfg.epochs_per_iter = 2;
  cfg.num_envs = 2;
  const TrainResult a = train(cfg, {}, {circle()}, 3);
  const TrainResult b = train(cfg, {}, {circle()}, 3);
  ASSERT_EQ(a.metrics.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(a.metrics[k].mean_reward, b.metrics[k].mean_reward);
    EXPECT_EQ(a.metrics[k].loss.policy_loss, b.metrics[k].loss.policy_loss);
    EXPECT_TRUE(std::isfinite(a.metrics[k].mean_reward));
  }
  EXPECT_EQ(a.policy.flatten(), b.policy.flatten());
}

TEST(PPOConfig, Validation) {
  PPOConfig cfg;
  cfg.gamma = 1.5;
  EXPECT_THROW(cfg.validate(), InvalidParams);
  cfg = {};
  cfg.minibatch_size = 0;
  EXPECT_THROW(cfg.validate(), InvalidParams);
}

}  // namespace
}  // namespace trackrl
