#include <gtest/gtest.h>
#include <omp.h>

#include <numeric>

#include "trackrl/adapt.hpp"
#include "trackrl/kernels.hpp"

namespace trackrl {
namespace {

std::shared_ptr<const Trajectory> circle() {
  return std::make_shared<Trajectory>(generate_track(TrackKind::kCircle, {}));
}

// Runs `f` with 1 and with 4 OpenMP threads and returns both results.
template <class F>
auto with_threads(F f) {
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  auto one = f();
  omp_set_num_threads(4);
  auto four = f();
  omp_set_num_threads(saved);
  return std::make_pair(one, four);
}

TEST(Kernels, RolloutsMatchSerialTwin) {
  Rng rng(1);
  const PolicyNet p = PolicyNet::random(rng);
  PPOConfig cfg;
  EnvConfig env;
  env.surrogate = surrogate_preset("warthog-like");
  auto run = [&](bool parallel) {
    VecEnv envs({circle()}, env, 5, 3);
    return parallel ? collect_rollouts(p, envs, 777, cfg)
                    : collect_rollouts_serial(p, envs, 777, cfg);
  };
  const RolloutBuffer s = run(false);
  const auto [one, four] = with_threads([&] { return run(true); });
  for (const RolloutBuffer* b : {&one, &four}) {
    ASSERT_EQ(b->size(), s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      ASSERT_EQ(b->steps[k].reward, s.steps[k].reward);
      ASSERT_EQ(b->steps[k].log_prob, s.steps[k].log_prob);
      ASSERT_EQ(b->steps[k].next_value, s.steps[k].next_value);
    }
    EXPECT_EQ(b->episode_returns, s.episode_returns);
  }
}

TEST(Kernels, PPOGradientChunkedMatchesSerial) {
  Rng rng(2);
  const PolicyNet p = PolicyNet::random(rng);
  VecEnv envs({circle()}, {}, 2, 4);
  PPOConfig cfg;
  cfg.entropy_coef = 0.01;
  RolloutBuffer b = collect_rollouts_serial(p, envs, 300, cfg);
  compute_gae(b, cfg.gamma, cfg.lambda);
  const auto adv = normalized_advantages(b.advantages);
  std::vector<std::size_t> idx(300);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const LossGradient ref = ppo_loss_gradient(p, b, idx, adv, cfg);
  const auto [one, four] =
      with_threads([&] { return ppo_loss_gradient_chunked(p, b, idx, adv, cfg); });
  // Chunked reduction reorders sums relative to the one-shot pass ...
  EXPECT_LT((one.grad - ref.grad).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(one.total_loss, ref.total_loss, 1e-12);
  // ... but never depends on the thread count.
  EXPECT_EQ(one.grad, four.grad);
  EXPECT_EQ(one.total_loss, four.total_loss);
}

TEST(Kernels, GridCollectionMatchesSerialTwin) {
  GridSpec grid = default_grid();
  grid.v_values = {0.0, 2.0, 4.0};
  grid.w_values = {-1.0, 0.0, 1.0};
  grid.repeats = 2;
  grid.hold_duration = 1.0;
  const SurrogateParams sp = surrogate_preset("moose-like");
  const DriveLog s = collect_grid_data_serial(sp, grid, 0.05, 9);
  const auto [one, four] = with_threads([&] { return collect_grid_data(sp, grid, 0.05, 9); });
  for (const DriveLog* d : {&one, &four}) {
    ASSERT_EQ(d->records.size(), s.records.size());
    for (std::size_t k = 0; k < s.records.size(); ++k) {
      ASSERT_EQ(d->records[k].state.x, s.records[k].state.x);
      ASSERT_EQ(d->records[k].state.omega, s.records[k].state.omega);
      ASSERT_EQ(d->records[k].segment, s.records[k].segment);
    }
  }
}

TEST(Kernels, ImitationGradientMatchesSerialTwin) {
  GridSpec grid = default_grid();
  grid.repeats = 1;
  grid.v_values = {1.0, 3.0};
  grid.w_values = {-0.4, 0.0, 0.4};
  const AdaptDataset data =
      build_dataset(collect_grid_data_serial(surrogate_preset("warthog-like"), grid, 0.05, 2));
  ASSERT_GT(data.size(), 128u);  // several 64-pair chunks
  Rng rng(3);
  const PolicyNet p = PolicyNet::random(rng);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const ImitationGradient s = imitation_loss_gradient_serial(p, data, idx);
  const auto [one, four] =
      with_threads([&] { return imitation_loss_gradient(p, data, idx); });
  EXPECT_EQ(one.grad, s.grad);
  EXPECT_EQ(one.loss, s.loss);
  EXPECT_EQ(four.grad, s.grad);
}

TEST(Kernels, PolicyEvalTasksMatchSerialTwin) {
  Rng rng(4);
  const PolicyNet a = PolicyNet::random(rng), b = PolicyNet::random(rng);
  const auto scenarios = canonical_scenarios(surrogate_preset("warthog-like"));
  std::vector<PolicyEvalTask> tasks;
  for (const PolicyNet* p : {&a, &b}) {
    for (const auto& sc : scenarios) tasks.push_back({p, &sc});
  }
  const EvalConfig eval;
  const auto s = run_policy_tasks_serial(tasks, eval, 5);
  const auto [one, four] = with_threads([&] { return run_policy_tasks(tasks, eval, 5); });
  for (const auto* logs : {&one, &four}) {
    ASSERT_EQ(logs->size(), s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      ASSERT_EQ((*logs)[k].ticks.size(), s[k].ticks.size());
      for (std::size_t t = 0; t < s[k].ticks.size(); ++t) {
        ASSERT_EQ((*logs)[k].ticks[t].d_e, s[k].ticks[t].d_e);
      }
    }
  }
}

}  // namespace
}  // namespace trackrl
