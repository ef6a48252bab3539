// Serial vs OpenMP timings for each parallel kernel. Run with
// OMP_NUM_THREADS set to compare thread counts.

#include <benchmark/benchmark.h>

#include <numeric>

#include "trackrl/adapt.hpp"
#include "trackrl/kernels.hpp"

namespace trackrl {
namespace {

std::shared_ptr<const Trajectory> circle() {
  static const auto t = std::make_shared<Trajectory>(generate_track(TrackKind::kCircle, {}));
  return t;
}

PolicyNet bench_policy() {
  Rng rng(1);
  return PolicyNet::random(rng, -0.5);
}

template <bool kParallel>
void BM_CollectRollouts(benchmark::State& state) {
  const PolicyNet p = bench_policy();
  const PPOConfig cfg;
  for (auto _ : state) {
    VecEnv envs({circle()}, {}, 8, 2);
    RolloutBuffer b = kParallel ? collect_rollouts(p, envs, 2048, cfg)
                                : collect_rollouts_serial(p, envs, 2048, cfg);
    benchmark::DoNotOptimize(b);
  }
  state.SetItemsProcessed(state.iterations() * 2048);
}

struct PPOFixture {
  PolicyNet policy = bench_policy();
  RolloutBuffer buffer;
  std::vector<double> adv;
  std::vector<std::size_t> idx;
  PPOConfig cfg;

  PPOFixture() {
    VecEnv envs({circle()}, {}, 4, 3);
    buffer = collect_rollouts_serial(policy, envs, 1024, cfg);
    compute_gae(buffer, cfg.gamma, cfg.lambda);
    adv = normalized_advantages(buffer.advantages);
    idx.resize(buffer.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
};

template <bool kParallel>
void BM_PPOGradient(benchmark::State& state) {
  static const PPOFixture f;
  for (auto _ : state) {
    LossGradient g = kParallel ? ppo_loss_gradient_chunked(f.policy, f.buffer, f.idx, f.adv, f.cfg)
                               : ppo_loss_gradient(f.policy, f.buffer, f.idx, f.adv, f.cfg);
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.idx.size()));
}

GridSpec bench_grid() {
  GridSpec g;
  g.v_values = {1.0, 2.0, 3.0, 4.0};
  g.w_values = {-0.6, -0.2, 0.2, 0.6};
  g.repeats = 1;
  return g;
}

template <bool kParallel>
void BM_CollectGrid(benchmark::State& state) {
  const SurrogateParams v = surrogate_preset("warthog-like");
  for (auto _ : state) {
    DriveLog log = kParallel ? collect_grid_data(v, bench_grid(), 0.05, 4)
                             : collect_grid_data_serial(v, bench_grid(), 0.05, 4);
    benchmark::DoNotOptimize(log);
  }
}

template <bool kParallel>
void BM_ImitationGradient(benchmark::State& state) {
  static const AdaptDataset d = build_dataset(
      collect_grid_data(surrogate_preset("warthog-like"), bench_grid(), 0.05, 5),
      {.validation_fraction = 0.0});
  const PolicyNet p = bench_policy();
  for (auto _ : state) {
    ImitationGradient g = kParallel ? imitation_loss_gradient(p, d, d.train)
                                    : imitation_loss_gradient_serial(p, d, d.train);
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(d.train.size()));
}

template <bool kParallel>
void BM_PolicyEvalTasks(benchmark::State& state) {
  const PolicyNet p = bench_policy();
  const std::vector<Scenario> scenarios = canonical_scenarios(surrogate_preset("moose-like"));
  std::vector<PolicyEvalTask> tasks;
  for (const Scenario& s : scenarios) tasks.push_back({&p, &s});
  const EvalConfig eval;
  for (auto _ : state) {
    auto logs = kParallel ? run_policy_tasks(tasks, eval, 6) : run_policy_tasks_serial(tasks, eval, 6);
    benchmark::DoNotOptimize(logs);
  }
}

BENCHMARK(BM_CollectRollouts<false>)->Name("CollectRollouts/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CollectRollouts<true>)->Name("CollectRollouts/omp")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PPOGradient<false>)->Name("PPOGradient/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PPOGradient<true>)->Name("PPOGradient/omp")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CollectGrid<false>)->Name("CollectGrid/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CollectGrid<true>)->Name("CollectGrid/omp")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ImitationGradient<false>)->Name("ImitationGradient/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ImitationGradient<true>)->Name("ImitationGradient/omp")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PolicyEvalTasks<false>)->Name("PolicyEvalTasks/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PolicyEvalTasks<true>)->Name("PolicyEvalTasks/omp")->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace trackrl

BENCHMARK_MAIN();
