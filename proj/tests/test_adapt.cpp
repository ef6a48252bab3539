#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <set>

#include "test_support.hpp"
#include "trackrl/adapt.hpp"

namespace trackrl {
namespace {

GridSpec single_cell(double v, double w) {
  GridSpec g;
  g.v_values = {v};
  g.w_values = {w};
  g.repeats = 1;
  return g;
}

double path_length(const DriveLog& log) {
  double len = 0.0;
  for (std::size_t k = 1; k < log.records.size(); ++k) {
    len += std::hypot(log.records[k].state.x - log.records[k - 1].state.x,
                      log.records[k].state.y - log.records[k - 1].state.y);
  }
  return len;
}

SurrogateParams lag_only(double gain_v, double tau_v) {
  SurrogateParams p = identity_surrogate();
  p.gain_v = gain_v;
  p.tau_v = tau_v;
  return p;
}

TEST(CollectGrid, KinematicCellIsStraightFiveMetres) {
  const DriveLog log = collect_grid_data(identity_surrogate(), single_cell(1.0, 0.0), 0.05, 1);
  ASSERT_EQ(log.records.size(), 100u);
  // 100 ticks of 1 m/s; the last record is the state before the final tick.
  EXPECT_NEAR(path_length(log) + 0.05, 5.0, 1e-9);
  for (const auto& r : log.records) EXPECT_NEAR(r.state.y, 0.0, 1e-12);
}

TEST(CollectGrid, LagPathLengthMatchesRecurrence) {
  const DriveLog log = collect_grid_data(lag_only(0.8, 0.5), single_cell(1.0, 0.0), 0.05, 1);
  // Oracle: v_{k+1} = v_k + (0.8 - v_k) * dt / tau, position += v_{k+1} dt.
  double v = 0.0, len = 0.0;
  for (int k = 0; k < 100; ++k) {
    v += (0.8 - v) * 0.1;
    len += v * 0.05;
  }
  EXPECT_NEAR(len, 3.62, 0.03);
  const double last_step = log.records.back().state.v;  // not yet integrated
  double v_last = 0.0;
  for (int k = 0; k < 100; ++k) v_last += (0.8 - v_last) * 0.1;
  EXPECT_NEAR(path_length(log) + v_last * 0.05, len, 1e-9);
  EXPECT_LT(last_step, v_last);
}

TEST(CollectGrid, LayoutAndSeeds) {
  GridSpec g = default_grid();
  EXPECT_EQ(g.cell_count(), 6u * 21u);
  g.repeats = 2;
  g.hold_duration = 0.5;
  const DriveLog log = collect_grid_data(surrogate_preset("warthog-like"), g, 0.05, 3);
  const auto segs = log.segments();
  ASSERT_EQ(segs.size(), 2 * g.cell_count());
  for (std::size_t s = 0; s < segs.size(); ++s) {
    EXPECT_EQ(segs[s].second - segs[s].first, 10u);
    EXPECT_EQ(log.records[segs[s].first].segment, static_cast<int>(s));
    EXPECT_EQ(log.records[segs[s].first].t, 0.0);
  }
  // Repeats of a cell see different noise.
  const auto& a = log.records[segs[5].first + 9].state;
  const auto& b = log.records[segs[5 + g.cell_count()].first + 9].state;
  EXPECT_NE(a.x, b.x);
  GridSpec bad = g;
  bad.v_values = {6.0};
  EXPECT_THROW(collect_grid_data(identity_surrogate(), bad, 0.05, 1), InvalidParams);
  EXPECT_THROW(collect_grid_data(identity_surrogate(), g, 0.0, 1), InvalidParams);
}

TEST(DriveLogIo, RoundTripAndErrors) {
  GridSpec g = single_cell(2.0, 0.4);
  const DriveLog log = collect_grid_data(surrogate_preset("moose-like"), g, 0.05, 4);
  const auto dir = testing::scratch_dir("drive_log");
  save_drive_log(log, dir / "d.csv");
  const DriveLog back = load_drive_log(dir / "d.csv");
  ASSERT_EQ(back.records.size(), log.records.size());
  for (std::size_t k = 0; k < log.records.size(); ++k) {
    EXPECT_EQ(back.records[k].state.x, log.records[k].state.x);
    EXPECT_EQ(back.records[k].state.omega, log.records[k].state.omega);
    EXPECT_EQ(back.records[k].a_star.omega_cmd, 0.4);
  }
  std::ofstream(dir / "bad.csv") << "t,x,y,phi,v,omega,v_cmd,omega_cmd,segment_id\n"
                                 << "0,0,0,0,0,0,1,zero,0\n";
  EXPECT_THROW(load_drive_log(dir / "bad.csv"), MalformedRecord);
  EXPECT_THROW(load_drive_log(dir / "none.csv"), MissingArtifact);
}

TEST(BuildDataset, StraightSegment) {
  const DriveLog log = collect_grid_data(identity_surrogate(), single_cell(2.0, 0.0), 0.05, 1);
  const AdaptDataset d = build_dataset(log, {.validation_fraction = 0.0});
  ASSERT_GT(d.size(), 0u);
  for (std::size_t k = 0; k < d.size(); ++k) {
    for (std::size_t j = 0; j < kLookahead; ++j) {
      EXPECT_NEAR(d.obs[k][j * 4 + 1], 0.0, 1e-12);
      EXPECT_NEAR(d.obs[k][j * 4 + 2], 0.0, 1e-12);
    }
    EXPECT_EQ(d.a_star[k].v_cmd, 2.0);
    EXPECT_EQ(d.a_star[k].omega_cmd, 0.0);
  }
}

// 100 ticks at 2 m/s cover about 9.8 m; a record is usable while its
// closest grid point still has 10 grid points ahead of it, i.e. for roughly
// the first half of the segment.
TEST(BuildDataset, UsablePairCount) {
  const DriveLog log = collect_grid_data(identity_surrogate(), single_cell(2.0, 0.0), 0.05, 1);
  AdaptDataset d;
  append_segment_pairs(log, 0, log.records.size(), 0.5, d);
  // Oracle: on a straight path the closest grid point of a record at arc
  // length s is round(s / 0.5), ties going forward.
  const double total = path_length(log);
  const double last_usable = std::floor(total / 0.5 + 1e-9) - 10.0;
  std::size_t expected = 0;
  for (const auto& r : log.records) {
    if (std::floor(r.state.x / 0.5 + 0.5) <= last_usable) ++expected;
  }
  EXPECT_EQ(d.size(), expected);
  EXPECT_NEAR(static_cast<double>(d.size()), 50.0, 2.0);
}

TEST(BuildDataset, ShortAndStationarySegmentsAreSkipped) {
  DriveLog log = collect_grid_data(identity_surrogate(), single_cell(2.0, 0.0), 0.05, 1);
  log.records.resize(10);
  AdaptDataset d;
  EXPECT_THROW(append_segment_pairs(log, 0, 10, 0.5, d), SegmentTooShort);
  EXPECT_EQ(build_dataset(log).skipped_segments, 1);
  // A cell with v = 0 never moves 5 m.
  const DriveLog still = collect_grid_data(identity_surrogate(), single_cell(0.0, 1.0), 0.05, 1);
  const AdaptDataset ds = build_dataset(still);
  EXPECT_EQ(ds.size(), 0u);
  EXPECT_EQ(ds.skipped_segments, 1);
}

TEST(BuildDataset, FrameInvariance) {
  GridSpec g = single_cell(3.0, 0.6);
  DriveLog log = collect_grid_data(surrogate_preset("warthog-like"), g, 0.05, 5);
  AdaptDataset a;
  append_segment_pairs(log, 0, log.records.size(), 0.5, a);
  const testing::Rigid t{1.234, -40.0, 17.5};
  for (auto& r : log.records) {
    t.apply(r.state.x, r.state.y);
    r.state.phi = wrap_angle(r.state.phi + t.a);
  }
  AdaptDataset b;
  append_segment_pairs(log, 0, log.records.size(), 0.5, b);
  ASSERT_EQ(a.size(), b.size());
  ASSERT_GT(a.size(), 0u);
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t f = 0; f < kObsDim; ++f) {
      double d = a.obs[k][f] - b.obs[k][f];
      if (f % 4 == 1 || f % 4 == 2) d = wrap_angle(d);
      ASSERT_NEAR(d, 0.0, 1e-9);
    }
  }
}

TEST(BuildDataset, SplitKeepsCellsWhole) {
  GridSpec g = default_grid();
  g.repeats = 2;
  const DriveLog log = collect_grid_data(surrogate_preset("warthog-like"), g, 0.05, 6);
  const AdaptDataset d = build_dataset(log, {.split_seed = 3});
  EXPECT_EQ(d.train.size() + d.validation.size(), d.size());
  auto cell = [&](std::size_t k) {
    return std::make_pair(d.a_star[k].v_cmd, d.a_star[k].omega_cmd);
  };
  std::set<std::pair<double, double>> train_cells, val_cells;
  for (std::size_t k : d.train) train_cells.insert(cell(k));
  for (std::size_t k : d.validation) val_cells.insert(cell(k));
  for (const auto& c : val_cells) EXPECT_EQ(train_cells.count(c), 0u);
  const double frac = static_cast<double>(val_cells.size()) /
                      static_cast<double>(val_cells.size() + train_cells.size());
  EXPECT_NEAR(frac, 0.1, 0.02);
  // Deterministic given the split seed.
  EXPECT_EQ(build_dataset(log, {.split_seed = 3}).validation, d.validation);
  EXPECT_THROW(build_dataset(log, {.validation_fraction = 1.0}), InvalidParams);
}

AdaptDataset small_dataset(std::size_t pairs, std::uint64_t seed) {
  GridSpec g;
  g.v_values = {2.0, 3.0, 4.0};
  g.w_values = {-0.4, 0.0, 0.4};
  g.repeats = 1;
  AdaptDataset d = build_dataset(
      collect_grid_data(surrogate_preset("warthog-like"), g, 0.05, seed),
      {.validation_fraction = 0.0});
  std::vector<std::size_t> keep(d.size());
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(keep.begin(), keep.end(), rng);
  keep.resize(std::min(pairs, keep.size()));
  AdaptDataset out;
  for (std::size_t k : keep) {
    out.obs.push_back(d.obs[k]);
    out.a_star.push_back(d.a_star[k]);
    out.segment.push_back(d.segment[k]);
    out.train.push_back(out.size() - 1);
  }
  return out;
}

TEST(Imitation, GradientMatchesFiniteDifferences) {
  const AdaptDataset d = small_dataset(150, 7);
  Rng rng(8);
  const PolicyNet p = PolicyNet::random(rng);
  const ImitationGradient g = imitation_loss_gradient(p, d, d.train);
  EXPECT_NEAR(g.loss, imitation_mse(p, d, d.train), 1e-12);
  const auto n = static_cast<Eigen::Index>(p.mean_path_parameter_count());
  ASSERT_EQ(g.grad.size(), n);
  auto loss = [&](const Eigen::VectorXd& head) {
    PolicyNet q = p;
    Eigen::VectorXd flat = q.flatten();
    flat.head(n) = head;
    q.assign(flat);
    return imitation_mse(q, d, d.train);
  };
  std::mt19937_64 pick(9);
  EXPECT_LT(testing::worst_fd_error(loss, p.flatten().head(n), g.grad, 200, pick), 1e-4);
}

TEST(Finetune, ZeroEpochsIsIdentity) {
  const AdaptDataset d = small_dataset(50, 1);
  Rng rng(2);
  const PolicyNet p = PolicyNet::random(rng);
  const FinetuneResult r = finetune(p, d, 0, {}, 1);
  EXPECT_EQ(r.policy.flatten(), p.flatten());
  EXPECT_TRUE(r.checkpoints.empty());
}

TEST(Finetune, FreezesLogStdAndValueHead) {
  const AdaptDataset d = small_dataset(200, 3);
  Rng rng(4);
  const PolicyNet p = PolicyNet::random(rng);
  const FinetuneResult r = finetune(p, d, 3, {}, 5);
  ASSERT_EQ(r.checkpoints.size(), 3u);
  for (const PolicyNet& c : r.checkpoints) {
    EXPECT_EQ(c.log_std, p.log_std);
    for (std::size_t l = 0; l < p.value_head.layers.size(); ++l) {
      EXPECT_EQ(c.value_head.layers[l].weight, p.value_head.layers[l].weight);
      EXPECT_EQ(c.value_head.layers[l].bias, p.value_head.layers[l].bias);
    }
  }
  EXPECT_NE(r.policy.trunk.layers[0].weight, p.trunk.layers[0].weight);
  EXPECT_TRUE(std::isnan(r.validation_mse[0]));
}

TEST(Finetune, TrainingMseNonIncreasingAtSmallLr) {
  const AdaptDataset d = small_dataset(100, 6);
  ASSERT_EQ(d.size(), 100u);
  Rng rng(7);
  const PolicyNet p = PolicyNet::random(rng);
  FinetuneConfig cfg;
  cfg.lr = 1e-4;
  cfg.minibatch_size = 100;  // full batch
  const FinetuneResult r = finetune(p, d, 30, cfg, 8);
  double prev = imitation_mse(p, d, d.train);
  for (double m : r.train_mse) {
    EXPECT_LE(m, prev + 1e-9);
    prev = m;
  }
  EXPECT_LT(r.train_mse.back(), imitation_mse(p, d, d.train));
}

TEST(Finetune, FixedPointWhenLabelsEqualPolicy) {
  AdaptDataset d = small_dataset(80, 9);
  Rng rng(10);
  const PolicyNet p = PolicyNet::random(rng);
  for (std::size_t k = 0; k < d.size(); ++k) d.a_star[k] = forward(p, d.obs[k]).mean;
  EXPECT_LT(imitation_mse(p, d, d.train), 1e-25);
  // Rounding-level gradients move Adam by about lr * |g| / eps per step.
  // That gain (1e4 here) amplifies any residual on later steps, so the check
  // is a single full-batch step.
  FinetuneConfig cfg;
  cfg.minibatch_size = static_cast<int>(d.size());
  const FinetuneResult r = finetune(p, d, 1, cfg, 1);
  EXPECT_LT((r.policy.flatten() - p.flatten()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(r.train_mse[0], 1e-25);
}

TEST(Finetune, RejectsBadInputs) {
  const AdaptDataset d = small_dataset(20, 1);
  const PolicyNet p = PolicyNet::zeros();
  FinetuneConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(finetune(p, d, 1, cfg, 1), InvalidParams);
  EXPECT_THROW(finetune(p, AdaptDataset{}, 1, {}, 1), InvalidParams);
  AdaptDataset bad = d;
  bad.a_star[0].v_cmd = std::nan("");
  EXPECT_THROW(finetune(p, bad, 1, {}, 1), NonFiniteLoss);
}

// Constant-command policy: zero weights, mean-head bias picks the command.
PolicyNet constant_policy(double v, double w) {
  PolicyNet p = PolicyNet::zeros();
  p.mean_head.layers.back().bias = unsquash({v, w});
  return p;
}

TEST(SelectEpoch, SingleCheckpoint) {
  const auto sc = canonical_scenarios(std::nullopt);
  const EpochSelection s =
      select_epoch({{7, constant_policy(4.0, 0.4)}}, {sc[0]}, {}, 1);
  EXPECT_EQ(s.best_epoch, 7);
  EXPECT_EQ(s.report.size(), 1u);
}

TEST(SelectEpoch, DivergingCheckpointLoses) {
  const auto sc = canonical_scenarios(std::nullopt);
  const EpochSelection s = select_epoch(
      {{10, constant_policy(4.0, 1.9)}, {20, constant_policy(4.0, 0.43)}}, {sc[0]}, {}, 1);
  EXPECT_FALSE(s.report[0].metrics.completed);
  EXPECT_GE(s.scores[0], 4.0);
  EXPECT_EQ(s.best_epoch, 20);
}

// A constant turn rate of v / R tracks the R = 10 m circle exactly; the
// error grows with the turn-rate offset, so offsets (0.06, 0.03, 0, 0.045)
// give a U-shaped curve with its minimum at epoch 30.
TEST(SelectEpoch, UShapedCurvePicksInteriorMinimum) {
  const auto sc = canonical_scenarios(std::nullopt);
  std::vector<std::pair<int, PolicyNet>> cps;
  const double offsets[] = {0.06, 0.03, 0.0, 0.045};
  for (int k = 0; k < 4; ++k) cps.emplace_back(10 * (k + 1), constant_policy(4.0, 0.4 + offsets[k]));
  const EpochSelection s = select_epoch(cps, {sc[0]}, {}, 1);
  const auto argmin = std::min_element(s.scores.begin(), s.scores.end()) - s.scores.begin();
  EXPECT_EQ(s.epochs[static_cast<std::size_t>(argmin)], 30);
  EXPECT_EQ(s.best_epoch, 30);
  EXPECT_GT(s.scores[0], s.scores[1]);
  EXPECT_GT(s.scores[1], s.scores[2]);
  EXPECT_LT(s.scores[2], s.scores[3]);
  // Exact turn rate: only the Euler discretisation offset remains.
  EXPECT_LT(s.scores[2], 0.15);
}

TEST(SelectEpoch, EarliestOnTiesAndReportFile) {
  const auto sc = canonical_scenarios(std::nullopt);
  const PolicyNet p = constant_policy(4.0, 0.42);
  const EpochSelection s = select_epoch({{10, p}, {20, p}}, sc, {}, 1);
  EXPECT_EQ(s.best_epoch, 10);
  EXPECT_EQ(s.report.size(), 4u);
  const auto dir = testing::scratch_dir("epoch_report");
  save_epoch_report(s, dir / "r.csv");
  std::ifstream in(dir / "r.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,scenario,max_pos_de,max_neg_de,mean_abs_de");
  EXPECT_THROW(select_epoch({}, sc, {}, 1), InvalidParams);
}

TEST(ScoredMaxAbsDe, CutoffForIncompleteRuns) {
  Metrics m;
  m.max_abs_de = 1.5;
  m.completed = true;
  EXPECT_EQ(scored_max_abs_de(m, 4.0), 1.5);
  m.completed = false;
  EXPECT_EQ(scored_max_abs_de(m, 4.0), 4.0);
  m.max_abs_de = 4.3;
  EXPECT_EQ(scored_max_abs_de(m, 4.0), 4.3);
}

}  // namespace
}  // namespace trackrl
