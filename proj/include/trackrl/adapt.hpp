#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trackrl/metrics.hpp"
#include "trackrl/net.hpp"

namespace trackrl {

// Constant-command cells driven on the real (surrogate) vehicle.
struct GridSpec {
  std::vector<double> v_values;
  std::vector<double> w_values;
  double hold_duration = 5.0;  // seconds per cell
  int repeats = 3;             // full passes over the grid

  std::size_t cell_count() const { return v_values.size() * w_values.size(); }
  void validate() const;
};

// v in {0, ..., 5} m/s, omega = i / 5 rad/s for i = -10..10, 5 s holds.
GridSpec default_grid();

struct DriveRecord {
  double t = 0.0;  // seconds since the segment started
  VehicleState state;
  Action a_star;  // command issued at this tick
  int segment = 0;
};

// Time-ordered records; records of one segment are contiguous.
struct DriveLog {
  std::vector<DriveRecord> records;

  // [begin, end) record ranges, one per segment, in log order.
  std::vector<std::pair<std::size_t, std::size_t>> segments() const;
};

// Drives every cell (repeats x cells segments) from rest at the origin,
// recording the pre-command state and the command at every tick. Segment k
// uses its own noise stream derived from `seed`, so cells can be collected
// concurrently. dt must be positive.
DriveLog collect_grid_data(const SurrogateParams& vehicle, const GridSpec& grid,
                           double dt, std::uint64_t seed);
DriveLog collect_grid_data_serial(const SurrogateParams& vehicle,
                                  const GridSpec& grid, double dt,
                                  std::uint64_t seed);

// CSV header: t,x,y,phi,v,omega,v_cmd,omega_cmd,segment_id
void save_drive_log(const DriveLog& log, const std::filesystem::path& path);
DriveLog load_drive_log(const std::filesystem::path& path);

struct DatasetConfig {
  double spacing = 0.5;           // resampling step along the recorded path
  double validation_fraction = 0.1;
  std::uint64_t split_seed = 0;
};

struct AdaptDataset {
  std::vector<Observation> obs;
  std::vector<Action> a_star;
  std::vector<int> segment;
  std::vector<std::size_t> train;  // indices into the pair arrays
  std::vector<std::size_t> validation;
  int skipped_segments = 0;  // segments too short to yield any pair

  std::size_t size() const { return obs.size(); }
};

// Pairs for one segment: the segment's recorded path is resampled once on
// a fixed `spacing` arc-length grid (speed = interpolated realized speed)
// and used as a track; record t is observed from its closest grid point
// exactly as the environment would, and labelled with the command at t.
// Records whose closest grid point lacks kLookahead points ahead are dropped.
// Throws SegmentTooShort for segments of fewer than kLookahead + 1 records.
void append_segment_pairs(const DriveLog& log, std::size_t begin,
                          std::size_t end, double spacing, AdaptDataset& out);

// All segments; too-short segments are skipped and counted. The split puts
// whole command cells into validation, so no cell spans both partitions.
AdaptDataset build_dataset(const DriveLog& log, const DatasetConfig& cfg = {});

struct FinetuneConfig {
  double lr = 1e-4;
  int minibatch_size = 64;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  void validate() const;
};

struct FinetuneResult {
  PolicyNet policy;                     // after the last epoch
  std::vector<PolicyNet> checkpoints;   // checkpoints[e] is after epoch e + 1
  std::vector<double> train_mse;        // per epoch, full training split
  std::vector<double> validation_mse;   // per epoch; NaN without validation
};

// Mean over `indices` of |a* - squashed mean|^2 and its gradient w.r.t. the
// trunk + mean-head parameters (the leading block of the flat layout).
struct ImitationGradient {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

inline constexpr std::size_t kGradientChunkImitation = 64;

// OpenMP over fixed 64-pair chunks, reduced in chunk order.
ImitationGradient imitation_loss_gradient(const PolicyNet& policy,
                                          const AdaptDataset& data,
                                          std::span<const std::size_t> indices);
// Serial twin: same chunks, same reduction order, bit-identical result.
ImitationGradient imitation_loss_gradient_serial(
    const PolicyNet& policy, const AdaptDataset& data,
    std::span<const std::size_t> indices);

double imitation_mse(const PolicyNet& policy, const AdaptDataset& data,
                     std::span<const std::size_t> indices);

// Supervised fine-tuning of the trunk and mean head only; log_std and the
// value head are carried over untouched. Throws NonFiniteLoss.
FinetuneResult finetune(const PolicyNet& policy, const AdaptDataset& data,
                        int epochs, const FinetuneConfig& cfg,
                        std::uint64_t seed);

struct Scenario {
  std::string name;
  std::shared_ptr<const Trajectory> track;
  std::optional<SurrogateParams> plant;  // kinematic when empty
};

// Canonical circle / figure-eight (R = 10 m, 0.5 m spacing, 4 m/s).
std::vector<Scenario> canonical_scenarios(
    const std::optional<SurrogateParams>& plant);

// One deterministic rollout of `policy` on `scenario`.
struct PolicyEvalTask {
  const PolicyNet* policy = nullptr;
  const Scenario* scenario = nullptr;
};

// Every task runs with the same plant noise seed; one OpenMP task each.
std::vector<TrajectoryLog> run_policy_tasks(std::span<const PolicyEvalTask> tasks,
                                            const EvalConfig& eval,
                                            std::uint64_t noise_seed);
std::vector<TrajectoryLog> run_policy_tasks_serial(
    std::span<const PolicyEvalTask> tasks, const EvalConfig& eval,
    std::uint64_t noise_seed);

struct EpochReportRow {
  int epoch = 0;
  std::string scenario;
  Metrics metrics;
};

struct EpochSelection {
  int best_epoch = 0;
  std::vector<int> epochs;
  std::vector<double> scores;  // mean over scenarios of the scored max |d_e|
  std::vector<EpochReportRow> report;
};

// Scored max |d_e| of one run: the divergence cutoff when the run did not
// complete, otherwise its max |d_e|.
double scored_max_abs_de(const Metrics& m, double cutoff);

// Rolls out every checkpoint deterministically on every scenario and picks
// the epoch with the lowest mean scored max |d_e| (earliest on ties).
EpochSelection select_epoch(const std::vector<std::pair<int, PolicyNet>>& checkpoints,
                            const std::vector<Scenario>& scenarios,
                            const EvalConfig& eval, std::uint64_t noise_seed);

// CSV header: epoch,scenario,max_pos_de,max_neg_de,mean_abs_de
void save_epoch_report(const EpochSelection& sel,
                       const std::filesystem::path& path);

}  // namespace trackrl
