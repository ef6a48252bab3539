#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "trackrl/adapt.hpp"
#include "trackrl/ilqr.hpp"
#include "trackrl/ppo.hpp"

namespace trackrl {

// Tracks the baseline policy trains on. The canonical evaluation tracks
// (circle and figure-eight of radius 10 m) are never part of this set.
struct TrainTrackSpec {
  int random_count = 8;
  RandomTrackParams random;
  // Every other random track uses this (sharper) curvature ramp.
  double sharp_ramp = 0.5;
  std::vector<double> figure_eight_radii{7.0, 13.0};
  // Each track's reference speed is drawn uniformly from this range
  // (overrides random.speed); a speed-diverse set keeps the policy reading
  // the waypoint speed instead of memorising one cruise speed.
  double speed_min = 1.0;
  double speed_max = 5.0;
};

std::vector<std::shared_ptr<const Trajectory>> training_tracks(
    const TrainTrackSpec& spec, std::uint64_t seed);

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;  // mandatory before running
  std::filesystem::path output_dir = "run";
  std::string preset = "warthog-like";
  std::optional<std::filesystem::path> surrogate_file;  // overrides preset
  std::vector<std::string> scenarios{"circle", "figure-eight"};
  TrainTrackSpec tracks;
  EnvConfig env;  // surrogate field unused: training is kinematic
  PPOConfig ppo;
  GridSpec grid = default_grid();
  DatasetConfig dataset;
  FinetuneConfig finetune;
  std::vector<int> epochs{10, 20, 30, 40, 50};
  ILQRConfig ilqr;
  EvalConfig eval;

  // Throws InvalidParams (bad values, missing seed) or MissingArtifact.
  void validate() const;
  SurrogateParams surrogate() const;
};

// Desk-scale defaults used by the CLI and the acceptance run.
ExperimentConfig default_experiment_config();

// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const std::string& text,
                                             ExperimentConfig base = default_experiment_config());
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Canonical JSON (sorted keys, round-trip precision); also the hash input.
std::string experiment_config_to_json(const ExperimentConfig& cfg);

// Derived seeds; all pipeline randomness flows from the master seed.
struct StageSeeds {
  std::uint64_t train = 0;
  std::uint64_t collect = 0;
  std::uint64_t split = 0;
  std::uint64_t finetune = 0;
  std::uint64_t eval_noise = 0;
};
StageSeeds derive_seeds(std::uint64_t master);

std::vector<Scenario> make_scenarios(const std::vector<std::string>& names,
                                     const std::optional<SurrogateParams>& plant);

struct ComparisonRow {
  std::string controller;  // vanilla, adapted or ilqr
  std::string scenario;
  Metrics metrics;
};

struct PipelineReport {
  std::string surrogate;
  int selected_epoch = 0;
  std::vector<ComparisonRow> rows;
  EpochSelection selection;
  std::vector<double> train_mse;
  std::vector<double> validation_mse;
  std::size_t dataset_pairs = 0;
  int skipped_segments = 0;
};

// Deterministic serialization: fixed key order, %.17g numbers, no times.
std::string report_to_json(const PipelineReport& report);

// CSV header: controller,scenario,max_pos_de,max_neg_de,max_abs_de,
// mean_abs_de,mean_vel_err,completed
std::string comparison_csv(const std::vector<ComparisonRow>& rows);

// Hex SHA-256 of a byte string / of a file's contents.
std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

// Exclusive per-directory lock; throws StageFailed if already held.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Train, evaluate vanilla, collect, fine-tune, select, evaluate adapted,
// run ILQR, write the report. Each stage skips itself when its stamp (a
// hash of its inputs) matches and its outputs exist. Failures surface as
// StageFailed naming the stage; earlier artifacts stay on disk. Progress
// lines go to `progress` when given.
PipelineReport run_pipeline(const ExperimentConfig& cfg,
                            std::ostream* progress = nullptr);

// Artifact layout inside the output directory.
namespace layout {
inline constexpr const char* kPolicy = "policy.json";
inline constexpr const char* kTrainMetrics = "train_metrics.csv";
inline constexpr const char* kDriveLog = "drive_log.csv";
inline constexpr const char* kAdaptDir = "adapt";
inline constexpr const char* kFinetuneLoss = "finetune_loss.csv";
inline constexpr const char* kEpochReport = "epoch_report.csv";
inline constexpr const char* kSelected = "selected_epoch.txt";
inline constexpr const char* kLogsDir = "logs";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kCompare = "compare.csv";
inline constexpr const char* kStampsDir = "stages";
inline constexpr const char* kLock = ".lock";
std::string epoch_checkpoint(int epoch);  // adapt/epoch_030.json
}  // namespace layout

// CSV header: iter,steps,mean_reward,mean_abs_de,policy_loss,value_loss,
// entropy,clip_fraction
void save_training_metrics(const std::vector<IterationMetrics>& metrics,
                           const std::filesystem::path& path);
// CSV header: epoch,train_mse,validation_mse
void save_finetune_loss(const FinetuneResult& result,
                        const std::filesystem::path& path);

}  // namespace trackrl
