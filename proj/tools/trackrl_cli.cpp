// trackrl: train, collect, adapt, eval, compare, pipeline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "trackrl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace trackrl;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string preset;
  std::string epochs;
};

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg =
      c.config.empty() ? default_experiment_config() : load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (!c.preset.empty()) {
    cfg.preset = c.preset;
    cfg.surrogate_file.reset();
  }
  if (!c.epochs.empty()) {
    cfg.epochs.clear();
    std::stringstream ss(c.epochs);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        cfg.epochs.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw InvalidParams("--epochs expects a comma-separated integer list");
      }
    }
  }
  cfg.eval.env = cfg.env;
  cfg.eval.env.surrogate.reset();
  cfg.ilqr.dt = cfg.env.episode.dt;
  if (!cfg.seed) throw InvalidParams("a seed is required (--seed or config)");
  return cfg;
}

// "kinematic" (or empty) means the ideal simulator.
std::optional<SurrogateParams> plant_for(const std::string& preset) {
  if (preset.empty() || preset == "kinematic") return std::nullopt;
  return surrogate_preset(preset);
}

void print_metrics(const std::string& label, const Metrics& m) {
  std::printf("%s max_pos_de=%.4f max_neg_de=%.4f max_abs_de=%.4f mean_abs_de=%.4f "
              "mean_vel_err=%.4f completed=%d\n",
              label.c_str(), m.max_pos_de, m.max_neg_de, m.max_abs_de, m.mean_abs_de,
              m.mean_vel_err, m.completed ? 1 : 0);
}

void add_common(CLI::App* app, Common& c, bool with_preset, bool with_epochs) {
  app->add_option("--config", c.config, "Experiment config JSON");
  app->add_option("--seed", c.seed, "Master seed");
  app->add_option("--out", c.out, "Output directory");
  if (with_preset) {
    app->add_option("--preset", c.preset,
                    "Surrogate preset: warthog-like, moose-like, identity");
  }
  if (with_epochs) app->add_option("--epochs", c.epochs, "Epoch list, e.g. 10,20,30");
}

int cmd_train(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  fs::create_directories(cfg.output_dir);
  const StageSeeds seeds = derive_seeds(*cfg.seed);
  EnvConfig env = cfg.env;
  env.surrogate.reset();
  const auto tracks = training_tracks(cfg.tracks, seeds.train);
  const TrainResult res =
      train(cfg.ppo, env, tracks, seeds.train, [](const IterationMetrics& m, const PolicyNet&) {
        if (m.iter % 10 == 0) {
          std::fprintf(stderr, "iter %d steps %ld mean_reward %.3f mean_abs_de %.3f\n",
                       m.iter, m.steps, m.mean_reward, m.mean_abs_de);
        }
      });
  save_checkpoint(res.policy, cfg.output_dir / layout::kPolicy);
  save_training_metrics(res.metrics, cfg.output_dir / layout::kTrainMetrics);
  std::printf("wrote %s\n", (cfg.output_dir / layout::kPolicy).c_str());
  return 0;
}

int cmd_collect(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  fs::create_directories(cfg.output_dir);
  const StageSeeds seeds = derive_seeds(*cfg.seed);
  const DriveLog log =
      collect_grid_data(cfg.surrogate(), cfg.grid, cfg.env.episode.dt, seeds.collect);
  save_drive_log(log, cfg.output_dir / layout::kDriveLog);
  std::printf("wrote %zu records in %zu segments to %s\n", log.records.size(),
              log.segments().size(), (cfg.output_dir / layout::kDriveLog).c_str());
  return 0;
}

int cmd_adapt(const Common& c, std::string policy_path, std::string drive_path) {
  ExperimentConfig cfg = resolve(c);
  if (policy_path.empty()) policy_path = (cfg.output_dir / layout::kPolicy).string();
  if (drive_path.empty()) drive_path = (cfg.output_dir / layout::kDriveLog).string();
  const StageSeeds seeds = derive_seeds(*cfg.seed);
  const PolicyNet policy = load_checkpoint(policy_path);
  const DriveLog log = load_drive_log(drive_path);
  DatasetConfig dcfg = cfg.dataset;
  dcfg.split_seed = seeds.split;
  const AdaptDataset data = build_dataset(log, dcfg);
  if (data.skipped_segments > 0) {
    std::fprintf(stderr, "warning: %d segments too short for a full lookahead, skipped\n",
                 data.skipped_segments);
  }
  const FinetuneResult res =
      finetune(policy, data, cfg.epochs.back(), cfg.finetune, seeds.finetune);
  fs::create_directories(cfg.output_dir / layout::kAdaptDir);
  std::vector<std::pair<int, PolicyNet>> cps;
  for (int e : cfg.epochs) {
    const auto& net = res.checkpoints[static_cast<std::size_t>(e - 1)];
    save_checkpoint(net, cfg.output_dir / layout::epoch_checkpoint(e));
    cps.emplace_back(e, net);
  }
  save_finetune_loss(res, cfg.output_dir / layout::kFinetuneLoss);
  const auto scenarios = make_scenarios(cfg.scenarios, cfg.surrogate());
  const EpochSelection sel = select_epoch(cps, scenarios, cfg.eval, seeds.eval_noise);
  save_epoch_report(sel, cfg.output_dir / layout::kEpochReport);
  std::ofstream(cfg.output_dir / layout::kSelected) << sel.best_epoch << "\n";
  std::printf("%zu pairs (%zu train / %zu validation); selected epoch %d\n", data.size(),
              data.train.size(), data.validation.size(), sel.best_epoch);
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint,
             const std::string& scenario, const std::string& controller,
             const std::string& log_out) {
  ExperimentConfig cfg = resolve(c);
  const auto plant = plant_for(c.preset);
  const auto scenarios = make_scenarios({scenario}, plant);
  const Scenario& sc = scenarios.front();
  const StageSeeds seeds = derive_seeds(*cfg.seed);
  TrajectoryLog log;
  if (controller == "ilqr") {
    log = ilqr_track(sc.track, plant, cfg.ilqr, cfg.eval, seeds.eval_noise).log;
  } else {
    if (checkpoint.empty()) throw InvalidParams("eval needs --checkpoint");
    const PolicyNet policy = load_checkpoint(checkpoint);
    const PolicyEvalTask task{&policy, &sc};
    log = run_policy_tasks_serial(std::span(&task, 1), cfg.eval, seeds.eval_noise).front();
  }
  const Metrics m = compute_metrics(log, *sc.track, cfg.env.divergence_cutoff);
  if (!log_out.empty()) save_trajectory_log(log, log_out);
  print_metrics(sc.name, m);
  return 0;
}

int cmd_compare(const std::vector<std::string>& runs, const std::string& scenario,
                const std::string& csv_out) {
  const auto sc = make_scenarios({scenario}, std::nullopt).front();
  std::vector<ComparisonRow> rows;
  for (const auto& r : runs) {
    const auto eq = r.find('=');
    if (eq == std::string::npos) throw InvalidParams("--run expects name=log.csv, got " + r);
    const TrajectoryLog log = load_trajectory_log(r.substr(eq + 1));
    rows.push_back({r.substr(0, eq), sc.name, compute_metrics(log, *sc.track)});
  }
  const std::string csv = comparison_csv(rows);
  if (csv_out.empty()) {
    std::cout << csv;
  } else {
    std::ofstream(csv_out) << csv;
  }
  return 0;
}

int cmd_pipeline(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const PipelineReport report = run_pipeline(cfg, &std::cerr);
  std::cout << comparison_csv(report.rows);
  std::printf("selected epoch %d; report at %s\n", report.selected_epoch,
              (cfg.output_dir / layout::kReport).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory-tracking RL with supervised sim-to-real adaptation"};
  app.require_subcommand(1);

  Common train_c, collect_c, adapt_c, eval_c, pipe_c;
  auto* train_cmd = app.add_subcommand("train", "Train the baseline PPO policy");
  add_common(train_cmd, train_c, false, false);

  auto* collect_cmd = app.add_subcommand("collect", "Drive the velocity grid on a surrogate");
  add_common(collect_cmd, collect_c, true, false);

  std::string policy_path, drive_path;
  auto* adapt_cmd = app.add_subcommand("adapt", "Fine-tune on drive data and select an epoch");
  add_common(adapt_cmd, adapt_c, true, true);
  adapt_cmd->add_option("--policy", policy_path, "Baseline checkpoint (default <out>/policy.json)");
  adapt_cmd->add_option("--drive-log", drive_path, "Drive log (default <out>/drive_log.csv)");

  std::string checkpoint, scenario = "circle", controller = "policy", log_out;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or ILQR on one scenario");
  add_common(eval_cmd, eval_c, true, false);
  eval_cmd->add_option("--checkpoint", checkpoint, "Policy checkpoint");
  eval_cmd->add_option("--scenario", scenario, "circle, figure-eight or straight");
  eval_cmd->add_option("--controller", controller, "policy or ilqr")
      ->check(CLI::IsMember({"policy", "ilqr"}));
  eval_cmd->add_option("--log", log_out, "Write the trajectory log CSV here");

  std::vector<std::string> runs;
  std::string compare_scenario = "circle", compare_out;
  auto* compare_cmd = app.add_subcommand("compare", "Tabulate metrics of trajectory logs");
  compare_cmd->add_option("--run", runs, "name=trajectory_log.csv (repeatable)")->required();
  compare_cmd->add_option("--scenario", compare_scenario, "Scenario the logs were run on");
  compare_cmd->add_option("--out", compare_out, "Output CSV (default stdout)");

  auto* pipe_cmd = app.add_subcommand("pipeline", "Run the full experiment");
  add_common(pipe_cmd, pipe_c, true, true);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(train_c);
    if (*collect_cmd) return cmd_collect(collect_c);
    if (*adapt_cmd) return cmd_adapt(adapt_c, policy_path, drive_path);
    if (*eval_cmd) return cmd_eval(eval_c, checkpoint, scenario, controller, log_out);
    if (*compare_cmd) return cmd_compare(runs, compare_scenario, compare_out);
    if (*pipe_cmd) return cmd_pipeline(pipe_c);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
