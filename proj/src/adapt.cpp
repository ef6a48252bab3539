#include "trackrl/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "trackrl/ppo.hpp"

namespace trackrl {

void GridSpec::validate() const {
  if (v_values.empty() || w_values.empty()) {
    throw InvalidParams("grid needs at least one v and one omega value");
  }
  for (double v : v_values) {
    if (!(v >= 0.0 && v <= kMaxLinearVelocity)) {
      throw InvalidParams("grid v value outside [0, 5]");
    }
  }
  for (double w : w_values) {
    if (!(std::abs(w) <= kMaxAngularVelocity)) {
      throw InvalidParams("grid omega value outside [-2, 2]");
    }
  }
  if (!(hold_duration > 0.0)) throw InvalidParams("hold_duration must be > 0");
  if (repeats < 1) throw InvalidParams("grid repeats must be >= 1");
}

GridSpec default_grid() {
  GridSpec g;
  for (int v = 0; v <= 5; ++v) g.v_values.push_back(v);
  for (int i = -10; i <= 10; ++i) g.w_values.push_back(i / 5.0);
  return g;
}

std::vector<std::pair<std::size_t, std::size_t>> DriveLog::segments() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t begin = 0;
  for (std::size_t k = 1; k <= records.size(); ++k) {
    if (k == records.size() || records[k].segment != records[begin].segment) {
      out.emplace_back(begin, k);
      begin = k;
    }
  }
  return out;
}

namespace {

struct SegmentPlan {
  int id;
  Action command;
  std::uint64_t seed;
};

std::vector<SegmentPlan> plan_segments(const GridSpec& grid, std::uint64_t seed) {
  grid.validate();
  Rng seeder(seed);
  std::vector<SegmentPlan> plan;
  int id = 0;
  for (int r = 0; r < grid.repeats; ++r) {
    for (double v : grid.v_values) {
      for (double w : grid.w_values) {
        plan.push_back({id++, Action{v, w}, seeder()});
      }
    }
  }
  return plan;
}

std::vector<DriveRecord> drive_segment(const SurrogateParams& vehicle,
                                       const SegmentPlan& seg, int ticks,
                                       double dt) {
  Plant plant(vehicle, seg.seed);
  plant.reset();
  VehicleState s;
  std::vector<DriveRecord> out;
  out.reserve(static_cast<std::size_t>(ticks));
  for (int k = 0; k < ticks; ++k) {
    out.push_back({k * dt, s, seg.command, seg.id});
    s = plant.step(s, seg.command, dt);
  }
  return out;
}

int ticks_per_cell(const GridSpec& grid, double dt) {
  if (!(dt > 0.0)) throw InvalidParams("dt must be > 0");
  return static_cast<int>(std::llround(grid.hold_duration / dt));
}

DriveLog concatenate(std::vector<std::vector<DriveRecord>>& parts) {
  DriveLog log;
  for (auto& p : parts) log.records.insert(log.records.end(), p.begin(), p.end());
  return log;
}

}  // namespace

DriveLog collect_grid_data(const SurrogateParams& vehicle, const GridSpec& grid,
                           double dt, std::uint64_t seed) {
  vehicle.validate();
  const auto plan = plan_segments(grid, seed);
  const int ticks = ticks_per_cell(grid, dt);
  std::vector<std::vector<DriveRecord>> parts(plan.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (int k = 0; k < static_cast<int>(plan.size()); ++k) {
    const auto i = static_cast<std::size_t>(k);
    parts[i] = drive_segment(vehicle, plan[i], ticks, dt);
  }
  return concatenate(parts);
}

DriveLog collect_grid_data_serial(const SurrogateParams& vehicle,
                                  const GridSpec& grid, double dt,
                                  std::uint64_t seed) {
  vehicle.validate();
  const auto plan = plan_segments(grid, seed);
  const int ticks = ticks_per_cell(grid, dt);
  std::vector<std::vector<DriveRecord>> parts;
  for (const auto& seg : plan) parts.push_back(drive_segment(vehicle, seg, ticks, dt));
  return concatenate(parts);
}

void save_drive_log(const DriveLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write drive log " + path.string());
  out << std::setprecision(17) << "t,x,y,phi,v,omega,v_cmd,omega_cmd,segment_id\n";
  for (const auto& r : log.records) {
    out << r.t << ',' << r.state.x << ',' << r.state.y << ',' << r.state.phi
        << ',' << r.state.v << ',' << r.state.omega << ',' << r.a_star.v_cmd
        << ',' << r.a_star.omega_cmd << ',' << r.segment << '\n';
  }
}

DriveLog load_drive_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("drive log not found: " + path.string());
  DriveLog log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "t,x,y,phi,v,omega,v_cmd,omega_cmd,segment_id") {
        throw MalformedRecord(path.string() + ": line 1: unexpected header");
      }
      continue;
    }
    std::stringstream ss(line);
    std::string field;
    double f[9];
    int count = 0;
    while (std::getline(ss, field, ',')) {
      if (count >= 9) {
        count = 10;
        break;
      }
      std::size_t used = 0;
      try {
        f[count] = std::stod(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != field.size() || !std::isfinite(f[count])) {
        throw MalformedRecord(path.string() + ": line " +
                              std::to_string(line_no) + " is not numeric");
      }
      ++count;
    }
    if (count != 9) {
      throw MalformedRecord(path.string() + ": line " + std::to_string(line_no) +
                            " needs 9 fields");
    }
    DriveRecord r;
    r.t = f[0];
    r.state = {f[1], f[2], f[3], f[4], f[5]};
    r.a_star = {f[6], f[7]};
    r.segment = static_cast<int>(f[8]);
    log.records.push_back(r);
  }
  return log;
}

void append_segment_pairs(const DriveLog& log, std::size_t begin,
                          std::size_t end, double spacing, AdaptDataset& out) {
  if (!(spacing > 0.0)) throw InvalidParams("resampling spacing must be > 0");
  const std::size_t m = end - begin;
  if (m < kLookahead + 1) {
    throw SegmentTooShort("segment has " + std::to_string(m) +
                          " records, needs at least " +
                          std::to_string(kLookahead + 1));
  }
  const DriveRecord* rec = log.records.data() + begin;
  std::vector<double> arc(m, 0.0);
  for (std::size_t k = 1; k < m; ++k) {
    arc[k] = arc[k - 1] + std::hypot(rec[k].state.x - rec[k - 1].state.x,
                                     rec[k].state.y - rec[k - 1].state.y);
  }

  // The segment's path resampled once on a fixed arc-length grid; records
  // then see it exactly as the environment sees a track.
  std::vector<Waypoint> wps;
  std::size_t lo = 0;
  const auto points = static_cast<std::size_t>(std::floor(arc[m - 1] / spacing + 1e-9)) + 1;
  for (std::size_t g = 0; g < points; ++g) {
    const double target = static_cast<double>(g) * spacing;
    while (lo + 2 < m && arc[lo + 1] <= target) ++lo;
    const std::size_t hi = std::min(lo + 1, m - 1);
    const double len = arc[hi] - arc[lo];
    const double u = len > 0.0 ? std::clamp((target - arc[lo]) / len, 0.0, 1.0) : 0.0;
    const auto& a = rec[lo].state;
    const auto& b = rec[hi].state;
    wps.push_back({a.x + u * (b.x - a.x), a.y + u * (b.y - a.y),
                   wrap_angle(a.phi + u * wrap_angle(b.phi - a.phi)),
                   std::max(0.0, a.v + u * (b.v - a.v))});
  }
  if (wps.size() < kLookahead + 1) return;
  std::unique_ptr<Trajectory> path;
  try {
    path = std::make_unique<Trajectory>(std::move(wps), spacing);
  } catch (const CoincidentWaypoints&) {
    return;  // degenerate geometry (no net motion between grid points)
  }

  std::size_t i = 0;
  for (std::size_t t = 0; t < m; ++t) {
    const VehicleState& s = rec[t].state;
    i = closest_waypoint(*path, s.x, s.y, i);
    if (i + kLookahead > path->size() - 1) break;  // index is non-decreasing
    out.obs.push_back(observe(*path, s, i));
    out.a_star.push_back(rec[t].a_star);
    out.segment.push_back(rec[t].segment);
  }
}

AdaptDataset build_dataset(const DriveLog& log, const DatasetConfig& cfg) {
  if (!(cfg.validation_fraction >= 0.0 && cfg.validation_fraction < 1.0)) {
    throw InvalidParams("validation_fraction must be in [0, 1)");
  }
  AdaptDataset data;
  for (const auto& [begin, end] : log.segments()) {
    const std::size_t before = data.size();
    try {
      append_segment_pairs(log, begin, end, cfg.spacing, data);
    } catch (const SegmentTooShort&) {
      ++data.skipped_segments;
      continue;
    }
    if (data.size() == before) ++data.skipped_segments;
  }

  // Cells are identified by their constant command.
  std::map<std::pair<double, double>, int> cell_of;
  std::vector<int> pair_cell(data.size());
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto key = std::make_pair(data.a_star[k].v_cmd, data.a_star[k].omega_cmd);
    auto [it, inserted] = cell_of.emplace(key, static_cast<int>(cell_of.size()));
    pair_cell[k] = it->second;
  }
  std::vector<int> cells(cell_of.size());
  std::iota(cells.begin(), cells.end(), 0);
  Rng rng(cfg.split_seed);
  std::shuffle(cells.begin(), cells.end(), rng);
  auto n_val = static_cast<std::size_t>(
      std::llround(cfg.validation_fraction * static_cast<double>(cells.size())));
  if (cfg.validation_fraction > 0.0 && n_val == 0 && cells.size() >= 2) n_val = 1;
  std::vector<char> is_val(cells.size(), 0);
  for (std::size_t k = 0; k < n_val; ++k) is_val[static_cast<std::size_t>(cells[k])] = 1;
  for (std::size_t k = 0; k < data.size(); ++k) {
    (is_val[static_cast<std::size_t>(pair_cell[k])] ? data.validation : data.train)
        .push_back(k);
  }
  return data;
}

void FinetuneConfig::validate() const {
  if (!(lr > 0.0)) throw InvalidParams("fine-tune lr must be > 0");
  if (minibatch_size <= 0) throw InvalidParams("fine-tune minibatch must be > 0");
}

namespace {

ImitationGradient imitation_partial(const PolicyNet& policy,
                                    const AdaptDataset& data,
                                    std::span<const std::size_t> indices,
                                    double scale) {
  std::vector<Observation> obs(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) obs[b] = data.obs[indices[b]];
  const BatchForward fwd = forward_batch(policy, obs);
  const auto cols = static_cast<Eigen::Index>(indices.size());
  OutputGradients up;
  up.d_mean = Eigen::MatrixXd::Zero(2, cols);
  ImitationGradient out;
  for (Eigen::Index c = 0; c < cols; ++c) {
    const Action& a = data.a_star[indices[static_cast<std::size_t>(c)]];
    const double ev = fwd.mean(0, c) - a.v_cmd;
    const double ew = fwd.mean(1, c) - a.omega_cmd;
    out.loss += (ev * ev + ew * ew) * scale;
    up.d_mean(0, c) = 2.0 * ev * scale;
    up.d_mean(1, c) = 2.0 * ew * scale;
  }
  const Eigen::VectorXd full = backward_batch(policy, fwd, up).flatten();
  out.grad = full.head(static_cast<Eigen::Index>(policy.mean_path_parameter_count()));
  return out;
}

}  // namespace

ImitationGradient imitation_loss_gradient(const PolicyNet& policy,
                                          const AdaptDataset& data,
                                          std::span<const std::size_t> indices) {
  if (indices.empty()) throw InvalidParams("empty imitation batch");
  const double scale = 1.0 / static_cast<double>(indices.size());
  const std::size_t chunk = kGradientChunkImitation;
  const std::size_t chunks = (indices.size() + chunk - 1) / chunk;
  std::vector<ImitationGradient> parts(chunks);
#pragma omp parallel for schedule(static, 1)
  for (int c = 0; c < static_cast<int>(chunks); ++c) {
    const std::size_t start = static_cast<std::size_t>(c) * chunk;
    const std::size_t len = std::min(chunk, indices.size() - start);
    parts[static_cast<std::size_t>(c)] =
        imitation_partial(policy, data, indices.subspan(start, len), scale);
  }
  ImitationGradient total = std::move(parts[0]);
  for (std::size_t c = 1; c < chunks; ++c) {
    total.loss += parts[c].loss;
    total.grad += parts[c].grad;
  }
  return total;
}

ImitationGradient imitation_loss_gradient_serial(
    const PolicyNet& policy, const AdaptDataset& data,
    std::span<const std::size_t> indices) {
  if (indices.empty()) throw InvalidParams("empty imitation batch");
  const double scale = 1.0 / static_cast<double>(indices.size());
  const std::size_t chunk = kGradientChunkImitation;
  ImitationGradient total;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const std::size_t len = std::min(chunk, indices.size() - start);
    ImitationGradient part =
        imitation_partial(policy, data, indices.subspan(start, len), scale);
    if (start == 0) {
      total = std::move(part);
    } else {
      total.loss += part.loss;
      total.grad += part.grad;
    }
  }
  return total;
}

double imitation_mse(const PolicyNet& policy, const AdaptDataset& data,
                     std::span<const std::size_t> indices) {
  if (indices.empty()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += 1024) {
    const std::size_t len = std::min<std::size_t>(1024, indices.size() - start);
    std::vector<Observation> obs(len);
    for (std::size_t b = 0; b < len; ++b) obs[b] = data.obs[indices[start + b]];
    const BatchForward fwd = forward_batch(policy, obs);
    for (std::size_t b = 0; b < len; ++b) {
      const Action& a = data.a_star[indices[start + b]];
      const auto c = static_cast<Eigen::Index>(b);
      const double ev = fwd.mean(0, c) - a.v_cmd;
      const double ew = fwd.mean(1, c) - a.omega_cmd;
      sum += ev * ev + ew * ew;
    }
  }
  return sum / static_cast<double>(indices.size());
}

FinetuneResult finetune(const PolicyNet& policy, const AdaptDataset& data,
                        int epochs, const FinetuneConfig& cfg,
                        std::uint64_t seed) {
  cfg.validate();
  if (epochs < 0) throw InvalidParams("epochs must be >= 0");
  FinetuneResult result{policy, {}, {}, {}};
  if (epochs == 0) return result;
  if (data.train.empty()) throw InvalidParams("fine-tuning needs training pairs");

  PolicyNet& net = result.policy;
  Eigen::VectorXd params = net.flatten();
  Adam adam(net.mean_path_parameter_count(), cfg.adam_beta1, cfg.adam_beta2,
            cfg.adam_eps);
  Rng rng(seed);
  std::vector<std::size_t> order = data.train;
  const auto mb = static_cast<std::size_t>(cfg.minibatch_size);
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += mb) {
      const std::size_t len = std::min(mb, order.size() - start);
      const ImitationGradient g = imitation_loss_gradient(
          net, data, std::span<const std::size_t>(order.data() + start, len));
      if (!std::isfinite(g.loss) || !g.grad.allFinite()) {
        throw NonFiniteLoss("fine-tune loss became non-finite in epoch " +
                            std::to_string(e + 1));
      }
      adam.step(params, g.grad, cfg.lr);
      net.assign(params);
    }
    result.checkpoints.push_back(net);
    result.train_mse.push_back(imitation_mse(net, data, data.train));
    result.validation_mse.push_back(imitation_mse(net, data, data.validation));
  }
  return result;
}

std::vector<Scenario> canonical_scenarios(
    const std::optional<SurrogateParams>& plant) {
  TrackParams p;
  p.radius = 10.0;
  p.spacing = 0.5;
  p.speed = 4.0;
  return {
      {"circle", std::make_shared<Trajectory>(generate_track(TrackKind::kCircle, p)),
       plant},
      {"figure-eight",
       std::make_shared<Trajectory>(generate_track(TrackKind::kFigureEight, p)),
       plant},
  };
}

namespace {

TrajectoryLog run_task(const PolicyEvalTask& task, const EvalConfig& eval,
                       std::uint64_t noise_seed) {
  EvalConfig cfg = eval;
  cfg.env.surrogate = task.scenario->plant;
  return evaluate_policy(*task.policy, task.scenario->track, cfg, noise_seed);
}

}  // namespace

std::vector<TrajectoryLog> run_policy_tasks(std::span<const PolicyEvalTask> tasks,
                                            const EvalConfig& eval,
                                            std::uint64_t noise_seed) {
  std::vector<TrajectoryLog> logs(tasks.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (int k = 0; k < static_cast<int>(tasks.size()); ++k) {
    const auto i = static_cast<std::size_t>(k);
    logs[i] = run_task(tasks[i], eval, noise_seed);
  }
  return logs;
}

std::vector<TrajectoryLog> run_policy_tasks_serial(
    std::span<const PolicyEvalTask> tasks, const EvalConfig& eval,
    std::uint64_t noise_seed) {
  std::vector<TrajectoryLog> logs;
  logs.reserve(tasks.size());
  for (const auto& t : tasks) logs.push_back(run_task(t, eval, noise_seed));
  return logs;
}

double scored_max_abs_de(const Metrics& m, double cutoff) {
  return m.completed ? m.max_abs_de : std::max(cutoff, m.max_abs_de);
}

EpochSelection select_epoch(
    const std::vector<std::pair<int, PolicyNet>>& checkpoints,
    const std::vector<Scenario>& scenarios, const EvalConfig& eval,
    std::uint64_t noise_seed) {
  if (checkpoints.empty()) throw InvalidParams("select_epoch needs a checkpoint");
  if (scenarios.empty()) throw InvalidParams("select_epoch needs a scenario");
  std::vector<PolicyEvalTask> tasks;
  for (const auto& [epoch, net] : checkpoints) {
    for (const auto& sc : scenarios) tasks.push_back({&net, &sc});
  }
  const auto logs = run_policy_tasks(tasks, eval, noise_seed);

  EpochSelection sel;
  const double cutoff = eval.env.divergence_cutoff;
  double best = std::numeric_limits<double>::infinity();
  std::size_t t = 0;
  for (const auto& [epoch, net] : checkpoints) {
    double score = 0.0;
    for (const auto& sc : scenarios) {
      const Metrics m = compute_metrics(logs[t++], *sc.track, cutoff);
      score += scored_max_abs_de(m, cutoff);
      sel.report.push_back({epoch, sc.name, m});
    }
    score /= static_cast<double>(scenarios.size());
    sel.epochs.push_back(epoch);
    sel.scores.push_back(score);
    if (score < best) {
      best = score;
      sel.best_epoch = epoch;
    }
  }
  return sel;
}

void save_epoch_report(const EpochSelection& sel,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write epoch report " + path.string());
  out << std::setprecision(17) << "epoch,scenario,max_pos_de,max_neg_de,mean_abs_de\n";
  for (const auto& r : sel.report) {
    out << r.epoch << ',' << r.scenario << ',' << r.metrics.max_pos_de << ','
        << r.metrics.max_neg_de << ',' << r.metrics.mean_abs_de << '\n';
  }
}

}  // namespace trackrl
