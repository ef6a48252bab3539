#include "trackrl/pipeline.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace trackrl {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::vector<std::shared_ptr<const Trajectory>> training_tracks(
    const TrainTrackSpec& spec, std::uint64_t seed) {
  if (spec.random_count < 0) throw InvalidParams("random_count must be >= 0");
  if (!(spec.speed_min >= 0.0) || !(spec.speed_max >= spec.speed_min) ||
      !std::isfinite(spec.speed_max)) {
    throw InvalidParams("training speed range must satisfy 0 <= min <= max");
  }
  std::vector<std::shared_ptr<const Trajectory>> tracks;
  Rng rng(seed);
  std::uniform_real_distribution<double> speed(spec.speed_min, spec.speed_max);
  auto draw_speed = [&] {
    return spec.speed_min == spec.speed_max ? spec.speed_min : speed(rng);
  };
  for (int k = 0; k < spec.random_count; ++k) {
    RandomTrackParams p = spec.random;
    if (k % 2 == 1) p.ramp = spec.sharp_ramp;
    p.speed = draw_speed();
    tracks.push_back(std::make_shared<Trajectory>(generate_random_track(p, rng)));
  }
  for (double r : spec.figure_eight_radii) {
    TrackParams p;
    p.radius = r;
    p.spacing = spec.random.spacing;
    p.speed = draw_speed();
    tracks.push_back(
        std::make_shared<Trajectory>(generate_track(TrackKind::kFigureEight, p)));
  }
  if (tracks.empty()) throw InvalidParams("training track set is empty");
  return tracks;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

// Reads j[key] into out when present.
template <typename T>
void opt(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->template get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys,
                    const std::string& where) {
  if (!j.is_object()) throw InvalidParams(where + " must be a JSON object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw InvalidParams("unknown key '" + k + "' in " + where);
  }
}

template <int N>
void opt_vec(const json& j, const char* key, Eigen::Matrix<double, N, 1>& out) {
  if (auto it = j.find(key); it != j.end()) {
    const auto v = it->get<std::vector<double>>();
    if (static_cast<int>(v.size()) != N) {
      throw InvalidParams(std::string(key) + " needs " + std::to_string(N) + " values");
    }
    for (int k = 0; k < N; ++k) out[k] = v[static_cast<std::size_t>(k)];
  }
}

ordered_json tracks_json(const TrainTrackSpec& t) {
  return {{"random_count", t.random_count},
          {"length", t.random.length},
          {"spacing", t.random.spacing},
          {"speed_min", t.speed_min},
          {"speed_max", t.speed_max},
          {"max_curvature", t.random.max_curvature},
          {"min_segment", t.random.min_segment},
          {"max_segment", t.random.max_segment},
          {"ramp", t.random.ramp},
          {"sharp_ramp", t.sharp_ramp},
          {"figure_eight_radii", t.figure_eight_radii}};
}

ordered_json env_json(const EnvConfig& e) {
  return {{"beta1", e.weights.beta1},
          {"beta2", e.weights.beta2},
          {"beta3", e.weights.beta3},
          {"max_steps", e.episode.max_steps},
          {"dt", e.episode.dt},
          {"reset_jitter_pos", e.episode.reset_jitter_pos},
          {"reset_jitter_heading", e.episode.reset_jitter_heading},
          {"divergence_cutoff", e.divergence_cutoff},
          {"search_window", e.search_window}};
}

ordered_json ppo_json(const PPOConfig& p) {
  return {{"steps_per_iter", p.steps_per_iter},
          {"minibatch_size", p.minibatch_size},
          {"epochs_per_iter", p.epochs_per_iter},
          {"clip_eps", p.clip_eps},
          {"gamma", p.gamma},
          {"lambda", p.lambda},
          {"lr", p.lr},
          {"anneal_lr", p.anneal_lr},
          {"value_coef", p.value_coef},
          {"entropy_coef", p.entropy_coef},
          {"total_iters", p.total_iters},
          {"num_envs", p.num_envs},
          {"adam_beta1", p.adam_beta1},
          {"adam_beta2", p.adam_beta2},
          {"adam_eps", p.adam_eps},
          {"max_grad_norm", p.max_grad_norm},
          {"init_log_std", p.init_log_std},
          {"bootstrap_on_divergence", p.bootstrap_on_divergence}};
}

ordered_json grid_json(const GridSpec& g) {
  return {{"v_values", g.v_values},
          {"w_values", g.w_values},
          {"hold_duration", g.hold_duration},
          {"repeats", g.repeats}};
}

ordered_json finetune_json(const ExperimentConfig& c) {
  return {{"epochs", c.epochs},
          {"lr", c.finetune.lr},
          {"minibatch_size", c.finetune.minibatch_size},
          {"adam_beta1", c.finetune.adam_beta1},
          {"adam_beta2", c.finetune.adam_beta2},
          {"adam_eps", c.finetune.adam_eps},
          {"spacing", c.dataset.spacing},
          {"validation_fraction", c.dataset.validation_fraction}};
}

std::vector<double> to_vec(const auto& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

ordered_json ilqr_json(const ILQRConfig& c) {
  return {{"horizon", c.horizon},
          {"dt", c.dt},
          {"state_cost", to_vec(c.state_cost)},
          {"control_cost", to_vec(c.control_cost)},
          {"terminal_cost", to_vec(c.terminal_cost)},
          {"max_iters", c.max_iters},
          {"reg_init", c.reg_init},
          {"reg_max", c.reg_max},
          {"tol", c.tol}};
}

ordered_json eval_json(const EvalConfig& e) {
  return {{"step_slack", e.step_slack}, {"min_steps", e.min_steps}};
}

ordered_json surrogate_json(const SurrogateParams& p) {
  return {{"gain_v", p.gain_v},           {"gain_w", p.gain_w},
          {"tau_v", p.tau_v},             {"tau_w", p.tau_w},
          {"delay_steps", p.delay_steps}, {"slip_gain", p.slip_gain},
          {"noise_std_v", p.noise_std_v}, {"noise_std_w", p.noise_std_w}};
}

ordered_json config_json(const ExperimentConfig& c) {
  ordered_json surrogate = {{"preset", c.preset}};
  if (c.surrogate_file) surrogate["file"] = c.surrogate_file->string();
  return {{"seed", c.seed ? json(*c.seed) : json(nullptr)},
          {"output_dir", c.output_dir.string()},
          {"surrogate", surrogate},
          {"scenarios", c.scenarios},
          {"training_tracks", tracks_json(c.tracks)},
          {"env", env_json(c.env)},
          {"ppo", ppo_json(c.ppo)},
          {"grid", grid_json(c.grid)},
          {"finetune", finetune_json(c)},
          {"ilqr", ilqr_json(c.ilqr)},
          {"eval", eval_json(c.eval)}};
}

}  // namespace

void ExperimentConfig::validate() const {
  if (!seed) throw InvalidParams("experiment config needs a seed");
  if (surrogate_file && !fs::exists(*surrogate_file)) {
    throw MissingArtifact("surrogate file not found: " + surrogate_file->string());
  }
  (void)surrogate();
  if (scenarios.empty()) throw InvalidParams("at least one scenario is required");
  for (const auto& s : scenarios) (void)parse_track_kind(s);
  ppo.validate();
  grid.validate();
  finetune.validate();
  ilqr.validate();
  if (epochs.empty()) throw InvalidParams("epoch list is empty");
  for (std::size_t k = 0; k < epochs.size(); ++k) {
    if (epochs[k] < 1 || (k > 0 && epochs[k] <= epochs[k - 1])) {
      throw InvalidParams("epochs must be positive and strictly increasing");
    }
  }
}

SurrogateParams ExperimentConfig::surrogate() const {
  if (surrogate_file) return load_surrogate_params(*surrogate_file);
  return surrogate_preset(preset);
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.ppo.steps_per_iter = 8192;
  c.ppo.total_iters = 240;  // ~1.97M environment steps
  c.ppo.entropy_coef = 0.03;
  c.ppo.bootstrap_on_divergence = true;
  c.ppo.anneal_lr = true;
  // With the on-path grid data, larger steps forget the policy's offset
  // feedback within the first few epochs.
  c.finetune.lr = 2e-5;
  return c;
}

ExperimentConfig experiment_config_from_json(const std::string& text,
                                             ExperimentConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidParams(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    reject_unknown(j, {"seed", "output_dir", "surrogate", "scenarios",
                       "training_tracks", "env", "ppo", "grid", "finetune",
                       "ilqr", "eval"},
                   "config");
    if (auto it = j.find("seed"); it != j.end() && !it->is_null()) {
      c.seed = it->get<std::uint64_t>();
    }
    if (auto it = j.find("output_dir"); it != j.end()) {
      c.output_dir = it->get<std::string>();
    }
    if (auto it = j.find("surrogate"); it != j.end()) {
      reject_unknown(*it, {"preset", "file"}, "surrogate");
      opt(*it, "preset", c.preset);
      if (auto f = it->find("file"); f != it->end()) c.surrogate_file = f->get<std::string>();
    }
    opt(j, "scenarios", c.scenarios);
    if (auto it = j.find("training_tracks"); it != j.end()) {
      const json& t = *it;
      reject_unknown(t, {"random_count", "length", "spacing", "speed_min", "speed_max",
                         "max_curvature", "min_segment", "max_segment", "ramp",
                         "sharp_ramp", "figure_eight_radii"},
                     "training_tracks");
      opt(t, "random_count", c.tracks.random_count);
      opt(t, "length", c.tracks.random.length);
      opt(t, "spacing", c.tracks.random.spacing);
      opt(t, "speed_min", c.tracks.speed_min);
      opt(t, "speed_max", c.tracks.speed_max);
      opt(t, "max_curvature", c.tracks.random.max_curvature);
      opt(t, "min_segment", c.tracks.random.min_segment);
      opt(t, "max_segment", c.tracks.random.max_segment);
      opt(t, "ramp", c.tracks.random.ramp);
      opt(t, "sharp_ramp", c.tracks.sharp_ramp);
      opt(t, "figure_eight_radii", c.tracks.figure_eight_radii);
    }
    if (auto it = j.find("env"); it != j.end()) {
      const json& e = *it;
      reject_unknown(e, {"beta1", "beta2", "beta3", "max_steps", "dt",
                         "reset_jitter_pos", "reset_jitter_heading",
                         "divergence_cutoff", "search_window"},
                     "env");
      opt(e, "beta1", c.env.weights.beta1);
      opt(e, "beta2", c.env.weights.beta2);
      opt(e, "beta3", c.env.weights.beta3);
      opt(e, "max_steps", c.env.episode.max_steps);
      opt(e, "dt", c.env.episode.dt);
      opt(e, "reset_jitter_pos", c.env.episode.reset_jitter_pos);
      opt(e, "reset_jitter_heading", c.env.episode.reset_jitter_heading);
      opt(e, "divergence_cutoff", c.env.divergence_cutoff);
      opt(e, "search_window", c.env.search_window);
    }
    if (auto it = j.find("ppo"); it != j.end()) {
      const json& p = *it;
      reject_unknown(p, {"steps_per_iter", "minibatch_size", "epochs_per_iter",
                         "clip_eps", "gamma", "lambda", "lr", "anneal_lr",
                         "value_coef", "entropy_coef", "total_iters", "num_envs",
                         "adam_beta1", "adam_beta2", "adam_eps", "max_grad_norm",
                         "init_log_std", "bootstrap_on_divergence"},
                     "ppo");
      opt(p, "steps_per_iter", c.ppo.steps_per_iter);
      opt(p, "minibatch_size", c.ppo.minibatch_size);
      opt(p, "epochs_per_iter", c.ppo.epochs_per_iter);
      opt(p, "clip_eps", c.ppo.clip_eps);
      opt(p, "gamma", c.ppo.gamma);
      opt(p, "lambda", c.ppo.lambda);
      opt(p, "lr", c.ppo.lr);
      opt(p, "anneal_lr", c.ppo.anneal_lr);
      opt(p, "value_coef", c.ppo.value_coef);
      opt(p, "entropy_coef", c.ppo.entropy_coef);
      opt(p, "total_iters", c.ppo.total_iters);
      opt(p, "num_envs", c.ppo.num_envs);
      opt(p, "adam_beta1", c.ppo.adam_beta1);
      opt(p, "adam_beta2", c.ppo.adam_beta2);
      opt(p, "adam_eps", c.ppo.adam_eps);
      opt(p, "max_grad_norm", c.ppo.max_grad_norm);
      opt(p, "init_log_std", c.ppo.init_log_std);
      opt(p, "bootstrap_on_divergence", c.ppo.bootstrap_on_divergence);
    }
    if (auto it = j.find("grid"); it != j.end()) {
      reject_unknown(*it, {"v_values", "w_values", "hold_duration", "repeats"}, "grid");
      opt(*it, "v_values", c.grid.v_values);
      opt(*it, "w_values", c.grid.w_values);
      opt(*it, "hold_duration", c.grid.hold_duration);
      opt(*it, "repeats", c.grid.repeats);
    }
    if (auto it = j.find("finetune"); it != j.end()) {
      const json& f = *it;
      reject_unknown(f, {"epochs", "lr", "minibatch_size", "adam_beta1",
                         "adam_beta2", "adam_eps", "spacing",
                         "validation_fraction"},
                     "finetune");
      opt(f, "epochs", c.epochs);
      opt(f, "lr", c.finetune.lr);
      opt(f, "minibatch_size", c.finetune.minibatch_size);
      opt(f, "adam_beta1", c.finetune.adam_beta1);
      opt(f, "adam_beta2", c.finetune.adam_beta2);
      opt(f, "adam_eps", c.finetune.adam_eps);
      opt(f, "spacing", c.dataset.spacing);
      opt(f, "validation_fraction", c.dataset.validation_fraction);
    }
    if (auto it = j.find("ilqr"); it != j.end()) {
      const json& q = *it;
      reject_unknown(q, {"horizon", "dt", "state_cost", "control_cost",
                         "terminal_cost", "max_iters", "reg_init", "reg_max",
                         "tol"},
                     "ilqr");
      opt(q, "horizon", c.ilqr.horizon);
      opt(q, "dt", c.ilqr.dt);
      opt_vec(q, "state_cost", c.ilqr.state_cost);
      opt_vec(q, "control_cost", c.ilqr.control_cost);
      opt_vec(q, "terminal_cost", c.ilqr.terminal_cost);
      opt(q, "max_iters", c.ilqr.max_iters);
      opt(q, "reg_init", c.ilqr.reg_init);
      opt(q, "reg_max", c.ilqr.reg_max);
      opt(q, "tol", c.ilqr.tol);
    }
    if (auto it = j.find("eval"); it != j.end()) {
      reject_unknown(*it, {"step_slack", "min_steps"}, "eval");
      opt(*it, "step_slack", c.eval.step_slack);
      opt(*it, "min_steps", c.eval.min_steps);
    }
  } catch (const json::exception& e) {
    throw InvalidParams(std::string("config: ") + e.what());
  }
  c.eval.env = c.env;
  c.ilqr.dt = c.env.episode.dt;
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return experiment_config_from_json(ss.str());
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  return config_json(cfg).dump(2);
}

StageSeeds derive_seeds(std::uint64_t master) {
  Rng rng(master);
  StageSeeds s;
  s.train = rng();
  s.collect = rng();
  s.split = rng();
  s.finetune = rng();
  s.eval_noise = rng();
  return s;
}

std::vector<Scenario> make_scenarios(const std::vector<std::string>& names,
                                     const std::optional<SurrogateParams>& plant) {
  TrackParams p;
  p.radius = 10.0;
  p.spacing = 0.5;
  p.speed = 4.0;
  std::vector<Scenario> out;
  for (const auto& name : names) {
    const TrackKind kind = parse_track_kind(name);
    out.push_back({std::string(to_string(kind)),
                   std::make_shared<Trajectory>(generate_track(kind, p)), plant});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports and CSV artifacts

namespace {

ordered_json metrics_json(const Metrics& m) {
  return {{"max_pos_de", m.max_pos_de},   {"max_neg_de", m.max_neg_de},
          {"max_abs_de", m.max_abs_de},   {"mean_abs_de", m.mean_abs_de},
          {"mean_vel_err", m.mean_vel_err}, {"completed", m.completed}};
}

Metrics metrics_from_json(const json& j) {
  Metrics m;
  m.max_pos_de = j.at("max_pos_de").get<double>();
  m.max_neg_de = j.at("max_neg_de").get<double>();
  m.max_abs_de = j.at("max_abs_de").get<double>();
  m.mean_abs_de = j.at("mean_abs_de").get<double>();
  m.mean_vel_err = j.at("mean_vel_err").get<double>();
  m.completed = j.at("completed").get<bool>();
  return m;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string report_to_json(const PipelineReport& r) {
  ordered_json rows = ordered_json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"controller", row.controller},
                    {"scenario", row.scenario},
                    {"metrics", metrics_json(row.metrics)}});
  }
  ordered_json epochs = ordered_json::array();
  for (std::size_t k = 0; k < r.selection.epochs.size(); ++k) {
    epochs.push_back({{"epoch", r.selection.epochs[k]},
                      {"score", r.selection.scores[k]}});
  }
  ordered_json table = ordered_json::array();
  for (const auto& row : r.selection.report) {
    table.push_back({{"epoch", row.epoch},
                     {"scenario", row.scenario},
                     {"metrics", metrics_json(row.metrics)}});
  }
  ordered_json j = {{"surrogate", r.surrogate},
                    {"selected_epoch", r.selected_epoch},
                    {"dataset_pairs", r.dataset_pairs},
                    {"skipped_segments", r.skipped_segments},
                    {"train_mse", r.train_mse},
                    {"validation_mse", r.validation_mse},
                    {"epoch_scores", epochs},
                    {"epoch_report", table},
                    {"comparison", rows}};
  return j.dump(2) + "\n";
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::string out =
      "controller,scenario,max_pos_de,max_neg_de,max_abs_de,mean_abs_de,"
      "mean_vel_err,completed\n";
  for (const auto& r : rows) {
    const Metrics& m = r.metrics;
    out += r.controller + ',' + r.scenario + ',' + fmt(m.max_pos_de) + ',' +
           fmt(m.max_neg_de) + ',' + fmt(m.max_abs_de) + ',' +
           fmt(m.mean_abs_de) + ',' + fmt(m.mean_vel_err) + ',' +
           (m.completed ? "1" : "0") + '\n';
  }
  return out;
}

void save_training_metrics(const std::vector<IterationMetrics>& metrics,
                           const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << std::setprecision(17)
      << "iter,steps,mean_reward,mean_abs_de,policy_loss,value_loss,entropy,"
         "clip_fraction\n";
  for (const auto& m : metrics) {
    out << m.iter << ',' << m.steps << ',' << m.mean_reward << ','
        << m.mean_abs_de << ',' << m.loss.policy_loss << ','
        << m.loss.value_loss << ',' << m.loss.entropy << ','
        << m.loss.clip_fraction << '\n';
  }
}

void save_finetune_loss(const FinetuneResult& result, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << std::setprecision(17) << "epoch,train_mse,validation_mse\n";
  for (std::size_t e = 0; e < result.train_mse.size(); ++e) {
    out << e + 1 << ',' << result.train_mse[e] << ','
        << result.validation_mse[e] << '\n';
  }
}

std::string layout::epoch_checkpoint(int epoch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/epoch_%03d.json", kAdaptDir, epoch);
  return buf;
}

// ---------------------------------------------------------------------------
// Hashing and locking

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::string hex;
  static const char* kDigits = "0123456789abcdef";
  for (unsigned int k = 0; k < len; ++k) {
    hex += kDigits[digest[k] >> 4];
    hex += kDigits[digest[k] & 15];
  }
  return hex;
}

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("expected artifact not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / layout::kLock) {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw StageFailed("output directory " + dir.string() +
                      " is locked by another pipeline (" + path_.string() + ")");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  if (::write(fd, pid.data(), pid.size()) < 0) {
    // The lock is the file's existence; its content is informational.
  }
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("expected artifact not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Stages {
 public:
  Stages(fs::path out, std::ostream* progress)
      : out_(std::move(out)), progress_(progress) {
    fs::create_directories(out_ / layout::kStampsDir);
  }

  // Runs `body` unless the stamp for `name` equals `key` and every output
  // exists; returns true when the body ran.
  template <typename F>
  bool run(const std::string& name, const std::string& key,
           const std::vector<std::string>& outputs, F&& body) {
    const fs::path stamp = out_ / layout::kStampsDir / (name + ".stamp");
    bool fresh = fs::exists(stamp) && read_text(stamp) == key;
    for (const auto& o : outputs) fresh = fresh && fs::exists(out_ / o);
    if (fresh) {
      log(name, "up to date, skipped");
      return false;
    }
    const auto t0 = std::chrono::steady_clock::now();
    log(name, "running");
    try {
      fs::remove(stamp);
      body();
      write_text(stamp, key);
    } catch (const StageFailed&) {
      throw;
    } catch (const std::exception& e) {
      throw StageFailed("stage '" + name + "' failed: " + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream msg;
    msg << "done in " << std::fixed << std::setprecision(1) << secs << " s";
    log(name, msg.str());
    return true;
  }

  // Unstamped stage: always runs, failures still name the stage.
  template <typename F>
  void always(const std::string& name, F&& body) {
    try {
      body();
    } catch (const std::exception& e) {
      throw StageFailed("stage '" + name + "' failed: " + e.what());
    }
    log(name, "written");
  }

  template <typename F>
  auto load(const std::string& name, F&& body) {
    try {
      return body();
    } catch (const std::exception& e) {
      throw StageFailed("stage '" + name + "' failed: " + e.what());
    }
  }

  void log(const std::string& name, const std::string& msg) const {
    if (progress_) *progress_ << "[" << name << "] " << msg << std::endl;
  }

  fs::path path(const std::string& rel) const { return out_ / rel; }

 private:
  fs::path out_;
  std::ostream* progress_;
};

std::string key_of(std::initializer_list<std::string> parts) {
  std::string joined;
  for (const auto& p : parts) {
    joined += p;
    joined += '\x1f';
  }
  return sha256_hex(joined);
}

std::string log_name(const std::string& controller, const std::string& scenario) {
  return std::string(layout::kLogsDir) + "/" + controller + "_" + scenario + ".csv";
}

void save_selection(const EpochSelection& sel, const fs::path& path) {
  ordered_json rows = ordered_json::array();
  for (const auto& r : sel.report) {
    rows.push_back({{"epoch", r.epoch},
                    {"scenario", r.scenario},
                    {"metrics", metrics_json(r.metrics)}});
  }
  ordered_json j = {{"best_epoch", sel.best_epoch},
                    {"epochs", sel.epochs},
                    {"scores", sel.scores},
                    {"report", rows}};
  write_text(path, j.dump(2) + "\n");
}

EpochSelection load_selection(const fs::path& path) {
  const json j = json::parse(read_text(path));
  EpochSelection sel;
  sel.best_epoch = j.at("best_epoch").get<int>();
  sel.epochs = j.at("epochs").get<std::vector<int>>();
  sel.scores = j.at("scores").get<std::vector<double>>();
  for (const auto& r : j.at("report")) {
    sel.report.push_back({r.at("epoch").get<int>(), r.at("scenario").get<std::string>(),
                          metrics_from_json(r.at("metrics"))});
  }
  return sel;
}

}  // namespace

PipelineReport run_pipeline(const ExperimentConfig& cfg_in, std::ostream* progress) {
  ExperimentConfig cfg = cfg_in;
  cfg.eval.env = cfg.env;
  cfg.eval.env.surrogate.reset();
  cfg.ilqr.dt = cfg.env.episode.dt;
  cfg.validate();

  const fs::path out = cfg.output_dir;
  DirectoryLock lock(out);
  fs::create_directories(out / layout::kAdaptDir);
  fs::create_directories(out / layout::kLogsDir);
  Stages stages(out, progress);

  const StageSeeds seeds = derive_seeds(*cfg.seed);
  const SurrogateParams surrogate = cfg.surrogate();
  const std::string surrogate_key = surrogate_json(surrogate).dump();
  const std::string seed_key = std::to_string(*cfg.seed);
  const std::string env_key = env_json(cfg.env).dump();
  const std::string eval_key = eval_json(cfg.eval).dump() + env_key +
                               ordered_json(cfg.scenarios).dump() +
                               surrogate_key + seed_key;
  const auto scenarios = make_scenarios(cfg.scenarios, surrogate);
  std::vector<std::string> scenario_logs_v, scenario_logs_a, scenario_logs_i;
  for (const auto& sc : scenarios) {
    scenario_logs_v.push_back(log_name("vanilla", sc.name));
    scenario_logs_a.push_back(log_name("adapted", sc.name));
    scenario_logs_i.push_back(log_name("ilqr", sc.name));
  }

  // (1) Baseline PPO on the kinematic simulator.
  const std::string train_key =
      key_of({"train", seed_key, tracks_json(cfg.tracks).dump(), env_key,
              ppo_json(cfg.ppo).dump()});
  stages.run("train", train_key, {layout::kPolicy, layout::kTrainMetrics}, [&] {
    EnvConfig env = cfg.env;
    env.surrogate.reset();
    const auto tracks = training_tracks(cfg.tracks, seeds.train);
    int last_reported = 0;
    const TrainResult res = train(
        cfg.ppo, env, tracks, seeds.train,
        [&](const IterationMetrics& m, const PolicyNet&) {
          if (m.iter - last_reported >= 20 || m.iter == cfg.ppo.total_iters) {
            last_reported = m.iter;
            std::ostringstream msg;
            msg << "iter " << m.iter << " steps " << m.steps << " mean|de| "
                << std::setprecision(3) << m.mean_abs_de;
            stages.log("train", msg.str());
          }
        });
    save_checkpoint(res.policy, stages.path(layout::kPolicy));
    save_training_metrics(res.metrics, stages.path(layout::kTrainMetrics));
  });
  const PolicyNet vanilla =
      stages.load("train", [&] { return load_checkpoint(stages.path(layout::kPolicy)); });
  const std::string policy_hash = file_sha256(stages.path(layout::kPolicy));

  auto eval_policy_stage = [&](const std::string& name, const PolicyNet& policy,
                               const std::string& policy_key,
                               const std::vector<std::string>& logs) {
    stages.run(name, key_of({name, policy_key, eval_key}), logs, [&] {
      std::vector<PolicyEvalTask> tasks;
      for (const auto& sc : scenarios) tasks.push_back({&policy, &sc});
      const auto runs = run_policy_tasks(tasks, cfg.eval, seeds.eval_noise);
      for (std::size_t k = 0; k < runs.size(); ++k) {
        save_trajectory_log(runs[k], stages.path(logs[k]));
      }
    });
  };

  // (2) Vanilla policy on the surrogate.
  eval_policy_stage("eval-vanilla", vanilla, policy_hash, scenario_logs_v);

  // (3) Grid data on the surrogate.
  const std::string collect_key =
      key_of({"collect", seed_key, surrogate_key, grid_json(cfg.grid).dump(),
              env_key});
  stages.run("collect", collect_key, {layout::kDriveLog}, [&] {
    const DriveLog log =
        collect_grid_data(surrogate, cfg.grid, cfg.env.episode.dt, seeds.collect);
    save_drive_log(log, stages.path(layout::kDriveLog));
  });
  const std::string drive_hash = file_sha256(stages.path(layout::kDriveLog));

  // (4) Supervised fine-tuning; checkpoints kept at the listed epochs.
  std::vector<std::string> adapt_outputs{std::string(layout::kAdaptDir) + "/summary.json",
                                         layout::kFinetuneLoss};
  for (int e : cfg.epochs) adapt_outputs.push_back(layout::epoch_checkpoint(e));
  const std::string adapt_key = key_of({"adapt", seed_key, policy_hash, drive_hash,
                                        finetune_json(cfg).dump()});
  stages.run("adapt", adapt_key, adapt_outputs, [&] {
    const DriveLog log = load_drive_log(stages.path(layout::kDriveLog));
    DatasetConfig dcfg = cfg.dataset;
    dcfg.split_seed = seeds.split;
    const AdaptDataset data = build_dataset(log, dcfg);
    if (data.skipped_segments > 0) {
      stages.log("adapt", std::to_string(data.skipped_segments) +
                              " segments too short for a full lookahead, skipped");
    }
    const FinetuneResult res =
        finetune(vanilla, data, cfg.epochs.back(), cfg.finetune, seeds.finetune);
    for (int e : cfg.epochs) {
      save_checkpoint(res.checkpoints[static_cast<std::size_t>(e - 1)],
                      stages.path(layout::epoch_checkpoint(e)));
    }
    save_finetune_loss(res, stages.path(layout::kFinetuneLoss));
    const ordered_json summary = {{"pairs", data.size()},
                                  {"train_pairs", data.train.size()},
                                  {"validation_pairs", data.validation.size()},
                                  {"skipped_segments", data.skipped_segments},
                                  {"train_mse", res.train_mse},
                                  {"validation_mse", res.validation_mse}};
    write_text(stages.path(std::string(layout::kAdaptDir) + "/summary.json"),
               summary.dump(2) + "\n");
  });

  // (5) Epoch selection on the surrogate scenarios.
  std::string checkpoints_key;
  for (int e : cfg.epochs) {
    checkpoints_key += file_sha256(stages.path(layout::epoch_checkpoint(e)));
  }
  const std::string selection_file = std::string(layout::kAdaptDir) + "/selection.json";
  stages.run("select", key_of({"select", checkpoints_key, eval_key}),
             {layout::kEpochReport, layout::kSelected, selection_file}, [&] {
               std::vector<std::pair<int, PolicyNet>> cps;
               for (int e : cfg.epochs) {
                 cps.emplace_back(e, load_checkpoint(stages.path(layout::epoch_checkpoint(e))));
               }
               const EpochSelection sel =
                   select_epoch(cps, scenarios, cfg.eval, seeds.eval_noise);
               save_epoch_report(sel, stages.path(layout::kEpochReport));
               save_selection(sel, stages.path(selection_file));
               write_text(stages.path(layout::kSelected),
                          std::to_string(sel.best_epoch) + "\n");
             });
  const EpochSelection selection =
      stages.load("select", [&] { return load_selection(stages.path(selection_file)); });

  // (6) Adapted policy on the surrogate.
  const std::string adapted_file = layout::epoch_checkpoint(selection.best_epoch);
  const PolicyNet adapted =
      stages.load("eval-adapted", [&] { return load_checkpoint(stages.path(adapted_file)); });
  eval_policy_stage("eval-adapted", adapted, file_sha256(stages.path(adapted_file)),
                    scenario_logs_a);

  // (7) ILQR baseline on the surrogate (planning on the kinematic model).
  stages.run("ilqr", key_of({"ilqr", ilqr_json(cfg.ilqr).dump(), eval_key}),
             scenario_logs_i, [&] {
               for (std::size_t k = 0; k < scenarios.size(); ++k) {
                 const TrackRun run = ilqr_track(scenarios[k].track, surrogate,
                                                 cfg.ilqr, cfg.eval, seeds.eval_noise);
                 save_trajectory_log(run.log, stages.path(scenario_logs_i[k]));
               }
             });

  // (8) Report, rebuilt from the persisted artifacts every time.
  PipelineReport report;
  stages.always("report", [&] {
               report.surrogate = cfg.surrogate_file ? cfg.surrogate_file->string()
                                                     : cfg.preset;
               report.selected_epoch = selection.best_epoch;
               report.selection = selection;
               const json summary = json::parse(
                   read_text(stages.path(std::string(layout::kAdaptDir) + "/summary.json")));
               report.dataset_pairs = summary.at("pairs").get<std::size_t>();
               report.skipped_segments = summary.at("skipped_segments").get<int>();
               for (const auto& v : summary.at("train_mse")) {
                 report.train_mse.push_back(v.is_null() ? NAN : v.get<double>());
               }
               for (const auto& v : summary.at("validation_mse")) {
                 report.validation_mse.push_back(v.is_null() ? NAN : v.get<double>());
               }
               const std::pair<const char*, const std::vector<std::string>*> groups[] = {
                   {"vanilla", &scenario_logs_v},
                   {"adapted", &scenario_logs_a},
                   {"ilqr", &scenario_logs_i}};
               for (const auto& [controller, logs] : groups) {
                 for (std::size_t k = 0; k < scenarios.size(); ++k) {
                   const TrajectoryLog log = load_trajectory_log(stages.path((*logs)[k]));
                   report.rows.push_back(
                       {controller, scenarios[k].name,
                        compute_metrics(log, *scenarios[k].track,
                                        cfg.env.divergence_cutoff)});
                 }
               }
               write_text(stages.path(layout::kReport), report_to_json(report));
               write_text(stages.path(layout::kCompare), comparison_csv(report.rows));
             });
  return report;
}

}  // namespace trackrl
