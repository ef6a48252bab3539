#include "trackrl/net.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace trackrl {
namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kLn2 = 0.69314718055994530942;
constexpr double kRangeScale = 10.0;
constexpr double kSpeedScale = 5.0;
constexpr double kVHalf = kMaxLinearVelocity / 2.0;

// log(1 - tanh(u)^2), stable for large |u|.
double log_one_minus_tanh2(double u) {
  const double a = std::abs(u);
  return 2.0 * (kLn2 - a - std::log1p(std::exp(-2.0 * a)));
}

DenseLayer random_layer(Eigen::Index in, Eigen::Index out, double gain,
                        Rng& rng) {
  // Glorot-uniform scaled by gain.
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  DenseLayer l{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
  for (Eigen::Index r = 0; r < out; ++r)
    for (Eigen::Index c = 0; c < in; ++c) l.weight(r, c) = u(rng);
  return l;
}

DenseLayer zero_layer(Eigen::Index in, Eigen::Index out) {
  return {Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)};
}

template <typename Fn>
void for_each_layer(PolicyNet& p, Fn&& fn) {
  for (auto& l : p.trunk.layers) fn(l);
  for (auto& l : p.mean_head.layers) fn(l);
  for (auto& l : p.value_head.layers) fn(l);
}

template <typename Fn>
void for_each_layer(const PolicyNet& p, Fn&& fn) {
  for (const auto& l : p.trunk.layers) fn(l);
  for (const auto& l : p.mean_head.layers) fn(l);
  for (const auto& l : p.value_head.layers) fn(l);
}

}  // namespace

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void Mlp::validate() const {
  if (layers.empty()) throw ShapeMismatch("network has no layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (layers[k].bias.size() != layers[k].weight.rows()) {
      throw ShapeMismatch("layer " + std::to_string(k) +
                          ": bias length does not match weight rows");
    }
    if (k > 0 && layers[k].weight.cols() != layers[k - 1].weight.rows()) {
      throw ShapeMismatch("layer " + std::to_string(k) +
                          ": input width does not match previous layer");
    }
  }
}

void Mlp::set_zero() {
  for (auto& l : layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

Eigen::MatrixXd mlp_forward(const Mlp& net, const Eigen::MatrixXd& input,
                            MlpCache* cache) {
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(input);
  }
  Eigen::MatrixXd a = input;
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const auto& l = net.layers[k];
    Eigen::MatrixXd z = l.weight * a;
    z.colwise() += l.bias;
    const bool last = k + 1 == net.layers.size();
    if (!last || net.activate_output) z = z.array().tanh();
    a = std::move(z);
    if (cache) cache->activations.push_back(a);
  }
  return a;
}

Eigen::MatrixXd mlp_backward(const Mlp& net, const MlpCache& cache,
                             const Eigen::MatrixXd& d_output, Mlp& grad) {
  Eigen::MatrixXd delta = d_output;
  for (std::size_t k = net.layers.size(); k-- > 0;) {
    const bool last = k + 1 == net.layers.size();
    if (!last || net.activate_output) {
      const auto& out = cache.activations[k + 1];
      delta = delta.array() * (1.0 - out.array().square());
    }
    const auto& in = cache.activations[k];
    grad.layers[k].weight.noalias() += delta * in.transpose();
    grad.layers[k].bias += delta.rowwise().sum();
    delta = net.layers[k].weight.transpose() * delta;
  }
  return delta;
}

PolicyNet PolicyNet::zeros(Eigen::Index hidden) {
  PolicyNet p;
  p.trunk.activate_output = true;
  p.trunk.layers = {zero_layer(kObsDim, hidden), zero_layer(hidden, hidden)};
  p.mean_head.layers = {zero_layer(hidden, 2)};
  p.value_head.layers = {zero_layer(hidden, 1)};
  p.log_std.setZero();
  return p;
}

PolicyNet PolicyNet::random(Rng& rng, double init_log_std, Eigen::Index hidden) {
  PolicyNet p;
  p.trunk.activate_output = true;
  p.trunk.layers = {random_layer(kObsDim, hidden, 1.0, rng),
                    random_layer(hidden, hidden, 1.0, rng)};
  p.mean_head.layers = {random_layer(hidden, 2, 0.01, rng)};
  p.value_head.layers = {random_layer(hidden, 1, 1.0, rng)};
  p.log_std.setConstant(init_log_std);
  return p;
}

void PolicyNet::validate() const {
  trunk.validate();
  mean_head.validate();
  value_head.validate();
  if (trunk.input_dim() != static_cast<Eigen::Index>(kObsDim)) {
    throw ShapeMismatch("trunk input must be " + std::to_string(kObsDim));
  }
  if (mean_head.input_dim() != trunk.output_dim() ||
      value_head.input_dim() != trunk.output_dim()) {
    throw ShapeMismatch("head input does not match trunk output");
  }
  if (mean_head.output_dim() != 2 || value_head.output_dim() != 1) {
    throw ShapeMismatch("mean head must output 2 values and value head 1");
  }
}

void PolicyNet::set_zero() {
  trunk.set_zero();
  mean_head.set_zero();
  value_head.set_zero();
  log_std.setZero();
}

Eigen::Vector2d PolicyNet::clamped_log_std() const {
  return log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
}

std::size_t PolicyNet::parameter_count() const {
  return mean_path_parameter_count() + value_head.parameter_count() + 2;
}

std::size_t PolicyNet::mean_path_parameter_count() const {
  return trunk.parameter_count() + mean_head.parameter_count();
}

Eigen::VectorXd PolicyNet::flatten() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index pos = 0;
  for_each_layer(*this, [&](const DenseLayer& l) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
        flat[pos++] = l.weight(r, c);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) flat[pos++] = l.bias[r];
  });
  flat[pos++] = log_std[0];
  flat[pos++] = log_std[1];
  return flat;
}

void PolicyNet::assign(const Eigen::VectorXd& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count())) {
    throw ShapeMismatch("flat parameter vector has the wrong length");
  }
  Eigen::Index pos = 0;
  for_each_layer(*this, [&](DenseLayer& l) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
        l.weight(r, c) = flat[pos++];
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = flat[pos++];
  });
  log_std[0] = flat[pos++];
  log_std[1] = flat[pos++];
}

Eigen::VectorXd normalize_observation(const Observation& o) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(kObsDim));
  for (std::size_t j = 0; j < kLookahead; ++j) {
    const std::size_t b = j * kFeaturesPerWaypoint;
    x[b + 0] = o[b + 0] / kRangeScale;
    x[b + 1] = o[b + 1] / kPi;
    x[b + 2] = o[b + 2] / kPi;
    x[b + 3] = o[b + 3] / kSpeedScale;
  }
  return x;
}

Action squash(const Eigen::Vector2d& pre) {
  return {kVHalf * (1.0 + std::tanh(pre[0])),
          kMaxAngularVelocity * std::tanh(pre[1])};
}

Eigen::Vector2d unsquash(Action a) {
  return {std::atanh(a.v_cmd / kVHalf - 1.0),
          std::atanh(a.omega_cmd / kMaxAngularVelocity)};
}

BatchForward forward_batch(const PolicyNet& policy,
                           std::span<const Observation> obs) {
  const auto batch = static_cast<Eigen::Index>(obs.size());
  Eigen::MatrixXd input(static_cast<Eigen::Index>(kObsDim), batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (double v : obs[static_cast<std::size_t>(b)]) {
      if (!std::isfinite(v)) throw NonFiniteInput("observation is not finite");
    }
    input.col(b) = normalize_observation(obs[static_cast<std::size_t>(b)]);
  }
  BatchForward f;
  const Eigen::MatrixXd h = mlp_forward(policy.trunk, input, &f.trunk);
  f.mean_pre = mlp_forward(policy.mean_head, h, &f.mean_head);
  f.value = mlp_forward(policy.value_head, h, &f.value_head).row(0);
  f.mean.resize(2, batch);
  f.mean.row(0) = kVHalf * (1.0 + f.mean_pre.row(0).array().tanh());
  f.mean.row(1) = kMaxAngularVelocity * f.mean_pre.row(1).array().tanh();
  return f;
}

PolicyOutput forward(const PolicyNet& policy, const Observation& o) {
  const auto f = forward_batch(policy, std::span<const Observation>(&o, 1));
  PolicyOutput out;
  out.mean_pre = f.mean_pre.col(0);
  out.mean = {f.mean(0, 0), f.mean(1, 0)};
  out.log_std = policy.clamped_log_std();
  out.value = f.value[0];
  return out;
}

PolicyNet backward_batch(const PolicyNet& policy, const BatchForward& fwd,
                         const OutputGradients& up) {
  const Eigen::Index batch = fwd.mean_pre.cols();
  PolicyNet grad = policy;
  grad.set_zero();

  Eigen::MatrixXd d_pre = Eigen::MatrixXd::Zero(2, batch);
  if (up.d_mean_pre.size() > 0) d_pre += up.d_mean_pre;
  if (up.d_mean.size() > 0) {
    const Eigen::ArrayXXd t = fwd.mean_pre.array().tanh();
    const Eigen::ArrayXXd dsq = 1.0 - t.square();
    d_pre.row(0).array() += up.d_mean.row(0).array() * kVHalf * dsq.row(0);
    d_pre.row(1).array() +=
        up.d_mean.row(1).array() * kMaxAngularVelocity * dsq.row(1);
  }

  Eigen::MatrixXd d_h = mlp_backward(policy.mean_head, fwd.mean_head, d_pre,
                                     grad.mean_head);
  if (up.d_value.size() > 0) {
    d_h += mlp_backward(policy.value_head, fwd.value_head,
                        Eigen::MatrixXd(up.d_value), grad.value_head);
  }
  mlp_backward(policy.trunk, fwd.trunk, d_h, grad.trunk);

  for (int k = 0; k < 2; ++k) {
    const bool inside =
        policy.log_std[k] >= kLogStdMin && policy.log_std[k] <= kLogStdMax;
    grad.log_std[k] = inside ? up.d_log_std[k] : 0.0;
  }
  return grad;
}

PolicyNet backward(const PolicyNet& policy, const Observation& o,
                   const SingleOutputGradient& up) {
  const auto f = forward_batch(policy, std::span<const Observation>(&o, 1));
  OutputGradients g;
  g.d_mean = up.d_mean;
  g.d_mean_pre = up.d_mean_pre;
  g.d_log_std = up.d_log_std;
  g.d_value = Eigen::RowVectorXd::Constant(1, up.d_value);
  return backward_batch(policy, f, g);
}

double squashed_log_prob(const Eigen::Vector2d& mean_pre,
                         const Eigen::Vector2d& log_std,
                         const Eigen::Vector2d& pre_sample) {
  const double scale[2] = {kVHalf, kMaxAngularVelocity};
  double lp = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double z = (pre_sample[k] - mean_pre[k]) * std::exp(-log_std[k]);
    lp += -0.5 * z * z - log_std[k] - kHalfLog2Pi;
    lp -= std::log(scale[k]) + log_one_minus_tanh2(pre_sample[k]);
  }
  return lp;
}

double action_log_prob(const Eigen::Vector2d& mean_pre,
                       const Eigen::Vector2d& log_std, Action a) {
  return squashed_log_prob(mean_pre, log_std, unsquash(a));
}

SampledAction sample_from(const PolicyOutput& out, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  SampledAction s;
  for (int k = 0; k < 2; ++k) {
    s.pre_sample[k] = out.mean_pre[k] + std::exp(out.log_std[k]) * normal(rng);
  }
  s.action = clamp_action(squash(s.pre_sample));
  s.log_prob = squashed_log_prob(out.mean_pre, out.log_std, s.pre_sample);
  return s;
}

SampledAction sample_action(const PolicyNet& policy, const Observation& o,
                            Rng& rng) {
  return sample_from(forward(policy, o), rng);
}

namespace {

nlohmann::json layers_to_json(const Mlp& net) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : net.layers) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    std::vector<double> b(l.bias.data(), l.bias.data() + l.bias.size());
    arr.push_back({{"rows", l.weight.rows()},
                   {"cols", l.weight.cols()},
                   {"weight", w},
                   {"bias", b}});
  }
  return arr;
}

Mlp layers_from_json(const nlohmann::json& arr, bool activate_output) {
  Mlp net;
  net.activate_output = activate_output;
  for (const auto& jl : arr) {
    const auto rows = jl.at("rows").get<Eigen::Index>();
    const auto cols = jl.at("cols").get<Eigen::Index>();
    const auto w = jl.at("weight").get<std::vector<double>>();
    const auto b = jl.at("bias").get<std::vector<double>>();
    if (rows <= 0 || cols <= 0 ||
        w.size() != static_cast<std::size_t>(rows * cols) ||
        b.size() != static_cast<std::size_t>(rows)) {
      throw ShapeMismatch("checkpoint layer arrays do not match rows x cols");
    }
    DenseLayer l{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
    std::size_t pos = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) l.weight(r, c) = w[pos++];
    for (Eigen::Index r = 0; r < rows; ++r) l.bias[r] = b[static_cast<std::size_t>(r)];
    net.layers.push_back(std::move(l));
  }
  return net;
}

}  // namespace

std::string checkpoint_to_string(const PolicyNet& policy) {
  nlohmann::json j;
  j["format"] = "trackrl-policy";
  j["version"] = kCheckpointVersion;
  j["obs_dim"] = kObsDim;
  j["trunk"] = layers_to_json(policy.trunk);
  j["mean_head"] = layers_to_json(policy.mean_head);
  j["value_head"] = layers_to_json(policy.value_head);
  j["log_std"] = {policy.log_std[0], policy.log_std[1]};
  return j.dump(1);
}

PolicyNet checkpoint_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw MalformedCheckpoint(std::string("checkpoint is not valid JSON: ") +
                              e.what());
  }
  PolicyNet p;
  try {
    if (!j.contains("version")) throw MalformedCheckpoint("checkpoint has no version");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw MalformedCheckpoint("unsupported checkpoint version");
    }
    if (j.at("obs_dim").get<std::size_t>() != kObsDim) {
      throw ShapeMismatch("checkpoint observation width differs");
    }
    p.trunk = layers_from_json(j.at("trunk"), true);
    p.mean_head = layers_from_json(j.at("mean_head"), false);
    p.value_head = layers_from_json(j.at("value_head"), false);
    const auto ls = j.at("log_std").get<std::vector<double>>();
    if (ls.size() != 2) throw ShapeMismatch("log_std must have 2 entries");
    p.log_std = {ls[0], ls[1]};
  } catch (const nlohmann::json::exception& e) {
    throw MalformedCheckpoint(std::string("checkpoint is missing fields: ") +
                              e.what());
  }
  p.validate();
  const Eigen::VectorXd flat = p.flatten();
  if (!flat.allFinite()) throw MalformedCheckpoint("checkpoint has non-finite values");
  return p;
}

void save_checkpoint(const PolicyNet& policy, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << checkpoint_to_string(policy) << '\n';
}

PolicyNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("checkpoint not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace trackrl
