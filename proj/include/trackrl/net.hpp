#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <span>
#include <vector>

#include "trackrl/env.hpp"
#include "trackrl/vehicle.hpp"

namespace trackrl {

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

// Fully connected stack with tanh between layers. The output layer is
// linear unless activate_output is set (used for the shared trunk).
struct Mlp {
  std::vector<DenseLayer> layers;
  bool activate_output = false;

  Eigen::Index input_dim() const { return layers.front().weight.cols(); }
  Eigen::Index output_dim() const { return layers.back().weight.rows(); }
  std::size_t parameter_count() const;
  // Throws ShapeMismatch if layer dimensions do not chain.
  void validate() const;
  void set_zero();
};

// Post-activation outputs of every layer; activations[0] is the input.
struct MlpCache {
  std::vector<Eigen::MatrixXd> activations;
};

// Columns of `input` are samples.
Eigen::MatrixXd mlp_forward(const Mlp& net, const Eigen::MatrixXd& input,
                            MlpCache* cache = nullptr);

// Accumulates parameter gradients (summed over the batch) into `grad`, which
// must have the same shape as `net`. Returns the gradient w.r.t. the input.
Eigen::MatrixXd mlp_backward(const Mlp& net, const MlpCache& cache,
                             const Eigen::MatrixXd& d_output, Mlp& grad);

inline constexpr Eigen::Index kHiddenWidth = 64;
inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 1.0;

// Gaussian policy with tanh-squashed mean: trunk 40 -> 64 -> 64 (tanh),
// mean head 64 -> 2, value head 64 -> 1, state-independent log-std.
// The same struct doubles as the gradient container.
struct PolicyNet {
  Mlp trunk;
  Mlp mean_head;
  Mlp value_head;
  Eigen::Vector2d log_std = Eigen::Vector2d::Zero();

  static PolicyNet zeros(Eigen::Index hidden = kHiddenWidth);
  static PolicyNet random(Rng& rng, double init_log_std = -0.5,
                          Eigen::Index hidden = kHiddenWidth);

  void validate() const;
  void set_zero();
  Eigen::Vector2d clamped_log_std() const;

  // Flat layout: trunk, mean head, value head, log_std. Each layer stores
  // its weight row-major, then its bias.
  std::size_t parameter_count() const;
  // Parameters updated by supervised fine-tuning (trunk + mean head) come
  // first in the flat layout.
  std::size_t mean_path_parameter_count() const;
  Eigen::VectorXd flatten() const;
  void assign(const Eigen::VectorXd& flat);
};

// Fixed scaling applied before the trunk: ranges by 10 m, angles by pi,
// speed errors by 5 m/s.
Eigen::VectorXd normalize_observation(const Observation& o);

Action squash(const Eigen::Vector2d& pre);
// Inverse of squash for actions strictly inside the box.
Eigen::Vector2d unsquash(Action a);

struct PolicyOutput {
  Action mean;
  Eigen::Vector2d mean_pre;
  Eigen::Vector2d log_std;
  double value = 0.0;
};

PolicyOutput forward(const PolicyNet& policy, const Observation& o);

struct BatchForward {
  MlpCache trunk;
  MlpCache mean_head;
  MlpCache value_head;
  Eigen::MatrixXd mean_pre;  // 2 x B
  Eigen::MatrixXd mean;      // 2 x B, squashed
  Eigen::RowVectorXd value;  // B
};

BatchForward forward_batch(const PolicyNet& policy,
                           std::span<const Observation> obs);

// Upstream gradients for a batch. Either mean gradient may be empty.
struct OutputGradients {
  Eigen::MatrixXd d_mean;      // w.r.t. squashed mean, 2 x B
  Eigen::MatrixXd d_mean_pre;  // w.r.t. pre-squash mean, 2 x B
  Eigen::Vector2d d_log_std = Eigen::Vector2d::Zero();  // w.r.t. clamped log-std
  Eigen::RowVectorXd d_value;  // B
};

// Exact gradients of sum_b <upstream_b, outputs_b> w.r.t. every parameter.
PolicyNet backward_batch(const PolicyNet& policy, const BatchForward& fwd,
                         const OutputGradients& upstream);

struct SingleOutputGradient {
  Eigen::Vector2d d_mean = Eigen::Vector2d::Zero();
  Eigen::Vector2d d_mean_pre = Eigen::Vector2d::Zero();
  Eigen::Vector2d d_log_std = Eigen::Vector2d::Zero();
  double d_value = 0.0;
};

PolicyNet backward(const PolicyNet& policy, const Observation& o,
                   const SingleOutputGradient& upstream);

// Log-density of a squashed action, given the pre-squash sample it came from.
double squashed_log_prob(const Eigen::Vector2d& mean_pre,
                         const Eigen::Vector2d& log_std,
                         const Eigen::Vector2d& pre_sample);
// Log-density of an action in the actuation box (inverts the squash).
double action_log_prob(const Eigen::Vector2d& mean_pre,
                       const Eigen::Vector2d& log_std, Action a);

struct SampledAction {
  Action action;
  Eigen::Vector2d pre_sample;
  double log_prob = 0.0;
};

SampledAction sample_action(const PolicyNet& policy, const Observation& o,
                            Rng& rng);
SampledAction sample_from(const PolicyOutput& out, Rng& rng);

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const PolicyNet& policy, const std::filesystem::path& path);
PolicyNet load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const PolicyNet& policy);
PolicyNet checkpoint_from_string(const std::string& text);

}  // namespace trackrl
