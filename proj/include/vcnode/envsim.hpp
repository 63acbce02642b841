#pragma once

// Domain-randomized system instances, trajectory simulation under excitation
// signals, and windowed, normalized dataset archives.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vcnode/rng.hpp"

namespace vcnode::envsim {

// ---------------------------------------------------------------------------
// Spiral toy system: x' = W x on [0, 35].

struct SpiralSystem {
  Eigen::Matrix2d w;
  // Both eigenvalues in the open left half plane (Routh: tr < 0, det > 0).
  bool stable() const { return w.trace() < 0.0 && w.determinant() > 0.0; }
};

// The raw scale/shift/sign-flip rule applied to standard draws; no stability
// screening. `flip_w21` picks which off-diagonal entry is negated.
SpiralSystem transform_spiral_draws(const Eigen::Matrix2d& raw, bool flip_w21);

// Draws entries ~ N(0, 0.5), applies transform_spiral_draws, and redraws
// until the system is stable, so every emitted instance spirals inward.
SpiralSystem sample_spiral_system(Rng& rng);

// ---------------------------------------------------------------------------
// Pendulum swing-up (theta = 0 upright, theta wrapped to (-pi, pi] for cost).

struct PendulumParams {
  double gravity = 10.0;  // m/s^2
  double length = 1.0;    // m
  double mass = 1.0;      // kg
  double max_torque = 2.0;   // N*m
  double max_speed = 8.0;    // rad/s
  double dt = 0.05;          // s
};

struct PendulumState {
  double theta = 0.0;  // rad
  double omega = 0.0;  // rad/s
};

// g, l, m ~ N(mean, (std_frac*mean)^2) independently; any draw at or below
// 10% of its mean is rejected and redrawn.
PendulumParams sample_pendulum_params(Rng& rng, double std_frac = 0.30);

double wrap_angle(double theta);  // to (-pi, pi]

// omega' = clamp(omega + dt*(3g/(2l) sin(theta) + 3u/(m l^2)), +-max_speed);
// theta' = theta + dt*omega'. Torque is clamped to +-max_torque first.
PendulumState pendulum_step(const PendulumParams& p, const PendulumState& s, double u);

// -(wrap(theta)^2 + 0.1 omega^2 + 0.001 u^2)
double pendulum_reward(const PendulumState& s, double u);

// Model observation (cos theta, sin theta, omega).
Eigen::Vector3d pendulum_observation(const PendulumState& s);

// ---------------------------------------------------------------------------
// Excitation signals.

// 1-D gradient noise: random gradients on an integer lattice, quintic fade,
// zero at lattice points. The wavelength in steps is drawn from scale_range
// once per call; the result is rescaled so max |u| == bound (all-zero
// gradient fields stay zero).
Eigen::VectorXd perlin_controls(int length, Rng& rng, double bound,
                                std::pair<double, double> scale_range = {8.0, 64.0});

Eigen::VectorXd uniform_controls(int length, Rng& rng, double lo, double hi);

// ---------------------------------------------------------------------------
// Trajectories, windows, normalization.

struct Trajectory {
  Eigen::VectorXd times;    // T
  Eigen::MatrixXd states;   // T x n
  Eigen::MatrixXd controls; // (T-1) x u
  Eigen::VectorXd system_meta;
};

// x(t) for x' = W x via the exact matrix-exponential solution.
Trajectory simulate_spiral(const SpiralSystem& sys, const Eigen::Vector2d& x0,
                           const Eigen::VectorXd& t_grid);

// Per-feature min/max affine map onto [0, 1], fit on the training split.
class Normalizer {
 public:
  Normalizer() = default;
  Normalizer(Eigen::VectorXd min, Eigen::VectorXd max);

  int dim() const { return static_cast<int>(min_.size()); }
  const Eigen::VectorXd& min() const { return min_; }
  const Eigen::VectorXd& max() const { return max_; }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;   // rows = samples
  Eigen::MatrixXd invert(const Eigen::MatrixXd& y) const;
  Eigen::MatrixXf apply(const Eigen::MatrixXf& x) const;
  Eigen::MatrixXf invert(const Eigen::MatrixXf& y) const;

  std::uint64_t hash() const;
  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);

 private:
  Eigen::VectorXd min_, max_;
};

// Throws if any feature is constant over the rows.
Normalizer fit_normalizer(const Eigen::MatrixXd& rows);

// One training window: 61 points = 30 context transitions + 30 target
// transitions sharing the boundary state at split_index.
struct Window {
  Eigen::MatrixXf states;    // window_len x n
  Eigen::MatrixXf controls;  // (window_len - 1) x u
  int split_index = 30;
  int episode = -1;  // provenance within its split
  int start = -1;

  int length() const { return static_cast<int>(states.rows()); }
  // Context states rows [0, split_index]; target states rows (split_index, end].
  Eigen::MatrixXf context_states() const { return states.topRows(split_index + 1); }
  Eigen::MatrixXf target_states() const {
    return states.bottomRows(length() - split_index - 1);
  }
  Eigen::MatrixXf context_controls() const { return controls.topRows(split_index); }
  Eigen::MatrixXf target_controls() const {
    return controls.bottomRows(controls.rows() - split_index);
  }
};

// ---------------------------------------------------------------------------
// Dataset archives.

struct EpisodeF {
  Eigen::MatrixXf states;    // T x n
  Eigen::MatrixXf controls;  // (T-1) x u
  Eigen::VectorXf meta;
};

struct DatasetConfig {
  std::string env = "pendulum";  // spiral | pendulum | drift_spiral
  int episodes = 5000;
  int steps = 200;          // transitions per episode; T = steps + 1 points
  double span = 35.0;       // spiral/drift time span (steps+1 points)
  double std_frac = 0.30;   // pendulum parameter randomization
  std::string excitation = "perlin";  // perlin | uniform
  std::pair<double, double> perlin_scale{8.0, 64.0};
  double noise_sigma_frac = 0.01;  // train-split state noise, fraction of range
  double train_frac = 0.8;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

struct Dataset {
  std::string env;
  int obs_dim = 0;
  int u_dim = 0;
  Eigen::VectorXd times;  // shared grid, T points
  std::vector<EpisodeF> train;
  std::vector<EpisodeF> test;
  Normalizer normalizer;
  std::uint64_t seed = 0;
  nlohmann::json config_echo;

  double dt() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }
};

// Deterministic in cfg.seed; episode i draws from independent streams
// derived from (seed, i) so generation order is irrelevant. Gaussian state
// noise (sigma = noise_sigma_frac * per-feature train range) is added to the
// training split only; the test split stays clean.
Dataset generate_dataset(const DatasetConfig& cfg);

void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

// Sliding windows over every episode of the split; count per episode is
// floor((T - window) / stride) + 1. Episodes shorter than `window` yield none.
std::vector<Window> window_dataset(const std::vector<EpisodeF>& split, int window = 61,
                                   int stride = 30, int split_index = 30);

// Windows with states mapped through the normalizer.
std::vector<Window> window_dataset_normalized(const std::vector<EpisodeF>& split,
                                              const Normalizer& norm, int window = 61,
                                              int stride = 30, int split_index = 30);

}  // namespace vcnode::envsim
