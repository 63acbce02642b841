#include "vcnode/envsim.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vcnode/container.hpp"
#include "vcnode/odesolve.hpp"

namespace vcnode::envsim {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Spiral

SpiralSystem transform_spiral_draws(const Eigen::Matrix2d& raw, bool flip_w21) {
  SpiralSystem s;
  s.w = raw;
  s.w(0, 0) = raw(0, 0) * -0.1 - 0.05;
  s.w(1, 1) = raw(1, 1) * -0.1 - 0.05;
  if (flip_w21)
    s.w(1, 0) = -raw(1, 0);
  else
    s.w(0, 1) = -raw(0, 1);
  return s;
}

SpiralSystem sample_spiral_system(Rng& rng) {
  for (;;) {
    Eigen::Matrix2d raw;
    raw(0, 0) = rng.normal(0.0, 0.5);
    raw(0, 1) = rng.normal(0.0, 0.5);
    raw(1, 0) = rng.normal(0.0, 0.5);
    raw(1, 1) = rng.normal(0.0, 0.5);
    const bool flip_w21 = rng.bernoulli(0.5);
    const SpiralSystem s = transform_spiral_draws(raw, flip_w21);
    if (s.stable()) return s;
  }
}

Trajectory simulate_spiral(const SpiralSystem& sys, const Eigen::Vector2d& x0,
                           const Eigen::VectorXd& t_grid) {
  odesolve::LinearOde ode;
  ode.a = sys.w;
  ode.b = Eigen::MatrixXd(2, 0);
  ode.o = Eigen::Vector2d::Zero();
  Trajectory tr;
  tr.times = t_grid;
  tr.states = odesolve::exact_linear_rollout(ode, x0, t_grid);
  tr.controls = Eigen::MatrixXd(t_grid.size() - 1, 0);
  tr.system_meta.resize(4);
  tr.system_meta << sys.w(0, 0), sys.w(0, 1), sys.w(1, 0), sys.w(1, 1);
  if (!tr.states.allFinite())
    throw std::runtime_error("simulate_spiral: non-finite state");
  return tr;
}

// ---------------------------------------------------------------------------
// Pendulum

PendulumParams sample_pendulum_params(Rng& rng, double std_frac) {
  auto draw = [&](double mean) {
    for (;;) {
      const double v = rng.normal(mean, std_frac * mean);
      if (v > 0.1 * mean) return v;
    }
  };
  PendulumParams p;
  p.gravity = draw(10.0);
  p.length = draw(1.0);
  p.mass = draw(1.0);
  return p;
}

double wrap_angle(double theta) {
  const double two_pi = 2.0 * M_PI;
  double t = std::fmod(theta + M_PI, two_pi);
  if (t <= 0.0) t += two_pi;
  return t - M_PI;
}

PendulumState pendulum_step(const PendulumParams& p, const PendulumState& s, double u) {
  if (!std::isfinite(s.theta) || !std::isfinite(s.omega) || !std::isfinite(u))
    throw std::invalid_argument("pendulum_step: non-finite input");
  const double torque = std::clamp(u, -p.max_torque, p.max_torque);
  const double acc = 3.0 * p.gravity / (2.0 * p.length) * std::sin(s.theta) +
                     3.0 * torque / (p.mass * p.length * p.length);
  PendulumState next;
  next.omega = std::clamp(s.omega + p.dt * acc, -p.max_speed, p.max_speed);
  next.theta = s.theta + p.dt * next.omega;
  return next;
}

double pendulum_reward(const PendulumState& s, double u) {
  const double th = wrap_angle(s.theta);
  return -(th * th + 0.1 * s.omega * s.omega + 0.001 * u * u);
}

Eigen::Vector3d pendulum_observation(const PendulumState& s) {
  return {std::cos(s.theta), std::sin(s.theta), s.omega};
}

// ---------------------------------------------------------------------------
// Excitation

Eigen::VectorXd perlin_controls(int length, Rng& rng, double bound,
                                std::pair<double, double> scale_range) {
  if (length <= 0) return Eigen::VectorXd(0);
  const double scale = rng.uniform(scale_range.first, scale_range.second);
  const int cells = static_cast<int>(std::ceil(length / scale)) + 2;
  std::vector<double> grad(static_cast<std::size_t>(cells) + 1);
  for (auto& g : grad) g = rng.uniform(-1.0, 1.0);

  Eigen::VectorXd u(length);
  for (int i = 0; i < length; ++i) {
    const double x = i / scale;
    const int cell = static_cast<int>(x);
    const double f = x - cell;
    const double fade = f * f * f * (f * (f * 6.0 - 15.0) + 10.0);
    const double left = grad[static_cast<std::size_t>(cell)] * f;
    const double right = grad[static_cast<std::size_t>(cell) + 1] * (f - 1.0);
    u[i] = left + fade * (right - left);
  }
  const double peak = u.cwiseAbs().maxCoeff();
  if (peak > 1e-12) u *= bound / peak;
  return u;
}

Eigen::VectorXd uniform_controls(int length, Rng& rng, double lo, double hi) {
  Eigen::VectorXd u(length);
  for (int i = 0; i < length; ++i) u[i] = rng.uniform(lo, hi);
  return u;
}

// ---------------------------------------------------------------------------
// Normalizer

Normalizer::Normalizer(Eigen::VectorXd min, Eigen::VectorXd max)
    : min_(std::move(min)), max_(std::move(max)) {
  for (Eigen::Index i = 0; i < min_.size(); ++i)
    if (!(max_[i] > min_[i]))
      throw std::invalid_argument("Normalizer: max must exceed min per feature");
}

Eigen::MatrixXd Normalizer::apply(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd y = x;
  for (Eigen::Index c = 0; c < y.cols(); ++c)
    y.col(c) = (y.col(c).array() - min_[c]) / (max_[c] - min_[c]);
  return y;
}

Eigen::MatrixXd Normalizer::invert(const Eigen::MatrixXd& y) const {
  Eigen::MatrixXd x = y;
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    x.col(c) = x.col(c).array() * (max_[c] - min_[c]) + min_[c];
  return x;
}

Eigen::MatrixXf Normalizer::apply(const Eigen::MatrixXf& x) const {
  return apply(Eigen::MatrixXd(x.cast<double>())).cast<float>();
}

Eigen::MatrixXf Normalizer::invert(const Eigen::MatrixXf& y) const {
  return invert(Eigen::MatrixXd(y.cast<double>())).cast<float>();
}

std::uint64_t Normalizer::hash() const {
  std::vector<double> buf(static_cast<std::size_t>(2 * min_.size()));
  for (Eigen::Index i = 0; i < min_.size(); ++i) {
    buf[static_cast<std::size_t>(2 * i)] = min_[i];
    buf[static_cast<std::size_t>(2 * i) + 1] = max_[i];
  }
  return fnv1a(buf.data(), buf.size() * sizeof(double));
}

json Normalizer::to_json() const {
  json j;
  j["min"] = std::vector<double>(min_.data(), min_.data() + min_.size());
  j["max"] = std::vector<double>(max_.data(), max_.data() + max_.size());
  return j;
}

Normalizer Normalizer::from_json(const json& j) {
  const auto mn = j.at("min").get<std::vector<double>>();
  const auto mx = j.at("max").get<std::vector<double>>();
  Eigen::VectorXd vmin(mn.size()), vmax(mx.size());
  for (std::size_t i = 0; i < mn.size(); ++i) vmin[static_cast<Eigen::Index>(i)] = mn[i];
  for (std::size_t i = 0; i < mx.size(); ++i) vmax[static_cast<Eigen::Index>(i)] = mx[i];
  return Normalizer(vmin, vmax);
}

Normalizer fit_normalizer(const Eigen::MatrixXd& rows) {
  if (rows.rows() == 0) throw std::invalid_argument("fit_normalizer: no rows");
  return Normalizer(rows.colwise().minCoeff(), rows.colwise().maxCoeff());
}

// ---------------------------------------------------------------------------
// Dataset generation

json DatasetConfig::to_json() const {
  return json{{"env", env},
              {"episodes", episodes},
              {"steps", steps},
              {"span", span},
              {"std_frac", std_frac},
              {"excitation", excitation},
              {"perlin_scale", {perlin_scale.first, perlin_scale.second}},
              {"noise_sigma_frac", noise_sigma_frac},
              {"train_frac", train_frac},
              {"seed", seed}};
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  DatasetConfig c;
  c.env = j.value("env", c.env);
  c.episodes = j.value("episodes", c.episodes);
  c.steps = j.value("steps", c.steps);
  c.span = j.value("span", c.span);
  c.std_frac = j.value("std_frac", c.std_frac);
  c.excitation = j.value("excitation", c.excitation);
  if (j.contains("perlin_scale")) {
    c.perlin_scale.first = j["perlin_scale"].at(0).get<double>();
    c.perlin_scale.second = j["perlin_scale"].at(1).get<double>();
  }
  c.noise_sigma_frac = j.value("noise_sigma_frac", c.noise_sigma_frac);
  c.train_frac = j.value("train_frac", c.train_frac);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

// Spiral starting points: gaussian, resampled away from the fixed point.
Eigen::Vector2d sample_spiral_x0(Rng& rng) {
  for (;;) {
    Eigen::Vector2d x0(rng.normal(0.0, 1.5), rng.normal(0.0, 1.5));
    if (x0.norm() > 0.3) return x0;
  }
}

EpisodeF spiral_episode(const DatasetConfig& cfg, const Eigen::VectorXd& t_grid, Rng ep_rng) {
  Rng sys_rng = ep_rng.stream(0);
  Rng x0_rng = ep_rng.stream(1);
  const SpiralSystem sys = sample_spiral_system(sys_rng);
  const Trajectory tr = simulate_spiral(sys, sample_spiral_x0(x0_rng), t_grid);
  EpisodeF ep;
  ep.states = tr.states.cast<float>();
  ep.controls = Eigen::MatrixXf(t_grid.size() - 1, 0);
  ep.meta = tr.system_meta.cast<float>();
  return ep;
}

EpisodeF pendulum_episode(const DatasetConfig& cfg, Rng ep_rng) {
  Rng par_rng = ep_rng.stream(0);
  Rng x0_rng = ep_rng.stream(1);
  Rng u_rng = ep_rng.stream(2);
  const PendulumParams p = sample_pendulum_params(par_rng, cfg.std_frac);
  PendulumState s{x0_rng.uniform(-M_PI, M_PI), x0_rng.uniform(-1.0, 1.0)};

  Eigen::VectorXd u_raw;
  if (cfg.excitation == "perlin")
    u_raw = perlin_controls(cfg.steps, u_rng, p.max_torque, cfg.perlin_scale);
  else if (cfg.excitation == "uniform")
    u_raw = uniform_controls(cfg.steps, u_rng, -p.max_torque, p.max_torque);
  else
    throw std::invalid_argument("unknown excitation: " + cfg.excitation);

  EpisodeF ep;
  ep.states.resize(cfg.steps + 1, 3);
  ep.controls.resize(cfg.steps, 1);
  ep.states.row(0) = pendulum_observation(s).cast<float>().transpose();
  for (int k = 0; k < cfg.steps; ++k) {
    // Simulate with the f32-quantized control so archive replay is exact.
    const float uq = static_cast<float>(u_raw[k]);
    ep.controls(k, 0) = uq;
    s = pendulum_step(p, s, static_cast<double>(uq));
    ep.states.row(k + 1) = pendulum_observation(s).cast<float>().transpose();
  }
  ep.meta.resize(6);
  ep.meta << static_cast<float>(p.gravity), static_cast<float>(p.length),
      static_cast<float>(p.mass), static_cast<float>(p.max_torque),
      static_cast<float>(p.max_speed), static_cast<float>(p.dt);
  return ep;
}

// Time-variant benchmark: x' = W(t) x with W(t) sliding linearly from one
// stable spiral generator to another over the episode.
EpisodeF drift_episode(const DatasetConfig& cfg, const Eigen::VectorXd& t_grid, Rng ep_rng) {
  Rng sys_rng = ep_rng.stream(0);
  Rng x0_rng = ep_rng.stream(1);
  const SpiralSystem w_start = sample_spiral_system(sys_rng);
  const SpiralSystem w_end = sample_spiral_system(sys_rng);
  Eigen::Vector2d x = sample_spiral_x0(x0_rng);

  const double t_end = t_grid[t_grid.size() - 1];
  EpisodeF ep;
  ep.states.resize(t_grid.size(), 2);
  ep.controls = Eigen::MatrixXf(t_grid.size() - 1, 0);
  ep.states.row(0) = x.cast<float>().transpose();
  for (Eigen::Index k = 0; k + 1 < t_grid.size(); ++k) {
    const double h = t_grid[k + 1] - t_grid[k];
    const double sfrac = t_grid[k] / t_end;
    const Eigen::Matrix2d w = (1.0 - sfrac) * w_start.w + sfrac * w_end.w;
    x = (w * h).exp() * x;  // frozen-coefficient segment map
    ep.states.row(k + 1) = x.cast<float>().transpose();
  }
  ep.meta.resize(8);
  Eigen::VectorXd meta(8);
  meta << w_start.w(0, 0), w_start.w(0, 1), w_start.w(1, 0), w_start.w(1, 1),
      w_end.w(0, 0), w_end.w(0, 1), w_end.w(1, 0), w_end.w(1, 1);
  ep.meta = meta.cast<float>();
  return ep;
}

}  // namespace

Dataset generate_dataset(const DatasetConfig& cfg) {
  Dataset ds;
  ds.env = cfg.env;
  ds.seed = cfg.seed;
  ds.config_echo = cfg.to_json();

  const int points = cfg.steps + 1;
  if (cfg.env == "pendulum") {
    ds.obs_dim = 3;
    ds.u_dim = 1;
    ds.times = Eigen::VectorXd::LinSpaced(points, 0.0, PendulumParams{}.dt * cfg.steps);
  } else if (cfg.env == "spiral" || cfg.env == "drift_spiral") {
    ds.obs_dim = 2;
    ds.u_dim = 0;
    ds.times = Eigen::VectorXd::LinSpaced(points, 0.0, cfg.span);
  } else {
    throw std::invalid_argument("unknown env: " + cfg.env);
  }

  const Rng base(cfg.seed);
  const int n_train = static_cast<int>(std::lround(cfg.episodes * cfg.train_frac));
  std::vector<EpisodeF> episodes(static_cast<std::size_t>(cfg.episodes));
#pragma omp parallel for schedule(dynamic, 16)
  for (int i = 0; i < cfg.episodes; ++i) {
    Rng ep_rng = base.stream(static_cast<std::uint64_t>(i));
    if (cfg.env == "pendulum")
      episodes[static_cast<std::size_t>(i)] = pendulum_episode(cfg, ep_rng);
    else if (cfg.env == "spiral")
      episodes[static_cast<std::size_t>(i)] = spiral_episode(cfg, ds.times, ep_rng);
    else
      episodes[static_cast<std::size_t>(i)] = drift_episode(cfg, ds.times, ep_rng);
  }
  ds.train.assign(episodes.begin(), episodes.begin() + n_train);
  ds.test.assign(episodes.begin() + n_train, episodes.end());

  if (!ds.train.empty()) {
    // Clean per-feature range over the train split sets the noise scale.
    Eigen::VectorXd lo = ds.train[0].states.row(0).cast<double>();
    Eigen::VectorXd hi = lo;
    for (const auto& ep : ds.train) {
      lo = lo.cwiseMin(ep.states.cast<double>().colwise().minCoeff().transpose());
      hi = hi.cwiseMax(ep.states.cast<double>().colwise().maxCoeff().transpose());
    }
    if (cfg.noise_sigma_frac > 0.0) {
      const Eigen::VectorXd sigma = cfg.noise_sigma_frac * (hi - lo);
      Rng noise_base = base.stream(0x6e6f697365ULL);  // dedicated noise lane
#pragma omp parallel for schedule(dynamic, 16)
      for (int i = 0; i < n_train; ++i) {
        Rng nr = noise_base.stream(static_cast<std::uint64_t>(i));
        auto& st = ds.train[static_cast<std::size_t>(i)].states;
        for (Eigen::Index r = 0; r < st.rows(); ++r)
          for (Eigen::Index c = 0; c < st.cols(); ++c)
            st(r, c) += static_cast<float>(nr.normal(0.0, sigma[c]));
      }
    }
    // Fit on the stored (possibly noisy) train states so apply() maps the
    // archive exactly onto [0, 1].
    Eigen::Index total = 0;
    for (const auto& ep : ds.train) total += ep.states.rows();
    Eigen::MatrixXd all(total, ds.obs_dim);
    Eigen::Index at = 0;
    for (const auto& ep : ds.train) {
      all.middleRows(at, ep.states.rows()) = ep.states.cast<double>();
      at += ep.states.rows();
    }
    ds.normalizer = fit_normalizer(all);
  }
  return ds;
}

namespace {

void save_split(const std::filesystem::path& dir, const std::string& prefix,
                const std::vector<EpisodeF>& split) {
  std::vector<Eigen::MatrixXf> states, controls, metas;
  states.reserve(split.size());
  for (const auto& ep : split) {
    states.push_back(ep.states);
    controls.push_back(ep.controls);
    metas.push_back(ep.meta.transpose());
  }
  save_array(dir / (prefix + "_states.vcno"), NdArray::from_stack(states));
  save_array(dir / (prefix + "_controls.vcno"), NdArray::from_stack(controls));
  save_array(dir / (prefix + "_meta.vcno"), NdArray::from_stack(metas));
}

std::vector<EpisodeF> load_split(const std::filesystem::path& dir, const std::string& prefix) {
  const auto states = load_array(dir / (prefix + "_states.vcno")).as_stack_f();
  const auto controls = load_array(dir / (prefix + "_controls.vcno")).as_stack_f();
  const auto metas = load_array(dir / (prefix + "_meta.vcno")).as_stack_f();
  std::vector<EpisodeF> split(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    split[i].states = states[i];
    split[i].controls = controls[i];
    split[i].meta = metas[i].row(0).transpose();
  }
  return split;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["schema_version"] = 1;
  meta["env"] = ds.env;
  meta["obs_dim"] = ds.obs_dim;
  meta["u_dim"] = ds.u_dim;
  meta["train_episodes"] = ds.train.size();
  meta["test_episodes"] = ds.test.size();
  meta["seed"] = ds.seed;
  meta["normalizer"] = ds.normalizer.to_json();
  meta["normalizer_hash"] = ds.normalizer.hash();
  meta["config"] = ds.config_echo;
  save_json(dir / "meta", meta);
  save_array(dir / "times.vcno", NdArray::from_vector(ds.times));
  save_split(dir, "train", ds.train);
  save_split(dir, "test", ds.test);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const json meta = load_json(dir / "meta");
  Dataset ds;
  ds.env = meta.at("env").get<std::string>();
  ds.obs_dim = meta.at("obs_dim").get<int>();
  ds.u_dim = meta.at("u_dim").get<int>();
  ds.seed = meta.at("seed").get<std::uint64_t>();
  ds.normalizer = Normalizer::from_json(meta.at("normalizer"));
  ds.config_echo = meta.at("config");
  ds.times = load_array(dir / "times.vcno").as_vector_d();
  ds.train = load_split(dir, "train");
  ds.test = load_split(dir, "test");
  return ds;
}

std::vector<Window> window_dataset(const std::vector<EpisodeF>& split, int window,
                                   int stride, int split_index) {
  if (window < 2 || stride < 1 || split_index < 1 || split_index >= window - 1)
    throw std::invalid_argument("window_dataset: bad window/stride/split");
  std::vector<Window> out;
  for (std::size_t e = 0; e < split.size(); ++e) {
    const auto& ep = split[e];
    const int points = static_cast<int>(ep.states.rows());
    for (int start = 0; start + window <= points; start += stride) {
      Window w;
      w.states = ep.states.middleRows(start, window);
      w.controls = ep.controls.middleRows(start, window - 1);
      w.split_index = split_index;
      w.episode = static_cast<int>(e);
      w.start = start;
      out.push_back(std::move(w));
    }
  }
  return out;
}

std::vector<Window> window_dataset_normalized(const std::vector<EpisodeF>& split,
                                              const Normalizer& norm, int window,
                                              int stride, int split_index) {
  auto ws = window_dataset(split, window, stride, split_index);
  for (auto& w : ws) w.states = norm.apply(w.states);
  return ws;
}

}  // namespace vcnode::envsim
