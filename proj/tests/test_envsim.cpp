#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vcnode/container.hpp"
#include "vcnode/envsim.hpp"

using namespace vcnode;
using namespace vcnode::envsim;
namespace fs = std::filesystem;

TEST_CASE("spiral transform: zero draws leave only the shift") {
  const auto s = transform_spiral_draws(Eigen::Matrix2d::Zero(), true);
  CHECK(s.w(0, 0) == doctest::Approx(-0.05));
  CHECK(s.w(1, 1) == doctest::Approx(-0.05));
  CHECK(s.w(0, 1) == 0.0);
  CHECK(s.w(1, 0) == 0.0);
  CHECK(s.stable());
}

TEST_CASE("spiral transform: ones with w21 flip") {
  Eigen::Matrix2d raw = Eigen::Matrix2d::Ones();
  const auto s = transform_spiral_draws(raw, true);
  CHECK(s.w(0, 0) == doctest::Approx(-0.15));
  CHECK(s.w(0, 1) == doctest::Approx(1.0));
  CHECK(s.w(1, 0) == doctest::Approx(-1.0));
  CHECK(s.w(1, 1) == doctest::Approx(-0.15));
}

TEST_CASE("raw spiral draws follow N(0, 0.5) before screening") {
  // Monte-Carlo on the pre-transform entries (w12 before any sign flip).
  Rng rng(123);
  const int n = 100000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    const double w12 = rng.normal(0.0, 0.5);
    sum += w12;
    sumsq += w12 * w12;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  const double se_mean = 0.5 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(mean) < 3 * se_mean);
  CHECK(var == doctest::Approx(0.25).epsilon(0.02));
}

TEST_CASE("sampled spiral systems are stable and bounded over the span") {
  Rng rng(42);
  const auto t_grid = Eigen::VectorXd::LinSpaced(400, 0.0, 35.0);
  for (int i = 0; i < 1000; ++i) {
    const auto sys = sample_spiral_system(rng);
    REQUIRE(sys.stable());
    if (i < 50) {  // full rollouts are slower; spot-check a subset
      Eigen::Vector2d x0(1.5, -0.5);
      const auto tr = simulate_spiral(sys, x0, t_grid);
      CHECK(tr.states.row(tr.states.rows() - 1).norm() < 10.0 * x0.norm());
    }
  }
}

TEST_CASE("spiral simulation is the exact linear solution") {
  SpiralSystem sys;
  sys.w << 0, -1, 1, 0;
  // Quarter turn of the rotation generator.
  const auto tr = simulate_spiral(sys, {1.0, 0.0},
                                  Eigen::VectorXd::LinSpaced(3, 0.0, M_PI / 2));
  CHECK(tr.states(2, 0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(tr.states(2, 1) == doctest::Approx(1.0).epsilon(1e-12));

  SpiralSystem zero;
  zero.w.setZero();
  const auto constant = simulate_spiral(zero, {1.0, 2.0},
                                        Eigen::VectorXd::LinSpaced(5, 0.0, 35.0));
  CHECK((constant.states.col(0).array() == 1.0).all());
  CHECK((constant.states.col(1).array() == 2.0).all());
}

TEST_CASE("pendulum parameter randomization") {
  Rng rng(7);
  SUBCASE("zero spread returns the means") {
    const auto p = sample_pendulum_params(rng, 0.0);
    CHECK(p.gravity == 10.0);
    CHECK(p.length == 1.0);
    CHECK(p.mass == 1.0);
  }
  SUBCASE("gravity spread matches 30% of mean") {
    const int n = 10000;
    double sum = 0, sumsq = 0;
    int resample_evidence = 0;
    for (int i = 0; i < n; ++i) {
      const auto p = sample_pendulum_params(rng, 0.30);
      CHECK(p.gravity > 1.0);  // degeneracy guard: > 10% of mean
      CHECK(p.length > 0.1);
      CHECK(p.mass > 0.1);
      sum += p.gravity;
      sumsq += p.gravity * p.gravity;
      if (p.gravity < 1.0) ++resample_evidence;
    }
    const double mean = sum / n;
    const double sd = std::sqrt(sumsq / n - mean * mean);
    CHECK(sd == doctest::Approx(3.0).epsilon(0.10));
    CHECK(resample_evidence == 0);
  }
}

TEST_CASE("pendulum step dynamics") {
  PendulumParams p;
  SUBCASE("hanging equilibrium is a fixed point") {
    PendulumState s{M_PI, 0.0};
    const auto next = pendulum_step(p, s, 0.0);
    CHECK(next.omega == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(next.theta == doctest::Approx(M_PI).epsilon(1e-12));
  }
  SUBCASE("quarter angle accelerates as 3g/2l sin(theta)") {
    PendulumState s{M_PI / 2, 0.0};
    const auto next = pendulum_step(p, s, 0.0);
    CHECK(next.omega == doctest::Approx(0.05 * 15.0).epsilon(1e-12));
    CHECK(next.theta == doctest::Approx(M_PI / 2 + 0.05 * 0.75).epsilon(1e-12));
  }
  SUBCASE("speed clamps at 8 rad/s") {
    PendulumState s{M_PI / 2, 7.9};
    PendulumState out = s;
    for (int i = 0; i < 10; ++i) out = pendulum_step(p, out, 2.0);
    CHECK(out.omega <= 8.0);
    PendulumState fast{0.0, 9.0};  // pre-clamped input also clamps on step
    const auto next = pendulum_step(p, {M_PI / 2, 7.5}, 2.0);
    CHECK(next.omega == 8.0);
    (void)fast;
  }
  SUBCASE("torque clamps at max_torque") {
    const auto hi = pendulum_step(p, {1.0, 0.0}, 50.0);
    const auto capped = pendulum_step(p, {1.0, 0.0}, 2.0);
    CHECK(hi.omega == doctest::Approx(capped.omega));
  }
  SUBCASE("non-finite inputs are rejected") {
    CHECK_THROWS(pendulum_step(p, {std::nan(""), 0.0}, 0.0));
  }
}

TEST_CASE("pendulum reward") {
  CHECK(pendulum_reward({0.0, 0.0}, 0.0) == 0.0);
  CHECK(pendulum_reward({M_PI, 0.0}, 0.0) == doctest::Approx(-M_PI * M_PI));
  CHECK(pendulum_reward({0.1, 1.0}, 2.0) == doctest::Approx(-0.114));
  // theta outside (-pi, pi] is wrapped before costing.
  CHECK(pendulum_reward({2 * M_PI, 0.0}, 0.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("perlin controls have temporal structure and honor the bound") {
  Rng rng(11);
  const int n = 10000;
  const double bound = 2.0;
  const auto perlin = perlin_controls(n, rng, bound);
  const auto white = uniform_controls(n, rng, -bound, bound);
  REQUIRE(perlin.size() == n);
  CHECK(perlin.cwiseAbs().maxCoeff() <= bound + 1e-12);

  auto lag1 = [](const Eigen::VectorXd& u) {
    const auto head = u.head(u.size() - 1).array();
    const auto tail = u.tail(u.size() - 1).array();
    const double mh = head.mean(), mt = tail.mean();
    const double cov = ((head - mh) * (tail - mt)).mean();
    const double sd = std::sqrt((head - mh).square().mean() * (tail - mt).square().mean());
    return cov / sd;
  };
  CHECK(lag1(perlin) > lag1(white));
  CHECK(lag1(perlin) > 0.9);  // smooth by construction
}

TEST_CASE("uniform controls stay in bounds with the right mean") {
  Rng rng(13);
  const auto u = uniform_controls(10000, rng, -2.0, 2.0);
  CHECK(u.minCoeff() >= -2.0);
  CHECK(u.maxCoeff() <= 2.0);
  CHECK(std::abs(u.mean()) < 3.0 * (4.0 / std::sqrt(12.0)) / std::sqrt(10000.0));
  const auto degenerate = uniform_controls(10, rng, 1.5, 1.5);
  CHECK((degenerate.array() == 1.5).all());
}

TEST_CASE("normalizer maps train extrema to [0,1] and inverts exactly") {
  Eigen::MatrixXd rows(4, 2);
  rows << 0.0, -1.0, 2.0, 3.0, 1.0, 1.0, 0.5, -0.5;
  const auto norm = fit_normalizer(rows);
  const auto y = norm.apply(rows);
  CHECK(y.col(0).minCoeff() == 0.0);
  CHECK(y.col(0).maxCoeff() == 1.0);
  CHECK(y.col(1).minCoeff() == 0.0);
  CHECK(y.col(1).maxCoeff() == 1.0);
  const auto back = norm.invert(y);
  CHECK(((back - rows).cwiseAbs().array() <= 1e-12 * rows.cwiseAbs().array().max(1.0)).all());

  Eigen::MatrixXd constant(3, 1);
  constant << 2.0, 2.0, 2.0;
  CHECK_THROWS(fit_normalizer(constant));
}

TEST_CASE("windowing yields floor((T-61)/stride)+1 windows with a 30/30 split") {
  std::vector<EpisodeF> split(1);
  split[0].states = Eigen::MatrixXf::Random(121, 2);
  split[0].controls = Eigen::MatrixXf::Random(120, 1);
  split[0].meta = Eigen::VectorXf::Zero(1);
  const auto w3 = window_dataset(split, 61, 30);
  CHECK(w3.size() == 3);
  for (const auto& w : w3) {
    CHECK(w.length() == 61);
    CHECK(w.context_states().rows() == 31);
    CHECK(w.target_states().rows() == 30);
    CHECK(w.context_controls().rows() == 30);
    CHECK(w.target_controls().rows() == 30);
  }
  split[0].states = Eigen::MatrixXf::Random(61, 2);
  split[0].controls = Eigen::MatrixXf::Random(60, 1);
  CHECK(window_dataset(split, 61, 30).size() == 1);
  split[0].states = Eigen::MatrixXf::Random(60, 2);
  split[0].controls = Eigen::MatrixXf::Random(59, 1);
  CHECK(window_dataset(split, 61, 30).empty());
}

TEST_CASE("dataset generation is deterministic and archives round trip") {
  DatasetConfig cfg;
  cfg.env = "pendulum";
  cfg.episodes = 6;
  cfg.steps = 80;
  cfg.seed = 99;
  const auto ds1 = generate_dataset(cfg);
  const auto ds2 = generate_dataset(cfg);
  REQUIRE(ds1.train.size() == 5);
  REQUIRE(ds1.test.size() == 1);
  CHECK(ds1.train[3].states == ds2.train[3].states);
  CHECK(ds1.train[3].controls == ds2.train[3].controls);

  // Speed clamp holds everywhere (omega is the third observed feature).
  for (const auto& ep : ds1.test)
    CHECK(ep.states.col(2).cwiseAbs().maxCoeff() <= 8.0f);

  const auto dir = fs::temp_directory_path() / "vcnode_ds_test";
  fs::remove_all(dir);
  save_dataset(dir, ds1);
  const auto back = load_dataset(dir);
  CHECK(back.env == ds1.env);
  CHECK(back.obs_dim == 3);
  CHECK(back.u_dim == 1);
  REQUIRE(back.train.size() == ds1.train.size());
  for (std::size_t i = 0; i < back.train.size(); ++i) {
    CHECK(back.train[i].states == ds1.train[i].states);
    CHECK(back.train[i].controls == ds1.train[i].controls);
    CHECK(back.train[i].meta == ds1.train[i].meta);
  }
  CHECK(back.normalizer.hash() == ds1.normalizer.hash());

  // Byte-identical archives from the same seed.
  const auto dir2 = fs::temp_directory_path() / "vcnode_ds_test2";
  fs::remove_all(dir2);
  save_dataset(dir2, ds2);
  for (const auto* name : {"train_states.vcno", "train_controls.vcno", "test_states.vcno"}) {
    std::ifstream a(dir / name, std::ios::binary), b(dir2 / name, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("empty dataset is a valid archive") {
  DatasetConfig cfg;
  cfg.env = "spiral";
  cfg.episodes = 0;
  const auto ds = generate_dataset(cfg);
  CHECK(ds.train.empty());
  CHECK(ds.test.empty());
  const auto dir = fs::temp_directory_path() / "vcnode_ds_empty";
  fs::remove_all(dir);
  save_dataset(dir, ds);
  const auto back = load_dataset(dir);
  CHECK(back.train.empty());
  fs::remove_all(dir);
}

TEST_CASE("train split carries the noise augmentation, test stays clean") {
  DatasetConfig cfg;
  cfg.env = "spiral";
  cfg.episodes = 10;
  cfg.steps = 99;
  cfg.seed = 5;
  cfg.noise_sigma_frac = 0.0;
  const auto clean = generate_dataset(cfg);
  cfg.noise_sigma_frac = 0.01;
  const auto noisy = generate_dataset(cfg);
  CHECK(clean.train[0].states != noisy.train[0].states);
  CHECK(clean.test[0].states == noisy.test[0].states);
}

TEST_CASE("drift episodes interpolate between two stable generators") {
  DatasetConfig cfg;
  cfg.env = "drift_spiral";
  cfg.episodes = 3;
  cfg.steps = 50;
  cfg.span = 5.0;
  cfg.noise_sigma_frac = 0.0;
  const auto ds = generate_dataset(cfg);
  REQUIRE(ds.train.size() == 2);
  CHECK(ds.train[0].meta.size() == 8);
  CHECK(ds.obs_dim == 2);
  for (const auto& ep : ds.train) CHECK(ep.states.allFinite());
}
