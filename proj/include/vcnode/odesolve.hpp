#pragma once

// Integrators for controlled linear ODEs  z' = A z + B u(t) + o  with
// piecewise-constant (zero-order hold) controls: fixed-step Euler, adaptive
// Dormand-Prince 5(4) with dense output, and an exact closed-form rollout
// built on the augmented matrix exponential, used as the reference solution.

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace vcnode::odesolve {

// u(t) is constant on [times[k], times[k+1]); right-continuous, clamped to
// the first/last segment outside the span. An empty control means u-dim 0.
struct PiecewiseConstantControl {
  Eigen::VectorXd times;   // K+1 strictly increasing boundaries
  Eigen::MatrixXd values;  // K x u_dim

  int dim() const { return static_cast<int>(values.cols()); }
  int segments() const { return static_cast<int>(values.rows()); }
  bool empty() const { return values.size() == 0; }
  int segment_index(double t) const;
  Eigen::VectorXd at(double t) const;

  static PiecewiseConstantControl none() { return {}; }
  // Controls stepping on a uniform grid: values.row(k) applies on
  // [t_grid[k], t_grid[k+1]).
  static PiecewiseConstantControl on_grid(const Eigen::VectorXd& t_grid,
                                          const Eigen::MatrixXd& values);
};

struct LinearOde {
  Eigen::MatrixXd a;  // d x d
  Eigen::MatrixXd b;  // d x u  (u may be 0)
  Eigen::VectorXd o;  // d
  PiecewiseConstantControl control;

  int dim() const { return static_cast<int>(a.rows()); }
  Eigen::VectorXd drive(double t) const;  // B u(t) + o
  Eigen::VectorXd rhs(double t, const Eigen::VectorXd& z) const;
};

enum class SolverKind { euler, dopri45 };

struct SolverConfig {
  SolverKind kind = SolverKind::euler;
  double step = 0.0;  // euler: sub-step cap; 0 means one step per grid interval
  double rtol = 1e-6;
  double atol = 1e-8;
  int max_steps = 100000;
};

// Thrown when a rollout fails; carries whatever was integrated so far.
class SolveError : public std::runtime_error {
 public:
  SolveError(const std::string& msg, Eigen::MatrixXd partial)
      : std::runtime_error(msg), partial_states(std::move(partial)) {}
  Eigen::MatrixXd partial_states;  // rows filled up to the failure point
};

// All rollouts return a len(t_grid) x d matrix whose row k is z(t_grid[k]);
// row 0 is z0. t_grid must be strictly increasing.

Eigen::MatrixXd euler_rollout(const LinearOde& ode, const Eigen::VectorXd& z0,
                              const Eigen::VectorXd& t_grid,
                              const SolverConfig& cfg = {});

Eigen::MatrixXd dopri45_rollout(const LinearOde& ode, const Eigen::VectorXd& z0,
                                const Eigen::VectorXd& t_grid,
                                const SolverConfig& cfg = {});

Eigen::MatrixXd exact_linear_rollout(const LinearOde& ode, const Eigen::VectorXd& z0,
                                     const Eigen::VectorXd& t_grid);

Eigen::MatrixXd rollout(const LinearOde& ode, const Eigen::VectorXd& z0,
                        const Eigen::VectorXd& t_grid, const SolverConfig& cfg);

// Discrete one-step maps of the segment [0, h] under constant control:
//   z+ = Ad z + Bd u + od
// `exact` uses the augmented matrix exponential, `euler` the first-order map
// I + h A. Used by the MPC lift.
struct DiscreteMaps {
  Eigen::MatrixXd ad;
  Eigen::MatrixXd bd;
  Eigen::VectorXd od;
};
DiscreteMaps discretize_exact(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const Eigen::VectorXd& o, double h);
DiscreteMaps discretize_euler(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const Eigen::VectorXd& o, double h);

}  // namespace vcnode::odesolve
