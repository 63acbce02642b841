#include "vcnode/odesolve.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <limits>

namespace vcnode::odesolve {

namespace {

bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

void check_grid(const Eigen::VectorXd& t_grid) {
  if (t_grid.size() < 1) throw std::invalid_argument("t_grid is empty");
  for (Eigen::Index i = 0; i + 1 < t_grid.size(); ++i)
    if (!(t_grid[i + 1] > t_grid[i]))
      throw std::invalid_argument("t_grid must be strictly increasing");
}

}  // namespace

int PiecewiseConstantControl::segment_index(double t) const {
  if (empty()) return -1;
  // Last segment owns its right endpoint.
  if (t >= times[times.size() - 2]) return segments() - 1;
  if (t <= times[0]) return 0;
  // times is sorted; find the segment with times[k] <= t < times[k+1].
  const double* begin = times.data();
  const double* end = times.data() + times.size();
  const auto it = std::upper_bound(begin, end, t);
  return static_cast<int>(it - begin) - 1;
}

Eigen::VectorXd PiecewiseConstantControl::at(double t) const {
  if (empty()) return Eigen::VectorXd(0);
  return values.row(segment_index(t)).transpose();
}

PiecewiseConstantControl PiecewiseConstantControl::on_grid(
    const Eigen::VectorXd& t_grid, const Eigen::MatrixXd& values) {
  if (values.rows() != t_grid.size() - 1)
    throw std::invalid_argument("on_grid: need one control row per grid interval");
  PiecewiseConstantControl c;
  c.times = t_grid;
  c.values = values;
  return c;
}

Eigen::VectorXd LinearOde::drive(double t) const {
  Eigen::VectorXd d = o;
  if (!control.empty() && b.cols() > 0) d += b * control.at(t);
  return d;
}

Eigen::VectorXd LinearOde::rhs(double t, const Eigen::VectorXd& z) const {
  return a * z + drive(t);
}

Eigen::MatrixXd euler_rollout(const LinearOde& ode, const Eigen::VectorXd& z0,
                              const Eigen::VectorXd& t_grid, const SolverConfig& cfg) {
  check_grid(t_grid);
  const auto n = t_grid.size();
  Eigen::MatrixXd out(n, z0.size());
  out.row(0) = z0.transpose();
  Eigen::VectorXd z = z0;
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    const double span = t_grid[k + 1] - t_grid[k];
    int sub = 1;
    if (cfg.step > 0.0 && cfg.step < span)
      sub = static_cast<int>(std::ceil(span / cfg.step));
    const double h = span / sub;
    double t = t_grid[k];
    for (int s = 0; s < sub; ++s) {
      z += h * ode.rhs(t, z);
      t += h;
    }
    if (!all_finite(z)) {
      Eigen::MatrixXd partial = out.topRows(k + 1);
      throw SolveError("euler_rollout: non-finite state at t=" + std::to_string(t),
                       std::move(partial));
    }
    out.row(k + 1) = z.transpose();
  }
  return out;
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                 a64 = 49.0 / 176, a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192,
                 a75 = -2187.0 / 6784, a76 = 11.0 / 84;
// Error weights: 5th order result minus embedded 4th order result.
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                 e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
// Dense-output coefficients (4th-order continuous extension).
constexpr double d1 = -12715105075.0 / 11282082432.0;
constexpr double d3 = 87487479700.0 / 32700410799.0;
constexpr double d4 = -10690763975.0 / 1880347072.0;
constexpr double d5 = 701980252875.0 / 199316789632.0;
constexpr double d6 = -1453857185.0 / 822651844.0;
constexpr double d7 = 69997945.0 / 29380423.0;

struct DenseSegment {
  double t0, h;
  Eigen::VectorXd r1, r2, r3, r4, r5;
  Eigen::VectorXd eval(double t) const {
    const double th = (t - t0) / h;
    const double th1 = 1.0 - th;
    return r1 + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)));
  }
};

double error_norm(const Eigen::VectorXd& err, const Eigen::VectorXd& y0,
                  const Eigen::VectorXd& y1, double rtol, double atol) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    const double sc = atol + rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
    const double e = err[i] / sc;
    acc += e * e;
  }
  return std::sqrt(acc / static_cast<double>(err.size()));
}

double initial_step(const LinearOde& ode, double t0, const Eigen::VectorXd& y0,
                    double span, double rtol, double atol) {
  const Eigen::VectorXd f0 = ode.rhs(t0, y0);
  double d0 = 0.0, d1n = 0.0;
  for (Eigen::Index i = 0; i < y0.size(); ++i) {
    const double sc = atol + rtol * std::abs(y0[i]);
    d0 += (y0[i] / sc) * (y0[i] / sc);
    d1n += (f0[i] / sc) * (f0[i] / sc);
  }
  d0 = std::sqrt(d0 / y0.size());
  d1n = std::sqrt(d1n / y0.size());
  double h0 = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
  h0 = std::min(h0, span);
  const Eigen::VectorXd y1 = y0 + h0 * f0;
  const Eigen::VectorXd f1 = ode.rhs(t0 + h0, y1);
  double d2 = 0.0;
  for (Eigen::Index i = 0; i < y0.size(); ++i) {
    const double sc = atol + rtol * std::abs(y0[i]);
    const double df = (f1[i] - f0[i]) / sc;
    d2 += df * df;
  }
  d2 = std::sqrt(d2 / y0.size()) / h0;
  double h1;
  if (std::max(d1n, d2) <= 1e-15)
    h1 = std::max(1e-6, h0 * 1e-3);
  else
    h1 = std::pow(0.01 / std::max(d1n, d2), 0.2);
  return std::min({100.0 * h0, h1, span});
}

}  // namespace

Eigen::MatrixXd dopri45_rollout(const LinearOde& ode, const Eigen::VectorXd& z0,
                                const Eigen::VectorXd& t_grid, const SolverConfig& cfg) {
  check_grid(t_grid);
  const auto nout = t_grid.size();
  const auto dim = z0.size();
  Eigen::MatrixXd out(nout, dim);
  out.row(0) = z0.transpose();
  if (nout == 1) return out;

  const double t_end = t_grid[nout - 1];
  Eigen::Index next_out = 1;

  double t = t_grid[0];
  Eigen::VectorXd y = z0;
  Eigen::VectorXd k1, k2, k3, k4, k5, k6, k7;

  // Controls are events: a step may never straddle a switch boundary.
  auto next_switch = [&](double from) {
    const auto& ct = ode.control.times;
    for (Eigen::Index i = 0; i < ct.size(); ++i)
      if (ct[i] > from + 1e-14 * std::max(1.0, std::abs(from))) return std::min(ct[i], t_end);
    return t_end;
  };

  double h = initial_step(ode, t, y, next_switch(t) - t, cfg.rtol, cfg.atol);
  double facold = 1e-4;
  constexpr double beta = 0.04, expo1 = 0.2 - beta * 0.75, safe = 0.9;
  constexpr double fac1 = 0.2, fac2 = 10.0;  // min/max step scale per step

  int steps = 0;
  while (t < t_end - 1e-14 * std::max(1.0, std::abs(t_end))) {
    if (++steps > cfg.max_steps) {
      Eigen::MatrixXd partial = out.topRows(next_out);
      throw SolveError("dopri45_rollout: max_steps exceeded at t=" + std::to_string(t),
                       std::move(partial));
    }
    const double stop = next_switch(t);
    bool clipped = false;
    if (t + h >= stop) {
      h = stop - t;
      clipped = true;
    }

    // Zero-order hold: the drive is constant on [t, stop), including the
    // step endpoint, so every stage evaluation shares it.
    const Eigen::VectorXd drive = ode.drive(t);
    auto f = [&](const Eigen::VectorXd& z) -> Eigen::VectorXd { return ode.a * z + drive; };

    k1 = f(y);
    k2 = f(y + h * (a21 * k1));
    k3 = f(y + h * (a31 * k1 + a32 * k2));
    k4 = f(y + h * (a41 * k1 + a42 * k2 + a43 * k3));
    k5 = f(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
    k6 = f(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
    const Eigen::VectorXd ynew =
        y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
    k7 = f(ynew);
    const Eigen::VectorXd err =
        h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

    const double errn = error_norm(err, y, ynew, cfg.rtol, cfg.atol);
    const double fac11 = std::pow(std::max(errn, 1e-30), expo1);
    if (errn <= 1.0) {
      // Accept; emit dense output for grid points inside (t, t+h].
      DenseSegment seg;
      seg.t0 = t;
      seg.h = h;
      seg.r1 = y;
      seg.r2 = ynew - y;
      seg.r3 = h * k1 - seg.r2;
      seg.r4 = seg.r2 - h * k7 - seg.r3;
      seg.r5 = h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
      const double tnew = t + h;
      while (next_out < nout && t_grid[next_out] <= tnew + 1e-12 * std::max(1.0, std::abs(tnew))) {
        out.row(next_out) = seg.eval(std::min(t_grid[next_out], tnew)).transpose();
        ++next_out;
      }
      if (!ynew.allFinite()) {
        Eigen::MatrixXd partial = out.topRows(next_out);
        throw SolveError("dopri45_rollout: non-finite state", std::move(partial));
      }
      t = tnew;
      y = ynew;
      facold = std::max(errn, 1e-4);
      double fac = fac11 / std::pow(facold, beta);
      fac = std::max(1.0 / fac2, std::min(1.0 / fac1, fac / safe));
      double hnew = h / fac;
      if (clipped) hnew = std::max(hnew, h);  // segment end clipped h, not the controller
      h = hnew;
    } else {
      h = h / std::min(1.0 / fac1, fac11 / safe);
    }
  }
  // Numeric slop can leave the final grid point un-emitted.
  while (next_out < nout) {
    out.row(next_out) = y.transpose();
    ++next_out;
  }
  return out;
}

Eigen::MatrixXd exact_linear_rollout(const LinearOde& ode, const Eigen::VectorXd& z0,
                                     const Eigen::VectorXd& t_grid) {
  check_grid(t_grid);
  const auto n = t_grid.size();
  const auto d = z0.size();
  Eigen::MatrixXd out(n, d);
  out.row(0) = z0.transpose();
  Eigen::VectorXd z = z0;
  // The exponential is reused while (h, drive) repeat, which covers the
  // common case of a uniform grid with constant or slowly switching controls.
  Eigen::MatrixXd m;
  Eigen::VectorXd last_drive;
  double last_h = std::numeric_limits<double>::quiet_NaN();
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    // Constant drive on [t_k, t_{k+1}) under zero-order hold.
    double t0 = t_grid[k];
    const double t1 = t_grid[k + 1];
    // Split at interior control switches so each exponential sees one segment.
    while (t0 < t1 - 1e-14 * std::max(1.0, std::abs(t1))) {
      double stop = t1;
      const auto& ct = ode.control.times;
      for (Eigen::Index i = 0; i < ct.size(); ++i)
        if (ct[i] > t0 + 1e-14 * std::max(1.0, std::abs(t0)) && ct[i] < stop) stop = ct[i];
      const double h = stop - t0;
      const Eigen::VectorXd drive = ode.drive(t0);
      if (h != last_h || last_drive.size() != drive.size() || last_drive != drive) {
        Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(d + 1, d + 1);
        aug.topLeftCorner(d, d) = ode.a;
        aug.topRightCorner(d, 1) = drive;
        m = (aug * h).exp();
        last_h = h;
        last_drive = drive;
      }
      z = m.topLeftCorner(d, d) * z + m.topRightCorner(d, 1);
      t0 = stop;
    }
    out.row(k + 1) = z.transpose();
  }
  return out;
}

Eigen::MatrixXd rollout(const LinearOde& ode, const Eigen::VectorXd& z0,
                        const Eigen::VectorXd& t_grid, const SolverConfig& cfg) {
  switch (cfg.kind) {
    case SolverKind::euler:
      return euler_rollout(ode, z0, t_grid, cfg);
    case SolverKind::dopri45:
      return dopri45_rollout(ode, z0, t_grid, cfg);
  }
  throw std::logic_error("rollout: unknown solver kind");
}

DiscreteMaps discretize_exact(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const Eigen::VectorXd& o, double h) {
  const auto d = a.rows();
  const auto u = b.cols();
  // exp([[A, I],[0, 0]] h) has  integral_0^h exp(A s) ds  in the top-right block.
  Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(2 * d, 2 * d);
  aug.topLeftCorner(d, d) = a;
  aug.topRightCorner(d, d) = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd m = (aug * h).exp();
  DiscreteMaps maps;
  maps.ad = m.topLeftCorner(d, d);
  const Eigen::MatrixXd integral = m.topRightCorner(d, d);
  maps.bd = u > 0 ? Eigen::MatrixXd(integral * b) : Eigen::MatrixXd(d, 0);
  maps.od = integral * o;
  return maps;
}

DiscreteMaps discretize_euler(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const Eigen::VectorXd& o, double h) {
  DiscreteMaps maps;
  maps.ad = Eigen::MatrixXd::Identity(a.rows(), a.cols()) + h * a;
  maps.bd = h * b;
  maps.od = h * o;
  return maps;
}

}  // namespace vcnode::odesolve
