#pragma once

// Adam optimizer and the central-difference gradient validation harness.

#include <cmath>
#include <functional>
#include <optional>

#include "vcnode/nets.hpp"

namespace vcnode::approx {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  Gradient<S> m, v;
  long step = 0;

  static AdamState zeros_like(const ParamSet<S>& params) {
    AdamState st;
    for (std::size_t i = 0; i < params.count(); ++i) {
      st.m.add(params.names()[i], Mat<S>::Zero(params.value(i).rows(), params.value(i).cols()));
      st.v.add(params.names()[i], Mat<S>::Zero(params.value(i).rows(), params.value(i).cols()));
    }
    return st;
  }
};

template <typename S>
void adam_step(ParamSet<S>& params, const Gradient<S>& g, AdamState<S>& st,
               const AdamConfig& cfg) {
  st.step += 1;
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S corr1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(st.step)));
  const S corr2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(st.step)));
  const S lr = static_cast<S>(cfg.lr), eps = static_cast<S>(cfg.eps);
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& m = st.m.value(i);
    auto& v = st.v.value(i);
    const auto& gi = g.value(i);
    m = b1 * m + (S(1) - b1) * gi;
    v = (b2 * v).eval();
    v.array() += (S(1) - b2) * gi.array().square();
    const auto mhat = m.array() / corr1;
    const auto vhat = v.array() / corr2;
    params.value(i).array() -= lr * mhat / (vhat.sqrt() + eps);
  }
}

// Rescales g in place when its global L2 norm exceeds max_norm; returns the
// norm before clipping.
template <typename S>
double clip_grad_norm(Gradient<S>& g, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < g.count(); ++i)
    sq += static_cast<double>(g.value(i).squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S s = static_cast<S>(max_norm / norm);
    for (std::size_t i = 0; i < g.count(); ++i) g.value(i) *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Finite-difference check
//
// Central differences on a random coordinate subsample. Coordinates whose
// +/- eps probes flip any rectifier preactivation sign are excluded: the
// analytic subgradient and the difference quotient legitimately disagree on
// a kink. The relative-error denominator carries a noise floor of
// max(1, |f|) * 1e-11 / eps: the difference quotient rounds at roughly
// |f|*eps_machine/eps (observed a few 1e-9 for |f|~300, eps=1e-5), so below
// ~1e4 times that scale it certifies nothing.

struct FdReport {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped_kinks = 0;
};

template <typename S, typename LossFn>
FdReport finite_diff_check(const LossFn& loss_fn, const ParamSet<S>& params, Rng& rng,
                           double eps = 1e-5, double sample_frac = 0.05) {
  auto eval = [&](const ParamSet<S>& p, std::vector<std::uint8_t>* signs) {
    Tape<S> tape;
    tape.set_record_relu_signs(signs != nullptr);
    auto tp = TapeParams<S>::bind(tape, p);
    const auto root = loss_fn(tape, tp);
    if (signs) *signs = tape.relu_signs();
    return static_cast<double>(tape.value(root)(0, 0));
  };

  auto [loss0, analytic] = grad(loss_fn, params);
  std::vector<std::uint8_t> base_signs;
  eval(params, &base_signs);
  const double noise_floor =
      std::max(1.0, std::abs(static_cast<double>(loss0))) * 1e-11 / eps;

  const auto total = static_cast<Eigen::Index>(params.total_size());
  auto n_check = static_cast<Eigen::Index>(std::ceil(sample_frac * static_cast<double>(total)));
  n_check = std::min(total, std::max<Eigen::Index>(n_check, 16));

  // Distinct coordinates via a partial Fisher-Yates shuffle.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(total));
  for (Eigen::Index i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i;
  for (Eigen::Index i = 0; i < n_check; ++i) {
    const auto j = i + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(total - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }

  ParamSet<S> probe = params;
  Vec<S> flat = params.flatten();
  const Vec<S> gflat = analytic.flatten();

  FdReport rep;
  for (Eigen::Index k = 0; k < n_check; ++k) {
    const auto j = order[static_cast<std::size_t>(k)];
    const S saved = flat[j];

    std::vector<std::uint8_t> signs_p, signs_m;
    flat[j] = saved + static_cast<S>(eps);
    probe.unflatten(flat);
    const double fp = eval(probe, &signs_p);
    flat[j] = saved - static_cast<S>(eps);
    probe.unflatten(flat);
    const double fm = eval(probe, &signs_m);
    flat[j] = saved;
    probe.unflatten(flat);

    if (signs_p != base_signs || signs_m != base_signs) {
      ++rep.skipped_kinks;
      continue;
    }
    const double fd = (fp - fm) / (2.0 * eps);
    const double an = static_cast<double>(gflat[j]);
    const double denom = std::max({std::abs(fd), std::abs(an), noise_floor});
    rep.max_rel_err = std::max(rep.max_rel_err, std::abs(fd - an) / denom);
    ++rep.checked;
  }
  return rep;
}

}  // namespace vcnode::approx
