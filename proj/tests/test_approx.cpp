#include "doctest.h"

#include <cmath>

#include "vcnode/nets.hpp"
#include "vcnode/optim.hpp"

using namespace vcnode;
using namespace vcnode::approx;
using Tp = Tape<double>;

TEST_CASE("tape basics: quadratic loss gradient is the point itself") {
  // loss = ||p||^2 / 2  ->  grad = p
  ParamSet<double> params;
  Mat<double> p(2, 3);
  p << 1, -2, 3, 0.5, 0, -1;
  params.add("p", p);
  auto [loss, g] = grad<double>(
      [](Tp& t, const TapeParams<double>& tp) {
        return t.scale(t.sum(t.square(tp["p"])), 0.5);
      },
      params);
  CHECK(loss == doctest::Approx(0.5 * p.squaredNorm()));
  CHECK((g.at("p") - p).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("constant loss has zero gradient") {
  ParamSet<double> params;
  params.add("p", Mat<double>::Ones(2, 2));
  auto [loss, g] = grad<double>(
      [](Tp& t, const TapeParams<double>&) {
        return t.constant(Mat<double>::Constant(1, 1, 3.0));
      },
      params);
  CHECK(loss == 3.0);
  CHECK(g.at("p").cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("matmul/slice/concat gradients match finite differences") {
  Rng rng(3);
  ParamSet<double> params;
  params.add("w1", uniform_fan_in<double>(4, 5, rng));
  params.add("w2", uniform_fan_in<double>(3, 2, rng));
  Mat<double> x = Mat<double>::Random(6, 4);
  auto loss_fn = [x](Tp& t, const TapeParams<double>& tp) {
    auto h = t.matmul(t.constant(x), tp["w1"]);            // 6x5
    auto left = t.cols(h, 0, 3);                           // 6x3
    auto right = t.cols(h, 2, 3);                          // 6x3
    auto mixed = t.hcat({t.matmul(left, tp["w2"]), right});  // 6x5
    auto top = t.rows(mixed, 0, 3);
    auto bottom = t.rows(mixed, 3, 3);
    auto stacked = t.vcat({t.hadamard(top, bottom), t.sub(top, bottom)});
    return t.sum(t.square(t.tanh_(stacked)));
  };
  Rng fd_rng(17);
  const auto rep = finite_diff_check(loss_fn, params, fd_rng, 1e-6, 1.0);
  CHECK(rep.checked > 0);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(5);
  ParamSet<double> params;
  params.add("a", Mat<double>::Random(3, 4) * 0.8);
  auto loss_fn = [](Tp& t, const TapeParams<double>& tp) {
    auto a = tp["a"];
    auto s = t.sigmoid(a);
    auto e = t.exp_(t.scale(a, 0.3));
    auto c = t.clamp(a, -0.5, 0.5);
    auto mix = t.add(t.hadamard(s, e), t.scale_rows(c, Vec<double>::LinSpaced(3, 0.5, 1.5)));
    return t.sum(t.square(mix));
  };
  Rng fd_rng(19);
  const auto rep = finite_diff_check(loss_fn, params, fd_rng, 1e-6, 1.0);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("batched matvec and outer product gradients") {
  Rng rng(7);
  ParamSet<double> params;
  params.add("mats", Mat<double>::Random(5, 6));  // 5 systems of 2x3
  params.add("xs", Mat<double>::Random(5, 3));
  params.add("r", Mat<double>::Random(5, 2));
  params.add("v", Mat<double>::Random(5, 3));
  auto loss_fn = [](Tp& t, const TapeParams<double>& tp) {
    auto mv = t.batched_matvec(tp["mats"], tp["xs"], 2, 3);      // 5x2
    auto outer = t.batched_outer(tp["r"], tp["v"]);              // 5x6
    auto mv2 = t.batched_matvec(outer, tp["xs"], 2, 3);          // 5x2
    return t.sum(t.square(t.add(mv, mv2)));
  };
  Rng fd_rng(23);
  const auto rep = finite_diff_check(loss_fn, params, fd_rng, 1e-6, 1.0);
  CHECK(rep.max_rel_err < 1e-7);

  // Hand value check: r = e1, v = e2 gives a single nonzero at (0,1) -> flat index 1.
  Tape<double> t;
  Mat<double> r = Mat<double>::Zero(1, 2), v = Mat<double>::Zero(1, 3);
  r(0, 0) = 1.0;
  v(0, 1) = 1.0;
  const auto out = t.value(t.batched_outer(t.constant(r), t.constant(v)));
  CHECK(out(0, 1) == 1.0);
  CHECK(out.sum() == 1.0);
}

TEST_CASE("mlp forward matches a hand-coded affine chain") {
  Rng rng(11);
  MlpSpec spec;
  spec.input_dim = 3;
  spec.output_dim = 2;
  spec.hidden = {8, 8};
  ParamSet<double> params;
  init_mlp(params, "net", spec, rng);
  Mat<double> x = Mat<double>::Random(5, 3);

  const Mat<double> y = mlp_apply(spec, params, "net", x);

  // Independent oracle: explicit loops, no tape.
  Mat<double> h = x;
  for (int l = 0; l < 3; ++l) {
    const auto& w = params.at("net.w" + std::to_string(l));
    const auto& b = params.at("net.b" + std::to_string(l));
    Mat<double> nh = Mat<double>::Zero(h.rows(), w.cols());
    for (Eigen::Index r = 0; r < h.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        double acc = b(0, c);
        for (Eigen::Index k = 0; k < w.rows(); ++k) acc += h(r, k) * w(k, c);
        nh(r, c) = l < 2 ? std::max(0.0, acc) : acc;
      }
    h = nh;
  }
  CHECK((y - h).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("mlp degenerate configurations") {
  MlpSpec spec;
  spec.input_dim = 3;
  spec.output_dim = 3;
  spec.hidden = {};
  ParamSet<double> params;
  params.add("id.w0", Mat<double>::Identity(3, 3));
  params.add("id.b0", Mat<double>::Zero(1, 3));
  Mat<double> x = Mat<double>::Random(4, 3);
  CHECK((mlp_apply(spec, params, "id", x) - x).cwiseAbs().maxCoeff() == 0.0);

  // Zero weights and biases -> zero output.
  ParamSet<double> zero;
  zero.add("z.w0", Mat<double>::Zero(3, 3));
  zero.add("z.b0", Mat<double>::Zero(1, 3));
  CHECK(mlp_apply(spec, zero, "z", x).cwiseAbs().maxCoeff() == 0.0);

  // Shape mismatch rejected.
  Tape<double> t;
  auto tp = TapeParams<double>::bind(t, zero);
  CHECK_THROWS(mlp_forward(t, spec, tp, "z", t.constant(Mat<double>::Random(2, 5))));
}

TEST_CASE("mlp batch consistency") {
  Rng rng(13);
  MlpSpec spec;
  spec.input_dim = 4;
  spec.output_dim = 3;
  spec.hidden = {16, 16};
  ParamSet<double> params;
  init_mlp(params, "net", spec, rng);
  Mat<double> x = Mat<double>::Random(7, 4);
  const Mat<double> batch = mlp_apply(spec, params, "net", x);
  for (int i = 0; i < 7; ++i) {
    const Mat<double> single = mlp_apply(spec, params, "net", Mat<double>(x.row(i)));
    CHECK((batch.row(i) - single.row(0)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

namespace {

std::vector<Tp::NodeId> as_steps(Tape<double>& t, const std::vector<Mat<double>>& xs) {
  std::vector<Tp::NodeId> out;
  for (const auto& x : xs) out.push_back(t.constant(x));
  return out;
}

}  // namespace

TEST_CASE("bilstm zero weights give a zero summary") {
  BiRnnSpec spec;
  spec.input_dim = 3;
  spec.state_dim = 4;
  spec.layers = 2;
  ParamSet<double> params;
  Rng rng(1);
  init_bilstm(params, "rnn", spec, rng);
  for (const auto& name : params.names()) params.at(name).setZero();

  Tape<double> t;
  auto tp = TapeParams<double>::bind(t, params);
  std::vector<Mat<double>> xs(6, Mat<double>::Random(2, 3));
  const auto summary = t.value(bilstm_summary(t, spec, tp, "rnn", as_steps(t, xs)));
  CHECK(summary.rows() == 2);
  CHECK(summary.cols() == 8);
  CHECK(summary.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("bilstm single step equals one cell application") {
  BiRnnSpec spec;
  spec.input_dim = 2;
  spec.state_dim = 3;
  spec.layers = 1;
  ParamSet<double> params;
  Rng rng(2);
  init_bilstm(params, "rnn", spec, rng);
  Mat<double> x = Mat<double>::Random(4, 2);

  Tape<double> t;
  auto tp = TapeParams<double>::bind(t, params);
  const auto summary = t.value(bilstm_summary(t, spec, tp, "rnn", {t.constant(x)}));

  Tape<double> t2;
  auto tp2 = TapeParams<double>::bind(t2, params);
  LstmState<double> zero{t2.constant(Mat<double>::Zero(4, 3)), t2.constant(Mat<double>::Zero(4, 3))};
  const auto f = lstm_cell(t2, tp2, "rnn", 0, true, t2.constant(x), zero);
  const auto b = lstm_cell(t2, tp2, "rnn", 0, false, t2.constant(x), zero);
  CHECK((summary.leftCols(3) - t2.value(f.h)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((summary.rightCols(3) - t2.value(b.h)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("bilstm matches a per-step unrolled oracle") {
  // Oracle: explicit per-gate loops for a 1-layer forward LSTM.
  BiRnnSpec spec;
  spec.input_dim = 2;
  spec.state_dim = 3;
  spec.layers = 1;
  ParamSet<double> params;
  Rng rng(4);
  init_bilstm(params, "rnn", spec, rng);
  std::vector<Mat<double>> xs;
  for (int tstep = 0; tstep < 5; ++tstep) xs.push_back(Mat<double>::Random(1, 2));

  Tape<double> t;
  auto tp = TapeParams<double>::bind(t, params);
  const auto summary = t.value(bilstm_summary(t, spec, tp, "rnn", as_steps(t, xs)));

  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const auto& wx = params.at("rnn.l0.f.wx");
  const auto& wh = params.at("rnn.l0.f.wh");
  const auto& bb = params.at("rnn.l0.f.b");
  Eigen::Vector3d h = Eigen::Vector3d::Zero(), c = Eigen::Vector3d::Zero();
  for (const auto& x : xs) {
    Eigen::VectorXd gates = (x * wx).transpose() + wh.transpose() * h + bb.transpose();
    for (int j = 0; j < 3; ++j) {
      const double gi = sig(gates[j]);
      const double gf = sig(gates[3 + j]);
      const double gc = std::tanh(gates[6 + j]);
      const double go = sig(gates[9 + j]);
      c[j] = gf * c[j] + gi * gc;
      h[j] = go * std::tanh(c[j]);
    }
  }
  CHECK((summary.leftCols(3).transpose() - h).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("palindromic input with tied directions yields mirrored summaries") {
  BiRnnSpec spec;
  spec.input_dim = 2;
  spec.state_dim = 3;
  spec.layers = 1;
  ParamSet<double> params;
  Rng rng(6);
  init_bilstm(params, "rnn", spec, rng);
  // Tie backward weights to forward ones.
  params.at("rnn.l0.b.wx") = params.at("rnn.l0.f.wx");
  params.at("rnn.l0.b.wh") = params.at("rnn.l0.f.wh");
  params.at("rnn.l0.b.b") = params.at("rnn.l0.f.b");

  Mat<double> a = Mat<double>::Random(1, 2), b = Mat<double>::Random(1, 2);
  std::vector<Mat<double>> pal = {a, b, b, a};  // reverse(pal) == pal

  Tape<double> t;
  auto tp = TapeParams<double>::bind(t, params);
  const auto summary = t.value(bilstm_summary(t, spec, tp, "rnn", as_steps(t, pal)));
  // Both directions see the same sequence, so the halves agree.
  CHECK((summary.leftCols(3) - summary.rightCols(3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("bilstm rejects an empty sequence") {
  BiRnnSpec spec;
  spec.input_dim = 2;
  ParamSet<double> params;
  Rng rng(8);
  init_bilstm(params, "rnn", spec, rng);
  Tape<double> t;
  auto tp = TapeParams<double>::bind(t, params);
  CHECK_THROWS(bilstm_summary(t, spec, tp, "rnn", {}));
}

TEST_CASE("bilstm gradient passes the finite-difference check") {
  BiRnnSpec spec;
  spec.input_dim = 2;
  spec.state_dim = 3;
  spec.layers = 2;
  ParamSet<double> params;
  Rng rng(9);
  init_bilstm(params, "rnn", spec, rng);
  std::vector<Mat<double>> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(Mat<double>::Random(2, 2));
  auto loss_fn = [&xs, &spec](Tp& t, const TapeParams<double>& tp) {
    return t.sum(t.square(bilstm_summary(t, spec, tp, "rnn", as_steps(t, xs))));
  };
  Rng fd_rng(29);
  const auto rep = finite_diff_check(loss_fn, params, fd_rng, 1e-5, 0.25);
  CHECK(rep.checked > 20);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamSet<double> params;
  params.add("p", Mat<double>::Constant(2, 2, 1.5));
  auto st = AdamState<double>::zeros_like(params);
  Gradient<double> g;
  g.add("p", Mat<double>::Zero(2, 2));
  adam_step(params, g, st, {});
  CHECK((params.at("p").array() == 1.5).all());
}

TEST_CASE("adam: first step moves by about -lr per coordinate") {
  ParamSet<double> params;
  params.add("p", Mat<double>::Zero(1, 3));
  auto st = AdamState<double>::zeros_like(params);
  Gradient<double> g;
  Mat<double> gv(1, 3);
  gv << 2.0, -0.5, 1e-3;
  g.add("p", gv);
  AdamConfig cfg;
  adam_step(params, g, st, cfg);
  for (int i = 0; i < 3; ++i)
    CHECK(params.at("p")(0, i) ==
          doctest::Approx(-cfg.lr * (gv(0, i) > 0 ? 1.0 : -1.0)).epsilon(1e-4));
}

TEST_CASE("adam runs are deterministic") {
  auto run = [] {
    Rng rng(42);
    ParamSet<double> params;
    params.add("p", uniform_fan_in<double>(3, 3, rng));
    auto st = AdamState<double>::zeros_like(params);
    for (int i = 0; i < 10; ++i) {
      auto [loss, g] = grad<double>(
          [](Tp& t, const TapeParams<double>& tp) { return t.sum(t.square(tp["p"])); },
          params);
      (void)loss;
      adam_step(params, g, st, {});
    }
    return params.at("p");
  };
  CHECK(run() == run());
}

TEST_CASE("gradient clipping rescales only above the threshold") {
  Gradient<double> g;
  g.add("a", Mat<double>::Constant(1, 4, 3.0));  // norm 6
  const double before = clip_grad_norm(g, 3.0);
  CHECK(before == doctest::Approx(6.0));
  double sq = g.at("a").squaredNorm();
  CHECK(std::sqrt(sq) == doctest::Approx(3.0));
  const double again = clip_grad_norm(g, 10.0);
  CHECK(again == doctest::Approx(3.0));
  CHECK(std::sqrt(g.at("a").squaredNorm()) == doctest::Approx(3.0));
}

TEST_CASE("finite differences on a quadratic are exact to 1e-9") {
  ParamSet<double> params;
  params.add("p", Mat<double>::Random(3, 3));
  auto loss_fn = [](Tp& t, const TapeParams<double>& tp) {
    return t.scale(t.sum(t.square(tp["p"])), 0.5);
  };
  Rng rng(31);
  const auto rep = finite_diff_check(loss_fn, params, rng, 1e-5, 1.0);
  CHECK(rep.max_rel_err <= 1e-9);
}

TEST_CASE("finite-difference harness skips rectifier kinks") {
  // A coordinate sitting exactly on the kink: the probe flips the sign trace.
  ParamSet<double> params;
  Mat<double> p(1, 2);
  p << 0.0, 1.0;  // first coordinate is on the kink
  params.add("p", p);
  auto loss_fn = [](Tp& t, const TapeParams<double>& tp) {
    return t.sum(t.relu(tp["p"]));
  };
  Rng rng(33);
  const auto rep = finite_diff_check(loss_fn, params, rng, 1e-5, 1.0);
  CHECK(rep.skipped_kinks > 0);
  CHECK(rep.max_rel_err < 1e-9);
}

TEST_CASE("non-finite loss is rejected") {
  ParamSet<double> params;
  params.add("p", Mat<double>::Constant(1, 1, 1e308));
  auto loss_fn = [](Tp& t, const TapeParams<double>& tp) {
    return t.sum(t.square(tp["p"]));  // overflows to inf
  };
  CHECK_THROWS(grad(loss_fn, params));
}

TEST_CASE("float and double tapes agree on a small composite") {
  Rng rng(35);
  MlpSpec spec;
  spec.input_dim = 3;
  spec.output_dim = 2;
  spec.hidden = {8};
  ParamSet<double> pd;
  init_mlp(pd, "net", spec, rng);
  const auto pf = pd.cast<float>();
  Mat<double> x = Mat<double>::Random(4, 3);
  const auto yd = mlp_apply(spec, pd, "net", x);
  const auto yf = mlp_apply(spec, pf, "net", Mat<float>(x.cast<float>()));
  CHECK((yd - yf.cast<double>()).cwiseAbs().maxCoeff() < 1e-5);
}
