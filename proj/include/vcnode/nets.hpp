#pragma once

// Parameter containers, feedforward and bidirectional-LSTM forward passes on
// the tape, and initializers. Affine layers use uniform fan-in init;
// recurrent weights are orthogonal per gate block.

#include <Eigen/Dense>

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vcnode/rng.hpp"
#include "vcnode/tape.hpp"

namespace vcnode::approx {

template <typename S>
class ParamSet {
 public:
  void add(const std::string& name, Mat<S> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate param: " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Mat<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no param: " + name);
    return values_[it->second];
  }
  const Mat<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no param: " + name);
    return values_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t count() const { return names_.size(); }
  Mat<S>& value(std::size_t i) { return values_[i]; }
  const Mat<S>& value(std::size_t i) const { return values_[i]; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
  }

  template <typename T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (std::size_t i = 0; i < names_.size(); ++i)
      out.add(names_[i], values_[i].template cast<T>());
    return out;
  }

  // Flat view in name order, column-major within each tensor.
  Vec<S> flatten() const {
    Vec<S> out(static_cast<Eigen::Index>(total_size()));
    Eigen::Index at = 0;
    for (const auto& v : values_) {
      out.segment(at, v.size()) = Eigen::Map<const Vec<S>>(v.data(), v.size());
      at += v.size();
    }
    return out;
  }
  void unflatten(const Vec<S>& flat) {
    Eigen::Index at = 0;
    for (auto& v : values_) {
      Eigen::Map<Vec<S>>(v.data(), v.size()) = flat.segment(at, v.size());
      at += v.size();
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat<S>> values_;
  std::map<std::string, std::size_t> index_;
};

template <typename S>
using Gradient = ParamSet<S>;

// Leaf nodes for every parameter, created at the start of a loss evaluation.
template <typename S>
struct TapeParams {
  Tape<S>* tape = nullptr;
  std::map<std::string, typename Tape<S>::NodeId> ids;

  static TapeParams bind(Tape<S>& t, const ParamSet<S>& params) {
    TapeParams tp;
    tp.tape = &t;
    for (std::size_t i = 0; i < params.count(); ++i)
      tp.ids[params.names()[i]] = t.leaf(params.value(i));
    return tp;
  }

  typename Tape<S>::NodeId operator[](const std::string& name) const {
    auto it = ids.find(name);
    if (it == ids.end()) throw std::out_of_range("no bound param: " + name);
    return it->second;
  }
};

// Loss value + gradient of a tape-built scalar loss.
template <typename S, typename LossFn>
std::pair<S, Gradient<S>> grad(const LossFn& loss_fn, const ParamSet<S>& params) {
  Tape<S> tape;
  auto tp = TapeParams<S>::bind(tape, params);
  const auto root = loss_fn(tape, tp);
  const S loss = tape.value(root)(0, 0);
  if (!std::isfinite(static_cast<double>(loss)))
    throw std::runtime_error("grad: non-finite loss");
  tape.backward(root);
  Gradient<S> g;
  for (std::size_t i = 0; i < params.count(); ++i)
    g.add(params.names()[i], tape.grad_or_zero(tp[params.names()[i]]));
  return {loss, std::move(g)};
}

// ---------------------------------------------------------------------------
// Initializers

template <typename S>
Mat<S> uniform_fan_in(Eigen::Index in, Eigen::Index out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in > 0 ? in : 1));
  Mat<S> w(in, out);
  for (Eigen::Index r = 0; r < in; ++r)
    for (Eigen::Index c = 0; c < out; ++c)
      w(r, c) = static_cast<S>(rng.uniform(-bound, bound));
  return w;
}

template <typename S>
Mat<S> orthogonal(Eigen::Index n, Rng& rng) {
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) a(r, c) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  // Fix signs so the factorization is unique.
  const Eigen::MatrixXd r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < n; ++c)
    if (r(c, c) < 0) q.col(c) = -q.col(c);
  return q.cast<S>();
}

// ---------------------------------------------------------------------------
// MLP

struct MlpSpec {
  int input_dim = 0;
  int output_dim = 0;
  std::vector<int> hidden{128, 128, 128, 128};  // rectifier activations
};

template <typename S>
void init_mlp(ParamSet<S>& params, const std::string& prefix, const MlpSpec& spec, Rng& rng) {
  int in = spec.input_dim;
  std::vector<int> widths = spec.hidden;
  widths.push_back(spec.output_dim);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    params.add(prefix + ".w" + std::to_string(l), uniform_fan_in<S>(in, widths[l], rng));
    params.add(prefix + ".b" + std::to_string(l), Mat<S>::Zero(1, widths[l]));
    in = widths[l];
  }
}

// Affine + rectifier stack with a linear output layer; x is B x input_dim.
template <typename S>
typename Tape<S>::NodeId mlp_forward(Tape<S>& tape, const MlpSpec& spec,
                                     const TapeParams<S>& tp, const std::string& prefix,
                                     typename Tape<S>::NodeId x) {
  if (tape.value(x).cols() != spec.input_dim)
    throw std::invalid_argument("mlp_forward: input dim mismatch");
  auto h = x;
  const std::size_t layers = spec.hidden.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    h = tape.affine(h, tp[prefix + ".w" + std::to_string(l)],
                    tp[prefix + ".b" + std::to_string(l)]);
    if (l + 1 < layers) h = tape.relu(h);
  }
  return h;
}

// Plain (non-tape) forward for small inference paths.
template <typename S>
Mat<S> mlp_apply(const MlpSpec& spec, const ParamSet<S>& params, const std::string& prefix,
                 const Mat<S>& x) {
  Tape<S> tape;
  auto tp = TapeParams<S>::bind(tape, params);
  return tape.value(mlp_forward(tape, spec, tp, prefix, tape.constant(x)));
}

// ---------------------------------------------------------------------------
// Bidirectional LSTM encoder

struct BiRnnSpec {
  int input_dim = 0;
  int state_dim = 32;
  int layers = 2;
  int summary_dim() const { return 2 * state_dim; }
};

namespace detail {
inline std::string lstm_name(const std::string& prefix, int layer, bool fwd,
                             const char* what) {
  return prefix + ".l" + std::to_string(layer) + (fwd ? ".f." : ".b.") + what;
}
}  // namespace detail

template <typename S>
void init_bilstm(ParamSet<S>& params, const std::string& prefix, const BiRnnSpec& spec,
                 Rng& rng) {
  const int h = spec.state_dim;
  for (int l = 0; l < spec.layers; ++l) {
    const int in = l == 0 ? spec.input_dim : 2 * h;
    for (bool fwd : {true, false}) {
      params.add(detail::lstm_name(prefix, l, fwd, "wx"), uniform_fan_in<S>(in, 4 * h, rng));
      Mat<S> wh(h, 4 * h);
      for (int g = 0; g < 4; ++g) wh.middleCols(g * h, h) = orthogonal<S>(h, rng);
      params.add(detail::lstm_name(prefix, l, fwd, "wh"), std::move(wh));
      Mat<S> b = Mat<S>::Zero(1, 4 * h);
      b.middleCols(h, h).setConstant(S(1));  // forget-gate bias
      params.add(detail::lstm_name(prefix, l, fwd, "b"), std::move(b));
    }
  }
}

// One cell step; gate order [input, forget, cell, output].
template <typename S>
struct LstmState {
  typename Tape<S>::NodeId h, c;
};

template <typename S>
LstmState<S> lstm_cell(Tape<S>& tape, const TapeParams<S>& tp, const std::string& prefix,
                       int layer, bool fwd, typename Tape<S>::NodeId x, LstmState<S> prev) {
  const auto wx = tp[detail::lstm_name(prefix, layer, fwd, "wx")];
  const auto wh = tp[detail::lstm_name(prefix, layer, fwd, "wh")];
  const auto b = tp[detail::lstm_name(prefix, layer, fwd, "b")];
  const Eigen::Index hdim = tape.value(wh).rows();
  auto gates = tape.add_rowvec(tape.add(tape.matmul(x, wx), tape.matmul(prev.h, wh)), b);
  auto gi = tape.sigmoid(tape.cols(gates, 0, hdim));
  auto gf = tape.sigmoid(tape.cols(gates, hdim, hdim));
  auto gc = tape.tanh_(tape.cols(gates, 2 * hdim, hdim));
  auto go = tape.sigmoid(tape.cols(gates, 3 * hdim, hdim));
  LstmState<S> next;
  next.c = tape.add(tape.hadamard(gf, prev.c), tape.hadamard(gi, gc));
  next.h = tape.hadamard(go, tape.tanh_(next.c));
  return next;
}

// Full bidirectional pass; xs[t] is B x input_dim. Returns the concatenation
// of the top layer's final forward and final backward hidden states (B x 2H).
template <typename S>
typename Tape<S>::NodeId bilstm_summary(Tape<S>& tape, const BiRnnSpec& spec,
                                        const TapeParams<S>& tp, const std::string& prefix,
                                        const std::vector<typename Tape<S>::NodeId>& xs) {
  if (xs.empty()) throw std::invalid_argument("bilstm_summary: empty sequence");
  const auto batch = tape.value(xs[0]).rows();
  const int steps = static_cast<int>(xs.size());
  const int h = spec.state_dim;

  std::vector<typename Tape<S>::NodeId> layer_in = xs;
  typename Tape<S>::NodeId last_f{}, last_b{};
  for (int l = 0; l < spec.layers; ++l) {
    std::vector<typename Tape<S>::NodeId> out_f(steps), out_b(steps);
    LstmState<S> sf{tape.constant(Mat<S>::Zero(batch, h)), tape.constant(Mat<S>::Zero(batch, h))};
    LstmState<S> sb = sf;
    for (int t = 0; t < steps; ++t) {
      sf = lstm_cell(tape, tp, prefix, l, true, layer_in[t], sf);
      out_f[t] = sf.h;
      sb = lstm_cell(tape, tp, prefix, l, false, layer_in[steps - 1 - t], sb);
      out_b[steps - 1 - t] = sb.h;
    }
    last_f = sf.h;
    last_b = sb.h;
    if (l + 1 < spec.layers) {
      layer_in.resize(static_cast<std::size_t>(steps));
      for (int t = 0; t < steps; ++t) layer_in[t] = tape.hcat({out_f[t], out_b[t]});
    }
  }
  return tape.hcat({last_f, last_b});
}

}  // namespace vcnode::approx
