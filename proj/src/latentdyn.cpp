#include "vcnode/latentdyn.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>

#include "vcnode/checkpoint.hpp"

namespace vcnode::latentdyn {

using approx::Mat;
using approx::MlpSpec;
using approx::ParamSet;
using approx::TapeParams;
using approx::Vec;
using nlohmann::json;

namespace {

MlpSpec enc_spec(const ModelConfig& c) { return {c.obs_dim, c.latent_dim, c.hidden}; }
MlpSpec dec_spec(const ModelConfig& c) { return {c.latent_dim, c.obs_dim, c.hidden}; }
MlpSpec dyn_spec(const ModelConfig& c) { return {c.embed_dim(), c.embed_dim(), c.hidden}; }
MlpSpec head_spec(const ModelConfig& c, int summary) { return {summary, c.embed_dim(), {}}; }
approx::BiRnnSpec rnn_spec(const ModelConfig& c) {
  return {c.latent_dim + c.u_dim, c.rnn_state_dim, c.rnn_layers};
}

constexpr double kLogvarClamp = 10.0;

}  // namespace

json ModelConfig::to_json() const {
  return json{{"obs_dim", obs_dim},
              {"u_dim", u_dim},
              {"latent_dim", latent_dim},
              {"mode", to_string(mode)},
              {"use_dynamics_mlp", use_dynamics_mlp},
              {"sigma_obs", sigma_obs},
              {"hidden", hidden},
              {"rnn_state_dim", rnn_state_dim},
              {"rnn_layers", rnn_layers}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.obs_dim = j.at("obs_dim").get<int>();
  c.u_dim = j.at("u_dim").get<int>();
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.mode = unpack_mode_from(j.value("mode", std::string("full")));
  c.use_dynamics_mlp = j.value("use_dynamics_mlp", false);
  c.sigma_obs = j.value("sigma_obs", c.sigma_obs);
  c.hidden = j.value("hidden", c.hidden);
  c.rnn_state_dim = j.value("rnn_state_dim", c.rnn_state_dim);
  c.rnn_layers = j.value("rnn_layers", c.rnn_layers);
  return c;
}

DynamicsEmbedding unpack_embedding(const ModelConfig& cfg, const Eigen::VectorXd& d_vec) {
  if (d_vec.size() != cfg.embed_dim())
    throw std::invalid_argument("unpack_embedding: vector length does not match mode");
  const int d = cfg.latent_dim;
  const int u = cfg.u_dim;
  DynamicsEmbedding emb;
  Eigen::Index at = 0;
  emb.a.resize(d, d);
  if (cfg.mode == UnpackMode::full) {
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) emb.a(r, c) = d_vec[at++];
  } else {
    const Eigen::VectorXd r = d_vec.segment(0, d);
    const Eigen::VectorXd v = d_vec.segment(d, d);
    emb.a = r * v.transpose();
    at = 2 * d;
  }
  emb.b.resize(d, u);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < u; ++c) emb.b(r, c) = d_vec[at++];
  emb.o = d_vec.segment(at, d);
  return emb;
}

Eigen::VectorXd pack_embedding(const ModelConfig& cfg, const DynamicsEmbedding& emb) {
  if (cfg.mode != UnpackMode::full)
    throw std::invalid_argument("pack_embedding: only the full mode is invertible");
  const int d = cfg.latent_dim;
  const int u = cfg.u_dim;
  Eigen::VectorXd out(cfg.embed_dim());
  Eigen::Index at = 0;
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) out[at++] = emb.a(r, c);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < u; ++c) out[at++] = emb.b(r, c);
  out.segment(at, d) = emb.o;
  return out;
}

Eigen::VectorXd sample_dynamics(const DynamicsPosterior& post, Rng& rng) {
  Eigen::VectorXd d(post.mean.size());
  for (Eigen::Index i = 0; i < d.size(); ++i)
    d[i] = post.mean[i] + std::exp(0.5 * post.logvar[i]) * rng.normal();
  return d;
}

double gaussian_kl(const DynamicsPosterior& post) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < post.mean.size(); ++i)
    acc += std::exp(post.logvar[i]) + post.mean[i] * post.mean[i] - 1.0 - post.logvar[i];
  return 0.5 * acc;
}

// ---------------------------------------------------------------------------
// Model

template <typename S>
Model<S> Model<S>::init(const ModelConfig& cfg, Rng& rng) {
  Model m;
  m.cfg = cfg;
  init_mlp(m.params, "enc", enc_spec(cfg), rng);
  init_mlp(m.params, "dec", dec_spec(cfg), rng);
  init_bilstm(m.params, "rnn", rnn_spec(cfg), rng);
  init_mlp(m.params, "head_mean", head_spec(cfg, rnn_spec(cfg).summary_dim()), rng);
  init_mlp(m.params, "head_logvar", head_spec(cfg, rnn_spec(cfg).summary_dim()), rng);
  if (cfg.use_dynamics_mlp) init_mlp(m.params, "dyn", dyn_spec(cfg), rng);
  // Embeddings start as small deviations around identity dynamics with a
  // tight posterior; a wide posterior at init blows up the Euler unroll.
  m.params.at("head_mean.w0") *= S(0.01);
  m.params.at("head_logvar.w0") *= S(0.01);
  m.params.at("head_logvar.b0").setConstant(S(-4));
  return m;
}

template <typename S>
Mat<S> Model<S>::encode(const Mat<S>& states) const {
  return approx::mlp_apply(enc_spec(cfg), params, "enc", states);
}

template <typename S>
Mat<S> Model<S>::decode(const Mat<S>& latents) const {
  return approx::mlp_apply(dec_spec(cfg), params, "dec", latents);
}

template <typename S>
DynamicsPosterior Model<S>::infer_posterior(const Mat<S>& z_context,
                                            const Mat<S>& u_context) const {
  const auto T = z_context.rows();
  if (T < 2) throw std::invalid_argument("infer_posterior: context shorter than 2 points");
  if (u_context.rows() != T - 1 || u_context.cols() != cfg.u_dim)
    throw std::invalid_argument("infer_posterior: control shape mismatch");

  approx::Tape<S> tape;
  auto tp = TapeParams<S>::bind(tape, params);
  std::vector<typename approx::Tape<S>::NodeId> steps;
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    auto z = tape.constant(z_context.row(t));
    if (cfg.u_dim > 0)
      steps.push_back(tape.hcat({z, tape.constant(u_context.row(t))}));
    else
      steps.push_back(z);
  }
  auto summary = bilstm_summary(tape, rnn_spec(cfg), tp, "rnn", steps);
  auto mean = mlp_forward(tape, head_spec(cfg, rnn_spec(cfg).summary_dim()), tp, "head_mean",
                          summary);
  auto logvar = tape.clamp(mlp_forward(tape, head_spec(cfg, rnn_spec(cfg).summary_dim()), tp,
                                       "head_logvar", summary),
                           S(-kLogvarClamp), S(kLogvarClamp));
  DynamicsPosterior post;
  post.mean = tape.value(mean).row(0).transpose().template cast<double>();
  post.logvar = tape.value(logvar).row(0).transpose().template cast<double>();
  return post;
}

template <typename S>
DynamicsEmbedding Model<S>::unpack_dynamics(const Eigen::VectorXd& d_vec) const {
  Eigen::VectorXd v = d_vec;
  if (cfg.use_dynamics_mlp) {
    const Mat<S> out =
        approx::mlp_apply(dyn_spec(cfg), params, "dyn", Mat<S>(v.transpose().cast<S>()));
    v = out.row(0).transpose().template cast<double>();
  }
  return unpack_embedding(cfg, v);
}

Eigen::MatrixXd predict_latent(const Eigen::VectorXd& z0, const DynamicsEmbedding& emb,
                               const Eigen::MatrixXd& u_future, const Eigen::VectorXd& t_grid,
                               const odesolve::SolverConfig& solver) {
  odesolve::LinearOde ode;
  ode.a = emb.a;
  ode.b = emb.b;
  ode.o = emb.o;
  if (emb.b.cols() > 0) ode.control = odesolve::PiecewiseConstantControl::on_grid(t_grid, u_future);
  return odesolve::rollout(ode, z0, t_grid, solver);
}

template <typename S>
Eigen::MatrixXd predict_trajectory(const Model<S>& model, const Eigen::MatrixXd& x_context,
                                   const Eigen::MatrixXd& u_context,
                                   const Eigen::MatrixXd& u_future,
                                   const Eigen::VectorXd& t_future,
                                   const odesolve::SolverConfig& solver,
                                   EmbeddingChoice choice, Rng* rng,
                                   const DynamicsEmbedding* injected) {
  const Mat<S> z_ctx = model.encode(x_context.cast<S>());
  DynamicsEmbedding emb;
  if (injected) {
    emb = *injected;
  } else {
    const auto post = model.infer_posterior(z_ctx, Mat<S>(u_context.cast<S>()));
    Eigen::VectorXd d_vec;
    if (choice == EmbeddingChoice::sample) {
      if (!rng) throw std::invalid_argument("predict_trajectory: sampling needs an rng");
      d_vec = sample_dynamics(post, *rng);
    } else {
      d_vec = post.mean;
    }
    emb = model.unpack_dynamics(d_vec);
  }
  const Eigen::VectorXd z0 =
      z_ctx.row(z_ctx.rows() - 1).transpose().template cast<double>();
  const Eigen::MatrixXd z_path = predict_latent(z0, emb, u_future, t_future, solver);
  const Mat<S> decoded =
      model.decode(Mat<S>(z_path.bottomRows(z_path.rows() - 1).cast<S>()));
  return decoded.template cast<double>();
}

// ---------------------------------------------------------------------------
// Batched graphs

template <typename S>
WindowBatch<S> WindowBatch<S>::assemble(const std::vector<envsim::Window>& pool,
                                        const std::vector<int>& indices) {
  WindowBatch b;
  if (indices.empty()) return b;
  const auto& first = pool[static_cast<std::size_t>(indices[0])];
  b.count = static_cast<int>(indices.size());
  b.length = first.length();
  b.split = first.split_index;
  b.obs_dim = static_cast<int>(first.states.cols());
  b.u_dim = static_cast<int>(first.controls.cols());
  b.states.resize(static_cast<Eigen::Index>(b.length) * b.count, b.obs_dim);
  b.controls.assign(static_cast<std::size_t>(b.length - 1), Mat<S>(b.count, b.u_dim));
  for (int i = 0; i < b.count; ++i) {
    const auto& w = pool[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
    if (w.length() != b.length || w.split_index != b.split)
      throw std::invalid_argument("WindowBatch: inconsistent window geometry");
    for (int t = 0; t < b.length; ++t)
      b.states.row(static_cast<Eigen::Index>(t) * b.count + i) =
          w.states.row(t).template cast<S>();
    for (int t = 0; t + 1 < b.length; ++t)
      b.controls[static_cast<std::size_t>(t)].row(i) = w.controls.row(t).template cast<S>();
  }
  return b;
}

template <typename S>
ElboNodes<S> elbo_graph(approx::Tape<S>& tape, const TapeParams<S>& tp, const ModelConfig& cfg,
                        const WindowBatch<S>& batch, double dt, const ElboOptions<S>& opts) {
  using NodeId = typename approx::Tape<S>::NodeId;
  const int B = batch.count;
  const int L = batch.length;
  const int split = batch.split;
  const int d = cfg.latent_dim;
  const int offset = opts.start_offset < 0 ? split : opts.start_offset;
  if (offset < 0 || offset >= L - 1)
    throw std::invalid_argument("elbo_graph: start offset outside the window");
  const double scale = opts.loss_scale > 0 ? opts.loss_scale : 1.0 / B;

  // Encode every window point in one stacked pass.
  auto z_all = mlp_forward(tape, enc_spec(cfg), tp, "enc", tape.constant(batch.states));
  auto z_at = [&](int t) { return tape.rows(z_all, static_cast<Eigen::Index>(t) * B, B); };

  // Posterior from the context transitions (z_t, u_t), t = 0..split-1.
  std::vector<NodeId> steps;
  steps.reserve(static_cast<std::size_t>(split));
  std::vector<NodeId> u_nodes(static_cast<std::size_t>(L - 1));
  for (int t = 0; t + 1 < L; ++t) u_nodes[static_cast<std::size_t>(t)] =
      tape.constant(batch.controls[static_cast<std::size_t>(t)]);
  for (int t = 0; t < split; ++t) {
    if (cfg.u_dim > 0)
      steps.push_back(tape.hcat({z_at(t), u_nodes[static_cast<std::size_t>(t)]}));
    else
      steps.push_back(z_at(t));
  }
  auto summary = bilstm_summary(tape, rnn_spec(cfg), tp, "rnn", steps);
  const auto hspec = head_spec(cfg, rnn_spec(cfg).summary_dim());
  auto mean = mlp_forward(tape, hspec, tp, "head_mean", summary);
  auto logvar = tape.clamp(mlp_forward(tape, hspec, tp, "head_logvar", summary),
                           S(-kLogvarClamp), S(kLogvarClamp));

  // Reparameterized embedding (posterior mean when eps is absent).
  NodeId d_vec = mean;
  if (opts.eps) {
    auto sd = tape.exp_(tape.scale(logvar, S(0.5)));
    d_vec = tape.add(mean, tape.hadamard(sd, tape.constant(*opts.eps)));
  }
  if (cfg.use_dynamics_mlp) d_vec = mlp_forward(tape, dyn_spec(cfg), tp, "dyn", d_vec);

  // Unpack into per-window (a, b, o).
  NodeId a_flat, b_flat{}, o_vec;
  if (cfg.mode == UnpackMode::full) {
    a_flat = tape.cols(d_vec, 0, d * d);
    if (cfg.u_dim > 0) b_flat = tape.cols(d_vec, d * d, d * cfg.u_dim);
    o_vec = tape.cols(d_vec, d * d + d * cfg.u_dim, d);
  } else {
    auto r = tape.cols(d_vec, 0, d);
    auto v = tape.cols(d_vec, d, d);
    a_flat = tape.batched_outer(r, v);
    if (cfg.u_dim > 0) b_flat = tape.cols(d_vec, 2 * d, d * cfg.u_dim);
    o_vec = tape.cols(d_vec, 2 * d + d * cfg.u_dim, d);
  }

  // Euler rollout from the offset point, optionally teacher-forced.
  const S h = static_cast<S>(dt);
  NodeId z_cur = z_at(offset);
  std::vector<NodeId> preds;
  preds.reserve(static_cast<std::size_t>(L - 1 - offset));
  for (int t = offset; t + 1 < L; ++t) {
    NodeId z_in = z_cur;
    if (t > offset && opts.teacher) {
      const auto& mask = (*opts.teacher)[static_cast<std::size_t>(t - offset - 1)];
      if (mask.size() > 0 && mask.maxCoeff() > S(0)) {
        Vec<S> keep = Vec<S>::Ones(B) - mask;
        z_in = tape.add(tape.scale_rows(z_at(t), mask), tape.scale_rows(z_cur, keep));
      }
    }
    auto dz = tape.batched_matvec(a_flat, z_in, d, d);
    if (cfg.u_dim > 0)
      dz = tape.add(dz, tape.batched_matvec(b_flat, u_nodes[static_cast<std::size_t>(t)], d,
                                            cfg.u_dim));
    dz = tape.add(dz, o_vec);
    z_cur = tape.add(z_in, tape.scale(dz, h));
    preds.push_back(z_cur);
  }

  // Decode the whole rollout in one stacked pass and score it.
  auto pred_stack = preds.size() == 1 ? preds[0] : tape.vcat(preds);
  auto decoded = mlp_forward(tape, dec_spec(cfg), tp, "dec", pred_stack);
  const Eigen::Index truth_rows = static_cast<Eigen::Index>(L - 1 - offset) * B;
  auto truth = tape.constant(
      Mat<S>(batch.states.middleRows(static_cast<Eigen::Index>(offset + 1) * B, truth_rows)));
  auto sq = tape.square(tape.sub(decoded, truth));
  const S recon_w = static_cast<S>(scale / (2.0 * cfg.sigma_obs * cfg.sigma_obs));
  auto recon = tape.scale(tape.sum(sq), recon_w);

  // Closed-form KL against the unit prior.
  auto kl_inner = tape.sub(tape.add_scalar(tape.add(tape.exp_(logvar), tape.square(mean)), S(-1)),
                           logvar);
  auto kl = tape.scale(tape.sum(kl_inner), static_cast<S>(0.5 * scale));

  ElboNodes<S> out;
  out.recon = recon;
  out.kl = kl;
  out.loss = tape.add(recon, tape.scale(kl, static_cast<S>(opts.kl_weight)));
  out.pred = decoded;
  out.pred_steps = L - 1 - offset;
  return out;
}

template <typename S>
ElboParts<S> elbo_loss(const Model<S>& model, const envsim::Window& window, double dt,
                       Rng* rng, double kl_weight) {
  WindowBatch<S> batch;
  {
    std::vector<envsim::Window> pool{window};
    batch = WindowBatch<S>::assemble(pool, {0});
  }
  Mat<S> eps;
  ElboOptions<S> opts;
  opts.kl_weight = kl_weight;
  if (rng) {
    eps = Mat<S>::Zero(1, model.cfg.embed_dim());
    for (Eigen::Index i = 0; i < eps.cols(); ++i) eps(0, i) = static_cast<S>(rng->normal());
    opts.eps = &eps;
  }
  approx::Tape<S> tape;
  auto tp = TapeParams<S>::bind(tape, model.params);
  const auto nodes = elbo_graph(tape, tp, model.cfg, batch, dt, opts);
  ElboParts<S> parts;
  parts.loss = static_cast<double>(tape.value(nodes.loss)(0, 0));
  parts.recon = static_cast<double>(tape.value(nodes.recon)(0, 0));
  parts.kl = static_cast<double>(tape.value(nodes.kl)(0, 0));
  if (!std::isfinite(parts.loss)) throw std::runtime_error("elbo_loss: non-finite loss");
  return parts;
}

// ---------------------------------------------------------------------------
// Training

json TrainConfig::to_json() const {
  return json{{"epochs", epochs},
              {"batch", batch},
              {"lr", lr},
              {"seed", seed},
              {"teacher_decay_frac", teacher_decay_frac},
              {"kl_warmup_frac", kl_warmup_frac},
              {"kl_weight_max", kl_weight_max},
              {"val_frac", val_frac},
              {"grad_clip", grad_clip},
              {"threads", threads},
              {"random_offsets", random_offsets},
              {"window", window},
              {"stride", stride},
              {"split", split}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.teacher_decay_frac = j.value("teacher_decay_frac", c.teacher_decay_frac);
  c.kl_warmup_frac = j.value("kl_warmup_frac", c.kl_warmup_frac);
  c.kl_weight_max = j.value("kl_weight_max", c.kl_weight_max);
  c.val_frac = j.value("val_frac", c.val_frac);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.threads = j.value("threads", c.threads);
  c.random_offsets = j.value("random_offsets", c.random_offsets);
  c.window = j.value("window", c.window);
  c.stride = j.value("stride", c.stride);
  c.split = j.value("split", c.split);
  c.start_epoch = j.value("start_epoch", c.start_epoch);
  c.stop_epoch = j.value("stop_epoch", c.stop_epoch);
  return c;
}

namespace {

// Contiguous near-equal chunks; the count is fixed by config so gradient
// accumulation order never depends on the machine.
std::vector<std::pair<int, int>> chunk_ranges(int total, int chunks) {
  std::vector<std::pair<int, int>> out;
  const int base = total / chunks, rem = total % chunks;
  int at = 0;
  for (int c = 0; c < chunks; ++c) {
    const int len = base + (c < rem ? 1 : 0);
    if (len > 0) out.emplace_back(at, len);
    at += len;
  }
  return out;
}

}  // namespace

template <typename S>
double validation_loss(const Model<S>& model, const std::vector<envsim::Window>& windows,
                       double dt, int batch, int threads) {
  if (windows.empty()) return 0.0;
  const int total = static_cast<int>(windows.size());
  double acc = 0.0;
  for (int at = 0; at < total; at += batch) {
    const int n = std::min(batch, total - at);
    const auto chunks = chunk_ranges(n, threads);
    std::vector<double> partial(chunks.size(), 0.0);
#pragma omp parallel for schedule(static, 1)
    for (int c = 0; c < static_cast<int>(chunks.size()); ++c) {
      std::vector<int> idx(static_cast<std::size_t>(chunks[static_cast<std::size_t>(c)].second));
      for (std::size_t k = 0; k < idx.size(); ++k)
        idx[k] = at + chunks[static_cast<std::size_t>(c)].first + static_cast<int>(k);
      const auto wb = WindowBatch<S>::assemble(windows, idx);
      ElboOptions<S> opts;
      opts.loss_scale = 1.0 / total;
      approx::Tape<S> tape;
      auto tp = TapeParams<S>::bind(tape, model.params);
      const auto nodes = elbo_graph(tape, tp, model.cfg, wb, dt, opts);
      partial[static_cast<std::size_t>(c)] =
          static_cast<double>(tape.value(nodes.loss)(0, 0));
    }
    for (double p : partial) acc += p;
  }
  return acc;
}

template <typename S>
TrainResult<S> train_vcnodeti(const ModelConfig& mcfg, const TrainConfig& tcfg,
                              const envsim::Dataset& dataset,
                              const ResumeState<S>* resume) {
  if (dataset.obs_dim != mcfg.obs_dim || dataset.u_dim != mcfg.u_dim)
    throw std::invalid_argument("train_vcnodeti: dataset dims do not match the model config");

  // Episode-level validation carve from the tail of the train split.
  const int n_train_eps = static_cast<int>(dataset.train.size());
  const int n_val_eps =
      std::min(n_train_eps - 1,
               std::max(1, static_cast<int>(std::lround(tcfg.val_frac * n_train_eps))));
  std::vector<envsim::EpisodeF> fit_eps(dataset.train.begin(),
                                        dataset.train.end() - n_val_eps);
  std::vector<envsim::EpisodeF> val_eps(dataset.train.end() - n_val_eps, dataset.train.end());
  const auto train_windows = envsim::window_dataset_normalized(
      fit_eps, dataset.normalizer, tcfg.window, tcfg.stride, tcfg.split);
  const auto val_windows = envsim::window_dataset_normalized(
      val_eps, dataset.normalizer, tcfg.window, tcfg.stride, tcfg.split);
  if (train_windows.empty()) throw std::invalid_argument("train_vcnodeti: no training windows");
  const double dt = dataset.dt();

  const Rng base(tcfg.seed);
  Rng init_rng = base.stream(0xac0de);
  TrainResult<S> result;
  Model<S> model = Model<S>::init(mcfg, init_rng);
  auto opt_state = approx::AdamState<S>::zeros_like(model.params);
  if (resume) {
    validate_like(resume->params, model.params);
    model.params = resume->params;
    opt_state = resume->opt;
  }
  result.best = model;
  result.best_val = std::numeric_limits<double>::infinity();

  approx::AdamConfig adam;
  adam.lr = tcfg.lr;

  const int total = static_cast<int>(train_windows.size());
  const int steps_per_epoch = (total + tcfg.batch - 1) / tcfg.batch;
  const long total_steps = static_cast<long>(steps_per_epoch) * tcfg.epochs;
  const long warmup_steps =
      std::max<long>(1, static_cast<long>(tcfg.kl_warmup_frac * total_steps));
  long global_step = static_cast<long>(steps_per_epoch) * tcfg.start_epoch;

  std::vector<int> order(static_cast<std::size_t>(total));

  const int stop_epoch =
      tcfg.stop_epoch < 0 ? tcfg.epochs : std::min(tcfg.stop_epoch, tcfg.epochs);
  for (int epoch = tcfg.start_epoch; epoch < stop_epoch && !result.diverged; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng erng = base.stream(static_cast<std::uint64_t>(epoch) + 1);
    // Shuffle from identity so a resumed run sees the same batches.
    for (int i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = total - 1; i > 0; --i) {
      const auto j = static_cast<int>(erng.below(static_cast<std::uint64_t>(i) + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    const double teacher_horizon = tcfg.teacher_decay_frac * tcfg.epochs;
    const double teacher_prob =
        teacher_horizon > 0 ? std::max(0.0, 1.0 - epoch / teacher_horizon) : 0.0;

    double ep_loss = 0, ep_recon = 0, ep_kl = 0;
    int ep_batches = 0;

    for (int at = 0; at < total; at += tcfg.batch) {
      const int n = std::min(tcfg.batch, total - at);
      const double kl_weight =
          tcfg.kl_weight_max * std::min(1.0, static_cast<double>(global_step + 1) / warmup_steps);
      const int offset = tcfg.random_offsets
                             ? static_cast<int>(erng.below(static_cast<std::uint64_t>(tcfg.split)))
                             : tcfg.split;
      const int roll_steps = tcfg.window - 1 - offset;

      // Batch-level stochastic inputs, sliced per chunk by row.
      Mat<S> eps(n, mcfg.embed_dim());
      bool sample_embedding = tcfg.kl_weight_max > 0.0;
      if (sample_embedding)
        for (Eigen::Index r = 0; r < eps.rows(); ++r)
          for (Eigen::Index c = 0; c < eps.cols(); ++c)
            eps(r, c) = static_cast<S>(erng.normal());
      std::vector<Vec<S>> teacher;
      if (teacher_prob > 0.0) {
        teacher.assign(static_cast<std::size_t>(std::max(0, roll_steps - 1)), Vec<S>());
        for (auto& mask : teacher) {
          mask = Vec<S>::Zero(n);
          for (int r = 0; r < n; ++r)
            if (erng.bernoulli(teacher_prob)) mask[r] = S(1);
        }
      }

      const auto chunks = chunk_ranges(n, tcfg.threads);
      std::vector<approx::Gradient<S>> grads(chunks.size());
      std::vector<std::array<double, 3>> losses(chunks.size(), {0, 0, 0});
      std::vector<std::string> failures(chunks.size());
#pragma omp parallel for schedule(static, 1)
      for (int c = 0; c < static_cast<int>(chunks.size()); ++c) {
        try {
          const auto [c0, cn] = chunks[static_cast<std::size_t>(c)];
          std::vector<int> idx(static_cast<std::size_t>(cn));
          for (int k = 0; k < cn; ++k)
            idx[static_cast<std::size_t>(k)] = order[static_cast<std::size_t>(at + c0 + k)];
          const auto wb = WindowBatch<S>::assemble(train_windows, idx);

          Mat<S> eps_chunk;
          std::vector<Vec<S>> teacher_chunk;
          ElboOptions<S> opts;
          opts.kl_weight = kl_weight;
          opts.loss_scale = 1.0 / n;
          opts.start_offset = offset;
          if (sample_embedding) {
            eps_chunk = eps.middleRows(c0, cn);
            opts.eps = &eps_chunk;
          }
          if (!teacher.empty()) {
            teacher_chunk.reserve(teacher.size());
            for (const auto& m : teacher) teacher_chunk.push_back(m.segment(c0, cn));
            opts.teacher = &teacher_chunk;
          }

          approx::Tape<S> tape;
          auto tp = TapeParams<S>::bind(tape, model.params);
          const auto nodes = elbo_graph(tape, tp, mcfg, wb, dt, opts);
          const double lv = static_cast<double>(tape.value(nodes.loss)(0, 0));
          if (!std::isfinite(lv)) throw std::runtime_error("non-finite training loss");
          tape.backward(nodes.loss);
          approx::Gradient<S> g;
          for (std::size_t p = 0; p < model.params.count(); ++p)
            g.add(model.params.names()[p], tape.grad_or_zero(tp[model.params.names()[p]]));
          grads[static_cast<std::size_t>(c)] = std::move(g);
          losses[static_cast<std::size_t>(c)] = {
              lv, static_cast<double>(tape.value(nodes.recon)(0, 0)),
              static_cast<double>(tape.value(nodes.kl)(0, 0))};
        } catch (const std::exception& e) {
          failures[static_cast<std::size_t>(c)] = e.what();
        }
      }
      for (const auto& f : failures)
        if (!f.empty()) {
          result.diverged = true;
          break;
        }
      if (result.diverged) break;

      // Fixed-order reduction across chunks.
      approx::Gradient<S>& g_total = grads[0];
      for (std::size_t c = 1; c < grads.size(); ++c)
        for (std::size_t p = 0; p < g_total.count(); ++p)
          g_total.value(p) += grads[c].value(p);
      double bl = 0, br = 0, bk = 0;
      for (const auto& l : losses) {
        bl += l[0];
        br += l[1];
        bk += l[2];
      }
      approx::clip_grad_norm(g_total, tcfg.grad_clip);
      adam_step(model.params, g_total, opt_state, adam);
      ep_loss += bl;
      ep_recon += br;
      ep_kl += bk;
      ++ep_batches;
      ++global_step;
    }
    if (result.diverged) break;

    const double vloss =
        validation_loss(model, val_windows, dt, tcfg.batch, tcfg.threads);
    const auto t1 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = ep_loss / std::max(1, ep_batches);
    log.train_recon = ep_recon / std::max(1, ep_batches);
    log.train_kl = ep_kl / std::max(1, ep_batches);
    log.val_loss = vloss;
    log.teacher_prob = teacher_prob;
    log.kl_weight =
        tcfg.kl_weight_max * std::min(1.0, static_cast<double>(global_step) / warmup_steps);
    log.seconds = std::chrono::duration<double>(t1 - t0).count();
    result.log.push_back(log);

    if (val_windows.empty() || vloss < result.best_val) {
      result.best_val = vloss;
      result.best = model;
      result.best_epoch = epoch;
    }
  }
  result.last = model;
  result.opt = opt_state;
  if (result.log.empty() && !result.diverged) {
    // Zero-epoch run: report the initialization.
    result.best = model;
    result.best_epoch = -1;
  }
  return result;
}

// Explicit instantiations: f32 for training speed, f64 for gradient checks.
template struct Model<float>;
template struct Model<double>;
template struct WindowBatch<float>;
template struct WindowBatch<double>;
template ElboNodes<float> elbo_graph<float>(approx::Tape<float>&, const TapeParams<float>&,
                                            const ModelConfig&, const WindowBatch<float>&,
                                            double, const ElboOptions<float>&);
template ElboNodes<double> elbo_graph<double>(approx::Tape<double>&, const TapeParams<double>&,
                                              const ModelConfig&, const WindowBatch<double>&,
                                              double, const ElboOptions<double>&);
template ElboParts<float> elbo_loss<float>(const Model<float>&, const envsim::Window&, double,
                                           Rng*, double);
template ElboParts<double> elbo_loss<double>(const Model<double>&, const envsim::Window&,
                                             double, Rng*, double);
template Eigen::MatrixXd predict_trajectory<float>(const Model<float>&, const Eigen::MatrixXd&,
                                                   const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                                                   const Eigen::VectorXd&,
                                                   const odesolve::SolverConfig&, EmbeddingChoice,
                                                   Rng*, const DynamicsEmbedding*);
template Eigen::MatrixXd predict_trajectory<double>(const Model<double>&, const Eigen::MatrixXd&,
                                                    const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                                                    const Eigen::VectorXd&,
                                                    const odesolve::SolverConfig&, EmbeddingChoice,
                                                    Rng*, const DynamicsEmbedding*);
template double validation_loss<float>(const Model<float>&, const std::vector<envsim::Window>&,
                                       double, int, int);
template double validation_loss<double>(const Model<double>&, const std::vector<envsim::Window>&,
                                        double, int, int);
template TrainResult<float> train_vcnodeti<float>(const ModelConfig&, const TrainConfig&,
                                                  const envsim::Dataset&,
                                                  const ResumeState<float>*);
template TrainResult<double> train_vcnodeti<double>(const ModelConfig&, const TrainConfig&,
                                                    const envsim::Dataset&,
                                                    const ResumeState<double>*);

}  // namespace vcnode::latentdyn
