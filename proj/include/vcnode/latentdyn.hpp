#pragma once

// Time-invariant latent linear dynamics model: a per-point state encoder, a
// bidirectional-LSTM dynamics encoder producing a Gaussian posterior over a
// flat embedding vector, an unpacking of that vector into continuous-time
// (A, B, o), a differentiable Euler rollout under future controls, and a
// per-point decoder. Trained by reconstruction + KL with the unit prior.

#include <Eigen/Dense>

#include <optional>
#include <vector>

#include "json.hpp"
#include "vcnode/envsim.hpp"
#include "vcnode/nets.hpp"
#include "vcnode/odesolve.hpp"
#include "vcnode/optim.hpp"
#include "vcnode/rng.hpp"

namespace vcnode::latentdyn {

enum class UnpackMode { full, rank_one };

inline const char* to_string(UnpackMode m) {
  return m == UnpackMode::full ? "full" : "rank_one";
}
inline UnpackMode unpack_mode_from(const std::string& s) {
  if (s == "full") return UnpackMode::full;
  if (s == "rank_one") return UnpackMode::rank_one;
  throw std::invalid_argument("unknown unpack mode: " + s);
}

struct ModelConfig {
  int obs_dim = 0;
  int u_dim = 0;
  int latent_dim = 8;
  UnpackMode mode = UnpackMode::full;
  bool use_dynamics_mlp = false;  // optional intermediate MLP on the embedding
  double sigma_obs = 0.05;        // fixed Gaussian observation scale (normalized units)
  std::vector<int> hidden{128, 128, 128, 128};
  int rnn_state_dim = 32;
  int rnn_layers = 2;

  // Flat embedding length: deviation block + control matrix + offset.
  int embed_dim() const {
    const int dev = mode == UnpackMode::full ? latent_dim * latent_dim : 2 * latent_dim;
    return dev + latent_dim * u_dim + latent_dim;
  }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Diagonal Gaussian over the flat embedding vector; logvar is clamped to
// [-10, 10] by the inference heads.
struct DynamicsPosterior {
  Eigen::VectorXd mean;
  Eigen::VectorXd logvar;
};

// Continuous-time latent dynamics decoded from an embedding vector. The
// one-step Euler map I + h*a is the deviation-around-identity form.
struct DynamicsEmbedding {
  Eigen::MatrixXd a;  // d x d generator
  Eigen::MatrixXd b;  // d x u
  Eigen::VectorXd o;  // d
};

// Layout-only unpack/pack of the flat vector (row-major deviation block,
// then B row-major, then o). Throws on length mismatch.
DynamicsEmbedding unpack_embedding(const ModelConfig& cfg, const Eigen::VectorXd& d_vec);
Eigen::VectorXd pack_embedding(const ModelConfig& cfg, const DynamicsEmbedding& emb);

// Reparameterized draw d = mean + exp(logvar/2) .* eps.
Eigen::VectorXd sample_dynamics(const DynamicsPosterior& post, Rng& rng);

// Closed-form KL(N(mean, diag exp(logvar)) || N(0, I)).
double gaussian_kl(const DynamicsPosterior& post);

template <typename S>
struct Model {
  ModelConfig cfg;
  approx::ParamSet<S> params;

  static Model init(const ModelConfig& cfg, Rng& rng);

  // --- inference (values only; each call runs a small forward tape) -------
  approx::Mat<S> encode(const approx::Mat<S>& states) const;  // rows = points
  approx::Mat<S> decode(const approx::Mat<S>& latents) const;

  // Posterior from a context of T points and T-1 controls (pairs (z_t, u_t)
  // for t = 0..T-2). Throws if the context has fewer than 2 points.
  DynamicsPosterior infer_posterior(const approx::Mat<S>& z_context,
                                    const approx::Mat<S>& u_context) const;

  // Applies the optional dynamics MLP, then the layout unpack.
  DynamicsEmbedding unpack_dynamics(const Eigen::VectorXd& d_vec) const;

  template <typename T>
  Model<T> cast() const {
    return Model<T>{cfg, params.template cast<T>()};
  }
};

// Latent rollout under piecewise-constant future controls; thin wrapper over
// odesolve with the embedding as the system.
Eigen::MatrixXd predict_latent(const Eigen::VectorXd& z0, const DynamicsEmbedding& emb,
                               const Eigen::MatrixXd& u_future, const Eigen::VectorXd& t_grid,
                               const odesolve::SolverConfig& solver);

enum class EmbeddingChoice { posterior_mean, sample };

// Full pipeline: encode context -> posterior -> embedding -> latent rollout
// from the last context state -> decode. All states are in normalized units.
// t_future[0] must be the time of the last context point. An injected
// embedding bypasses inference entirely (dynamics/state separability).
template <typename S>
Eigen::MatrixXd predict_trajectory(const Model<S>& model, const Eigen::MatrixXd& x_context,
                                   const Eigen::MatrixXd& u_context,
                                   const Eigen::MatrixXd& u_future,
                                   const Eigen::VectorXd& t_future,
                                   const odesolve::SolverConfig& solver,
                                   EmbeddingChoice choice, Rng* rng = nullptr,
                                   const DynamicsEmbedding* injected = nullptr);

// ---------------------------------------------------------------------------
// Training-time graphs

// Windows stacked t-major: row (t*count + i) of `states` is window i, point t.
template <typename S>
struct WindowBatch {
  int count = 0;
  int length = 0;
  int split = 30;
  int obs_dim = 0;
  int u_dim = 0;
  approx::Mat<S> states;                  // (length*count) x obs_dim
  std::vector<approx::Mat<S>> controls;   // length-1 entries of count x u_dim

  static WindowBatch assemble(const std::vector<envsim::Window>& pool,
                              const std::vector<int>& indices);
};

// Stochastic inputs are drawn outside the graph so gradients can be checked
// with common random numbers.
template <typename S>
struct ElboOptions {
  double kl_weight = 1.0;
  double loss_scale = 0.0;   // 0 -> 1/count
  int start_offset = -1;     // -1 -> split (plain 30-in/30-out objective)
  const approx::Mat<S>* eps = nullptr;             // count x embed_dim; null -> mean
  const std::vector<approx::Vec<S>>* teacher = nullptr;  // per-step row masks
};

template <typename S>
struct ElboNodes {
  typename approx::Tape<S>::NodeId loss, recon, kl, pred;
  int pred_steps = 0;  // rollout length behind `pred`
};

template <typename S>
ElboNodes<S> elbo_graph(approx::Tape<S>& tape, const approx::TapeParams<S>& tp,
                        const ModelConfig& cfg, const WindowBatch<S>& batch, double dt,
                        const ElboOptions<S>& opts);

// Spec-level convenience on one window (sampled embedding when rng given).
template <typename S>
struct ElboParts {
  double loss, recon, kl;
};
template <typename S>
ElboParts<S> elbo_loss(const Model<S>& model, const envsim::Window& window, double dt,
                       Rng* rng, double kl_weight = 1.0);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 30;
  int batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  double teacher_decay_frac = 0.5;  // forcing prob 1 -> 0 over this fraction of epochs
  double kl_warmup_frac = 0.1;      // KL weight 0 -> 1 over this fraction of steps
  double kl_weight_max = 1.0;       // 0 disables the variational term (ablation)
  double val_frac = 0.1;            // episodes carved off the train split
  double grad_clip = 5.0;
  int threads = 2;  // fixed gradient-accumulation chunk count
  bool random_offsets = true;
  int window = 61;
  int stride = 30;
  int split = 30;
  // Epochs [start_epoch, stop_epoch) of the planned `epochs` are run;
  // stop_epoch < 0 means run to the end. Schedules (teacher forcing, KL
  // warm-up) always follow the full plan, so a stopped run resumes exactly.
  int start_epoch = 0;
  int stop_epoch = -1;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
  int epoch;
  double train_loss, train_recon, train_kl;
  double val_loss;
  double teacher_prob, kl_weight;
  double seconds;
};

// Parameters plus optimizer moments; with start_epoch this resumes a run to
// an identical continued loss stream.
template <typename S>
struct ResumeState {
  approx::ParamSet<S> params;
  approx::AdamState<S> opt;
};

template <typename S>
struct TrainResult {
  Model<S> best;
  Model<S> last;
  approx::AdamState<S> opt;  // final optimizer state, for resuming
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_val = 0.0;
  bool diverged = false;
};

// Mini-batch training of the windowed ELBO. Deterministic for a fixed config:
// every stochastic choice derives from (seed, epoch).
template <typename S>
TrainResult<S> train_vcnodeti(const ModelConfig& mcfg, const TrainConfig& tcfg,
                              const envsim::Dataset& dataset,
                              const ResumeState<S>* resume = nullptr);

// Deterministic ELBO (mean embedding, no forcing, full KL) on a window set.
template <typename S>
double validation_loss(const Model<S>& model, const std::vector<envsim::Window>& windows,
                       double dt, int batch, int threads);

}  // namespace vcnode::latentdyn
