#pragma once

// Flow-based free energy, its annealed variant, pathwise Monte Carlo
// gradients, RMSprop with momentum, the training loop and evaluation metrics.

#include "flowvi/core_math.hpp"
#include "flowvi/flows.hpp"
#include "flowvi/models.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace flowvi {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t minibatch = 100;
  double learning_rate = 1e-5;
  double momentum = 0.9;
  double anneal_t0 = 0.01;
  std::size_t anneal_steps = 10000;
  std::size_t k = 0;
  std::size_t iters = 0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;
  double rms_decay = 0.9;
  double rms_epsilon = 1e-8;
  /// Worker count for per-datapoint evaluation; 0 reads FLOWVI_THREADS or
  /// falls back to the number of cores.
  std::size_t threads = 0;
  /// Report real elapsed time in the metrics stream. Off by default so that
  /// reruns are byte-identical.
  bool record_wallclock = false;

  void validate() const;
};

/// min(1, anneal_t0 + t / anneal_steps)
double anneal_beta(std::size_t t, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Parameter registry

struct ParamSpan {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

class Registry {
 public:
  void add(std::string name, std::size_t length);
  const std::vector<ParamSpan>& spans() const { return spans_; }
  std::size_t total() const { return total_; }
  const ParamSpan* find(const std::string& name) const;
  const ParamSpan& at(const std::string& name) const;

 private:
  std::vector<ParamSpan> spans_;
  std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Problems: a target density paired with a variational family

struct EnergyTarget {
  EnergyFunction energy;
};

/// Deep latent Gaussian model: N(0, I) prior and a decoder likelihood. The
/// decoder weights are the generative parameters.
struct DlgmTarget {
  Decoder decoder;
};

/// p(z) = N(0, I), p(x | z) = N(A z + c, noise_sd^2 I). Has a closed-form
/// evidence; used to check bound orderings.
struct LinearGaussianTarget {
  Mat a;
  Vec c;
  double noise_sd = 1.0;
};

using Target = std::variant<EnergyTarget, DlgmTarget, LinearGaussianTarget>;

/// q0 mean / log scale and every flow parameter are free parameters.
struct FreePosterior {
  DiagGaussian q0;
  FlowStack flow;
};

/// q0 (and planar/radial flow parameters) come from an inference network;
/// NICE coupling nets are shared global parameters.
struct AmortizedPosterior {
  InferenceNet infnet;
  FlowStack global_flow;
};

using Posterior = std::variant<FreePosterior, AmortizedPosterior>;

class Problem {
 public:
  Problem(Posterior posterior, Target target);

  static Problem energy_fit(EnergyFunction e, FlowStack flow);

  const Registry& registry() const { return registry_; }
  const Posterior& posterior() const { return posterior_; }
  const Target& target() const { return target_; }
  Eigen::Index latent_dim() const { return latent_dim_; }
  /// Observation dimension, or 0 when the target takes no data.
  Eigen::Index data_dim() const;
  bool is_energy() const { return std::holds_alternative<EnergyTarget>(target_); }

  /// Packs the structure's current parameter values (as built).
  Vec pack() const;
  /// Copy of the problem with parameters replaced by `params`.
  Problem bind(const Vec& params) const;

  /// Initialization: network weights ~ N(0, init_scale^2 * 2 / fan_in), flow
  /// raw parameters ~ N(0, init_scale^2), q0 at mu = 0, sigma = 1. Mixers and
  /// masks are kept from construction.
  Vec initial_params(Rng& rng, double init_scale = 0.01) const;

 private:
  Posterior posterior_;
  Target target_;
  Registry registry_;
  Eigen::Index latent_dim_ = 0;
};

// ---------------------------------------------------------------------------
// Free energy

struct ElboParts {
  double entropy_q0 = 0.0;      // E[ln q0(z0)]
  double neg_sum_logdet = 0.0;  // -E[sum_k ln |det df_k/dz|]
  double neg_logp = 0.0;        // -E[ln p(x, z_K)]
};

struct ElboEstimate {
  double free_energy = 0.0;
  ElboParts parts;
  double beta_t = 1.0;
  /// Standard error of the per-sample free energy.
  double std_error = 0.0;
};

/// Noise and inputs frozen by elbo_estimate, enough to replay the estimate
/// and differentiate it.
struct ElboTape {
  std::uint64_t params_fingerprint = 0;
  std::vector<Vec> xs;  // one per datapoint (empty vectors for energy mode)
  Mat eps;              // (datapoints * samples) x latent_dim
  std::size_t samples = 1;
  double beta_t = 1.0;
};

/// Draws `samples` base samples per datapoint and returns the Monte Carlo
/// average of ln q0(z0) - sum ln|det| - beta ln p(x, z_K). `xs` empty means
/// the target takes no observations.
std::pair<ElboEstimate, ElboTape> elbo_estimate(const Problem& problem, const Vec& params,
                                                const std::vector<Vec>& xs, std::size_t samples,
                                                double beta_t, Rng& rng);

/// Pathwise gradient of the estimate recorded in `tape` with respect to the
/// flat parameter vector.
Vec elbo_backward(const Problem& problem, const Vec& params, const ElboTape& tape,
                  std::size_t threads = 1);

/// Fused value and gradient with caller-supplied noise.
ElboEstimate elbo_value_and_grad(const Problem& problem, const Vec& params,
                                 const std::vector<Vec>& xs, const Mat& eps, std::size_t samples,
                                 double beta_t, Vec* grad, std::size_t threads = 1);

// ---------------------------------------------------------------------------
// Optimizer

struct RmspropState {
  Vec mean_square;
  Vec velocity;
  double decay = 0.9;
  double epsilon = 1e-8;

  static RmspropState zeros(std::size_t n, double decay = 0.9, double epsilon = 1e-8);
};

/// ms <- decay ms + (1 - decay) g^2; v <- momentum v - lr g / sqrt(ms + eps);
/// params += v.
void rmsprop_step(Vec& params, RmspropState& state, const Vec& grad, double learning_rate,
                  double momentum);

// ---------------------------------------------------------------------------
// Training

struct TrainState {
  Vec params;
  Registry registry;
  RmspropState rmsprop;
  Rng rng;
  std::size_t t = 0;
};

struct MetricRow {
  std::size_t t = 0;
  double beta_t = 0.0;
  double free_energy = 0.0;
  double entropy_q0 = 0.0;
  double neg_sum_logdet = 0.0;
  double neg_logp = 0.0;
  double wallclock_ms = 0.0;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricRow> metrics;
  /// Set when a non-finite objective stopped training; `state` is the last
  /// finite state and `halt_sample` the offending sample index.
  bool halted = false;
  std::string halt_reason;
  long halt_sample = -1;
};

/// Observations for amortized problems; each row is one datapoint.
struct Dataset {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> values;  // row-major n x d

  Vec row(std::size_t i) const;
};

TrainState initial_train_state(const Problem& problem, const TrainConfig& cfg, double init_scale = 0.01);

/// Carries `state` forward by cfg.iters updates. Energy and free-posterior
/// problems draw cfg.minibatch base samples per update; amortized problems
/// sample cfg.minibatch datapoints with one base sample each. A non-finite
/// objective halts the loop (see TrainResult::halted).
TrainResult train(const TrainConfig& cfg, const Problem& problem, TrainState state,
                  const Dataset* data = nullptr, const std::vector<Vec>* fixed_xs = nullptr);

// ---------------------------------------------------------------------------
// Evaluation

struct KlEstimate {
  double kl = 0.0;
  double std_error = 0.0;
  double log_z = 0.0;
};

/// KL(q_K || p) for an energy problem, with p normalized by energy_normalizer.
KlEstimate kl_to_energy(const Problem& problem, const Vec& params, EnergyFunction e,
                        std::size_t samples, int grid_n, Rng& rng);
/// As above with a precomputed log normalizer.
KlEstimate kl_to_energy_with_log_z(const Problem& problem, const Vec& params, EnergyFunction e,
                                   std::size_t samples, double log_z, Rng& rng);

/// ln p(x, z_K^s) - ln q_K(z_K^s) for S draws z_K^s from the (amortized)
/// flow posterior. Their negated mean is a Monte Carlo estimate of F(x).
std::vector<double> log_importance_weights(const Problem& problem, const Vec& params, const Vec& x,
                                           std::size_t samples, Rng& rng);

/// log (1/S) sum_s exp(w_s) over log_importance_weights.
double log_mean_exp(const std::vector<double>& log_w);

/// log (1/S) sum_s p(x, z_K^s) / q_K(z_K^s) with z_K^s drawn from the
/// (amortized) flow posterior.
double is_marginal_loglik(const Problem& problem, const Vec& params, const Vec& x,
                          std::size_t samples, Rng& rng);

/// ln q_K(z) for a non-amortized posterior evaluated through the inverse flow.
double flow_log_density(const Problem& problem, const Vec& params, const Vec& z_k);

// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work is split into
/// fixed contiguous blocks so any reduction done per block is independent of
/// the thread count.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// cfg.threads, else FLOWVI_THREADS, else hardware concurrency.
std::size_t resolve_threads(std::size_t requested);

}  // namespace flowvi
