#pragma once

// Densities, observation likelihoods, the 2D test potentials, and the
// amortized inference network / decoder pair of a deep latent Gaussian model.

#include "flowvi/core_math.hpp"
#include "flowvi/flows.hpp"
#include "flowvi/mlp.hpp"

#include <functional>
#include <span>
#include <string>

namespace flowvi {

// ---------------------------------------------------------------------------
// Diagonal Gaussian

struct DiagGaussian {
  Vec mu;
  Vec log_sigma;

  Eigen::Index dim() const { return mu.size(); }
};

struct GaussianDraw {
  Vec z;
  Vec eps;
};

/// z = mu + sigma * eps with eps ~ N(0, I).
GaussianDraw diag_gaussian_sample(const DiagGaussian& q, Rng& rng);
double diag_gaussian_logpdf(const DiagGaussian& q, const Vec& z);

// ---------------------------------------------------------------------------
// 2D potentials, p(z) ~ exp(-U(z))

/// ids 1-4 are the benchmark potentials (ring, sine wave, split sine, sine
/// with sigmoid step). id 0 is the isotropic Gaussian U(z) = |z|^2 / 2, kept
/// as a reference potential with a known normalizer (2 pi).
///
/// Ids 2-4 do not confine z1, so exp(-U) is not integrable on R^2. Ids 1-4
/// therefore carry a quadratic wall sum_i max(0, |z_i| - 4)^2 / (2 s^2),
/// s = kWallScale, which is zero on the [-4, 4]^2 window.
struct EnergyFunction {
  int id = 1;
};

EnergyFunction make_energy(int id);
double energy_eval(EnergyFunction e, const Vec& z);
/// Analytic dU/dz.
Vec energy_grad(EnergyFunction e, const Vec& z);

constexpr double kEnergyLo = -4.0;
constexpr double kEnergyHi = 4.0;
constexpr double kWallScale = 0.1;
/// Distance past the window over which the walled normalizer integrates;
/// the wall is 50 nats high there.
constexpr double kWallReach = 1.0;

/// Trapezoid estimate of the integral of exp(-U) over (-4, 4)^2 using
/// grid_n points per axis. Throws DomainError if grid_n < 100.
double energy_normalizer(const std::function<double(const Vec&)>& potential, int grid_n);
/// Same node spacing as above. For walled energies the grid is extended by
/// kWallReach on every side so the mass under the wall is included.
double energy_normalizer(EnergyFunction e, int grid_n);

// ---------------------------------------------------------------------------
// Observation likelihoods

enum class Likelihood { kBernoulli, kLogitNormal };

std::string to_string(Likelihood l);
Likelihood parse_likelihood(const std::string& s);

/// Pixel values are clamped into [eps, 1 - eps] before the logit-normal model.
constexpr double kLogitNormalEps = 1e-4;

/// sum x log sigmoid(l) + (1 - x) log(1 - sigmoid(l)); x must be 0 or 1.
double bernoulli_loglik(const Vec& logits, const Vec& x);
/// dL/dlogits.
Vec bernoulli_loglik_grad(const Vec& logits, const Vec& x);

/// sum log N(logit(x_i); mu_i, 1/alpha_i) - log x_i - log(1 - x_i), with
/// alpha_i = exp(log_alpha_i) the precision of pixel i.
double logitnormal_loglik(const Vec& mu, const Vec& log_alpha, const Vec& x);
struct LogitNormalGrad {
  Vec dmu;
  Vec dlog_alpha;
};
LogitNormalGrad logitnormal_loglik_grad(const Vec& mu, const Vec& log_alpha, const Vec& x);

// ---------------------------------------------------------------------------
// Inference network

/// An MLP whose final affine layer is the set of heads: mu (d), log sigma
/// (d) and, for planar or radial families, K per-layer flow parameter blocks
/// in stack flattening order. NICE coupling nets are global parameters and
/// are not produced here.
struct InferenceNet {
  MlpParams net;
  FlowFamily family = FlowFamily::kPlanar;
  Eigen::Index latent_dim = 0;
  std::size_t k = 0;

  /// hidden: unit counts of the trunk layers.
  static InferenceNet create(int data_dim, const std::vector<int>& hidden, Eigen::Index latent_dim,
                             FlowFamily family, std::size_t k, Activation act, int maxout_window);

  bool amortizes_flow() const;
  /// 2d + K * per-layer count for planar/radial, 2d otherwise.
  std::size_t head_count() const;
};

struct InfnetOutput {
  DiagGaussian q0;
  FlowStack flow;
  MlpTape tape;
};

/// Maps x to q0 and the flow. `global_flow` supplies the stack for families
/// whose flow is not amortized (NICE); it is ignored otherwise.
InfnetOutput infnet_forward(const InferenceNet& n, const Vec& x, const FlowStack* global_flow = nullptr);

/// Accumulates network parameter gradients into `dparams` given gradients
/// with respect to mu, log sigma and (amortized families) flow parameters.
void infnet_backward(const InferenceNet& n, const MlpTape& tape, const Vec& dmu,
                     const Vec& dlog_sigma, const Vec& dflow, std::span<double> dparams);

/// Template stack for amortized families: layers with zero parameters whose
/// values are overwritten per datapoint.
FlowStack amortized_stack_template(FlowFamily family, Eigen::Index dim, std::size_t k);

// ---------------------------------------------------------------------------
// Decoder

struct Decoder {
  MlpParams net;
  Likelihood likelihood = Likelihood::kBernoulli;

  static Decoder create(Eigen::Index latent_dim, const std::vector<int>& hidden, int data_dim,
                        Likelihood lik, Activation act, int maxout_window);
  int data_dim() const;
};

/// log p(x | z) and its tape.
struct DecoderForward {
  double loglik;
  MlpOutput out;
};

DecoderForward decoder_forward(const Decoder& dec, const Vec& z, const Vec& x);
/// Scales d loglik by `weight`, accumulates parameter gradients, and returns
/// weight * d loglik / dz.
Vec decoder_backward(const Decoder& dec, const DecoderForward& fwd, const Vec& x, double weight,
                     std::span<double> dparams);

/// Standard normal prior log density.
double std_normal_logpdf(const Vec& z);

}  // namespace flowvi
