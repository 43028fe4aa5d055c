#pragma once

// Invertible maps with linear-time log-determinants: planar and radial layers
// (with their invertibility reparameterizations) and NICE additive coupling
// layers, composed into a FlowStack.

#include "flowvi/core_math.hpp"
#include "flowvi/mlp.hpp"

#include <span>
#include <string>
#include <variant>
#include <vector>

namespace flowvi {

// ---------------------------------------------------------------------------
// Layer parameters

/// f(z) = z + u_hat * tanh(w'z + b), with u_hat = planar_constrain(u_raw, w).
struct PlanarLayer {
  Vec u_raw;
  Vec w;
  double b = 0.0;

  Eigen::Index dim() const { return w.size(); }
  /// Effective u. Falls back to u_raw when w is the zero vector.
  Vec u_hat() const;
};

/// f(z) = z + beta_hat / (alpha + r) * (z - z0), r = |z - z0|,
/// alpha = exp(log_alpha), beta_hat = -alpha + softplus(beta_raw).
struct RadialLayer {
  Vec z0;
  double log_alpha = 0.0;
  double beta_raw = 0.0;

  Eigen::Index dim() const { return z0.size(); }
};

/// Fixed mixing applied before the coupling split: y[i] = z[perm[i]].
struct Permutation {
  std::vector<int> perm;
};

using Mixer = std::variant<std::monostate, Permutation, Mat>;

/// y = mix(z); y_B += coupling(y_A). The output stays in the mixed basis.
/// `mask[i]` selects coordinate i of the mixed vector into partition A.
struct NiceLayer {
  std::vector<bool> mask;
  MlpParams coupling;
  Mixer mixer;

  Eigen::Index dim() const { return static_cast<Eigen::Index>(mask.size()); }
  std::vector<int> part_a() const;
  std::vector<int> part_b() const;
};

using FlowLayer = std::variant<PlanarLayer, RadialLayer, NiceLayer>;

std::string layer_type_name(const FlowLayer& layer);
std::size_t layer_param_count(const FlowLayer& layer);
/// Declaration order: planar (u_raw, w, b); radial (z0, log_alpha, beta_raw);
/// NICE (coupling network weights).
void pack_layer(const FlowLayer& layer, std::span<double> out);
void unpack_layer(FlowLayer& layer, std::span<const double> in);

// ---------------------------------------------------------------------------
// Stack

enum class FlowFamily { kPlanar, kRadial, kNicePerm, kNiceOrth };

std::string to_string(FlowFamily f);
FlowFamily parse_flow_family(const std::string& s);

/// Quantities that depend only on a layer's parameters. Planar: u_hat,
/// w'u_hat, |w|^2, softplus(w'u_raw) and the u_hat correction c = m(w'u) - w'u
/// with its derivative. Radial: alpha, beta_hat, sigmoid(beta_raw).
struct LayerDerived {
  Vec u_hat;
  double wu_hat = 0.0;
  double n2 = 0.0;
  double sp = 0.0;
  double c = 0.0;
  double dc = 0.0;
  double alpha = 0.0;
  double beta_hat = 0.0;
  double sig_beta = 0.0;
};

LayerDerived derive_layer(const FlowLayer& layer);

class FlowStack {
 public:
  explicit FlowStack(Eigen::Index dim = 0) : dim_(dim) { refresh_fingerprint(); }

  Eigen::Index dim() const { return dim_; }
  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }

  void push_back(FlowLayer layer);
  void set_layer(std::size_t k, FlowLayer layer);
  const FlowLayer& layer(std::size_t k) const { return layers_[k]; }
  const LayerDerived& derived(std::size_t k) const { return derived_[k]; }
  const std::vector<FlowLayer>& layers() const { return layers_; }

  std::size_t param_count() const { return param_count_; }
  void pack(std::span<double> out) const;
  void unpack(std::span<const double> in);
  Vec flat() const;
  std::uint64_t fingerprint() const { return fingerprint_; }

 private:
  static void validate(Eigen::Index dim, const FlowLayer& layer);
  void refresh_fingerprint();

  Eigen::Index dim_;
  std::vector<FlowLayer> layers_;
  std::vector<LayerDerived> derived_;
  std::size_t param_count_ = 0;
  std::uint64_t fingerprint_ = 0;
};

struct NiceOptions {
  int hidden = 8;
};

/// K layers of one family with raw parameters ~ N(0, init_sd^2). NICE layers
/// draw a fresh permutation / orthogonal mixer each and coupling nets with
/// weights scaled by init_sd.
FlowStack make_flow_stack(FlowFamily family, Eigen::Index dim, std::size_t k, Rng& rng,
                          double init_sd = 0.01, const NiceOptions& nice = {});

/// Number of per-layer parameters for planar or radial layers of dimension d.
std::size_t per_layer_param_count(FlowFamily family, Eigen::Index dim);

// ---------------------------------------------------------------------------
// Forward / backward

struct FlowTape {
  std::uint64_t stack_fingerprint = 0;
  std::vector<Vec> inputs;                   // z_{k-1} for each layer k
  std::vector<MlpTape> nets;                 // coupling tape (empty unless NICE)
};

struct FlowResult {
  Vec z_out;
  double sum_logdet = 0.0;
  FlowTape tape;
  /// Set when a planar layer saw |1 + u_hat' psi(z)| < 1e-12.
  bool near_singular = false;
};

constexpr double kNearSingular = 1e-12;
constexpr double kInvertTol = 1e-10;
constexpr int kInvertMaxIter = 200;

Vec planar_constrain(const Vec& u_raw, const Vec& w);
FlowResult planar_forward(const PlanarLayer& p, const Vec& z);
Vec planar_invert(const PlanarLayer& p, const Vec& z_prime, double tol = kInvertTol);

struct RadialConstrained {
  double alpha;
  double beta_hat;
};
RadialConstrained radial_constrain(double log_alpha, double beta_raw);
FlowResult radial_forward(const RadialLayer& p, const Vec& z);
Vec radial_invert(const RadialLayer& p, const Vec& z_prime, double tol = kInvertTol);

FlowResult nice_forward(const NiceLayer& p, const Vec& z);
Vec nice_inverse(const NiceLayer& p, const Vec& z_prime);

FlowResult flow_forward(const FlowStack& stack, const Vec& z0);

struct FlowGradient {
  Vec dz0;
  Vec dparams;
};

/// Reverse-mode gradient of dl_dz_out' z_K + dl_dlogdet * sum_logdet.
FlowGradient flow_backward(const FlowStack& stack, const FlowTape& tape, const Vec& dl_dz_out,
                           double dl_dlogdet);
/// As flow_backward, adding the parameter gradient into `dparams`.
Vec flow_backward_accumulate(const FlowStack& stack, const FlowTape& tape, const Vec& dl_dz_out,
                             double dl_dlogdet, std::span<double> dparams);

/// Inverse of the whole stack (bisection for planar/radial, exact for NICE).
Vec flow_inverse(const FlowStack& stack, const Vec& z_out, double tol = kInvertTol);

}  // namespace flowvi
