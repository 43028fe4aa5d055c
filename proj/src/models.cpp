#include "flowvi/models.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace flowvi {

GaussianDraw diag_gaussian_sample(const DiagGaussian& q, Rng& rng) {
  GaussianDraw d;
  d.eps = sample_std_normal(rng, static_cast<std::size_t>(q.dim()));
  d.z = q.mu.array() + q.log_sigma.array().exp() * d.eps.array();
  return d;
}

double diag_gaussian_logpdf(const DiagGaussian& q, const Vec& z) {
  if (z.size() != q.dim()) throw DomainError("diag_gaussian_logpdf: dimension mismatch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double s = (z[i] - q.mu[i]) * std::exp(-q.log_sigma[i]);
    acc += s * s + 2.0 * q.log_sigma[i] + kLn2Pi;
  }
  return -0.5 * acc;
}

double std_normal_logpdf(const Vec& z) {
  return -0.5 * (z.squaredNorm() + static_cast<double>(z.size()) * kLn2Pi);
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;

// w1(z) = sin(2 pi z1 / 4)
double w1(double z1) { return std::sin(kHalfPi * z1); }
double w1_prime(double z1) { return kHalfPi * std::cos(kHalfPi * z1); }

// w2(z) = 3 exp(-((z1 - 1) / 0.6)^2 / 2)
double w2(double z1) {
  const double s = (z1 - 1.0) / 0.6;
  return 3.0 * std::exp(-0.5 * s * s);
}
double w2_prime(double z1) { return -w2(z1) * (z1 - 1.0) / 0.36; }

// w3(z) = 3 sigmoid((z1 - 1) / 0.3)
double w3(double z1) { return 3.0 * sigmoid((z1 - 1.0) / 0.3); }
double w3_prime(double z1) {
  const double s = sigmoid((z1 - 1.0) / 0.3);
  return 3.0 * s * (1.0 - s) / 0.3;
}

double half_sq(double x, double scale) {
  const double s = x / scale;
  return 0.5 * s * s;
}

// U = -log(exp(-a) + exp(-b)) for a, b >= 0, and the softmax weight of each
// branch (needed for the gradient).
struct TwoBranch {
  double value;
  double weight_a;
  double weight_b;
};

TwoBranch neg_log_sum_exp(double a, double b) {
  const double lse = log_sum_exp(-a, -b);
  return {-lse, std::exp(-a - lse), std::exp(-b - lse)};
}

void check_2d(const Vec& z) {
  if (z.size() != 2) throw DomainError("energy: potentials are defined on R^2");
}

bool walled(EnergyFunction e) { return e.id >= 1 && e.id <= 4; }

double wall_excess(double v) { return std::max(0.0, std::abs(v) - kEnergyHi); }

double wall(const Vec& z) {
  return half_sq(wall_excess(z[0]), kWallScale) + half_sq(wall_excess(z[1]), kWallScale);
}

double trapezoid_2d(const std::function<double(const Vec&)>& potential, double lo, double step, int n) {
  Vec z(2);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
    z[0] = lo + step * i;
    for (int j = 0; j < n; ++j) {
      const double wj = (j == 0 || j == n - 1) ? 0.5 : 1.0;
      z[1] = lo + step * j;
      total += wi * wj * std::exp(-potential(z));
    }
  }
  return total * step * step;
}

}  // namespace

EnergyFunction make_energy(int id) {
  if (id < 0 || id > 4) throw InputError("energy id must be in 0..4, got " + std::to_string(id));
  return EnergyFunction{id};
}

namespace {

double table_energy(EnergyFunction e, const Vec& z) {
  const double z1 = z[0];
  const double z2 = z[1];
  switch (e.id) {
    case 0: return 0.5 * z.squaredNorm();
    case 1:
      return half_sq(z.norm() - 2.0, 0.4) +
             neg_log_sum_exp(half_sq(z1 - 2.0, 0.6), half_sq(z1 + 2.0, 0.6)).value;
    case 2: return half_sq(z2 - w1(z1), 0.4);
    case 3:
      return neg_log_sum_exp(half_sq(z2 - w1(z1), 0.35), half_sq(z2 - w1(z1) + w2(z1), 0.35)).value;
    case 4:
      return neg_log_sum_exp(half_sq(z2 - w1(z1), 0.4), half_sq(z2 - w1(z1) + w3(z1), 0.35)).value;
    default: throw DomainError("energy_eval: unknown energy id");
  }
}

}  // namespace

double energy_eval(EnergyFunction e, const Vec& z) {
  check_2d(z);
  const double u = table_energy(e, z);
  return walled(e) ? u + wall(z) : u;
}

Vec energy_grad(EnergyFunction e, const Vec& z) {
  check_2d(z);
  const double z1 = z[0];
  const double z2 = z[1];
  Vec g = Vec::Zero(2);
  switch (e.id) {
    case 0: g = z; break;
    case 1: {
      const double r = z.norm();
      if (r > 0.0) g = ((r - 2.0) / (0.16 * r)) * z;
      const auto br = neg_log_sum_exp(half_sq(z1 - 2.0, 0.6), half_sq(z1 + 2.0, 0.6));
      g[0] += br.weight_a * (z1 - 2.0) / 0.36 + br.weight_b * (z1 + 2.0) / 0.36;
      break;
    }
    case 2: {
      const double d = (z2 - w1(z1)) / 0.16;
      g[0] = -d * w1_prime(z1);
      g[1] = d;
      break;
    }
    case 3:
    case 4: {
      const double s_a = e.id == 3 ? 0.35 : 0.4;
      const double shift = e.id == 3 ? w2(z1) : w3(z1);
      const double shift_prime = e.id == 3 ? w2_prime(z1) : w3_prime(z1);
      const double ea = z2 - w1(z1);
      const double eb = ea + shift;
      const auto br = neg_log_sum_exp(half_sq(ea, s_a), half_sq(eb, 0.35));
      // dU/dz = sum_j weight_j * d(branch_j)/dz
      const double da = ea / (s_a * s_a);
      const double db = eb / (0.35 * 0.35);
      g[0] = br.weight_a * da * (-w1_prime(z1)) + br.weight_b * db * (-w1_prime(z1) + shift_prime);
      g[1] = br.weight_a * da + br.weight_b * db;
      break;
    }
    default: throw DomainError("energy_grad: unknown energy id");
  }
  if (walled(e))
    for (int i = 0; i < 2; ++i) g[i] += std::copysign(wall_excess(z[i]), z[i]) / (kWallScale * kWallScale);
  return g;
}

double energy_normalizer(const std::function<double(const Vec&)>& potential, int grid_n) {
  if (grid_n < 100) throw DomainError("energy_normalizer: grid_n must be at least 100");
  const double step = (kEnergyHi - kEnergyLo) / (grid_n - 1);
  return trapezoid_2d(potential, kEnergyLo, step, grid_n);
}

double energy_normalizer(EnergyFunction e, int grid_n) {
  if (grid_n < 100) throw DomainError("energy_normalizer: grid_n must be at least 100");
  const auto potential = [e](const Vec& z) { return energy_eval(e, z); };
  const double step = (kEnergyHi - kEnergyLo) / (grid_n - 1);
  if (!walled(e)) return trapezoid_2d(potential, kEnergyLo, step, grid_n);
  const int pad = static_cast<int>(std::ceil(kWallReach / step));
  return trapezoid_2d(potential, kEnergyLo - pad * step, step, grid_n + 2 * pad);
}

// ---------------------------------------------------------------------------

std::string to_string(Likelihood l) {
  return l == Likelihood::kBernoulli ? "bernoulli" : "logitnormal";
}

Likelihood parse_likelihood(const std::string& s) {
  if (s == "bernoulli") return Likelihood::kBernoulli;
  if (s == "logitnormal" || s == "logit-normal") return Likelihood::kLogitNormal;
  throw InputError("unknown likelihood '" + s + "'");
}

double bernoulli_loglik(const Vec& logits, const Vec& x) {
  if (logits.size() != x.size()) throw DomainError("bernoulli_loglik: dimension mismatch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (x[i] != 0.0 && x[i] != 1.0) throw DomainError("bernoulli_loglik: observations must be 0 or 1");
    // x log s(l) + (1 - x) log(1 - s(l)) = x l - softplus(l)
    acc += x[i] * logits[i] - softplus(logits[i]);
  }
  return acc;
}

Vec bernoulli_loglik_grad(const Vec& logits, const Vec& x) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) g[i] = x[i] - sigmoid(logits[i]);
  return g;
}

namespace {

void check_unit_interval(const Vec& x) {
  // Allow for rounding in the [eps, 1 - eps] conversion.
  constexpr double slack = 1e-12;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (!(x[i] >= kLogitNormalEps - slack && x[i] <= 1.0 - kLogitNormalEps + slack))
      throw DomainError("logitnormal_loglik: pixel " + std::to_string(i) +
                        " outside [eps, 1 - eps]");
}

}  // namespace

double logitnormal_loglik(const Vec& mu, const Vec& log_alpha, const Vec& x) {
  if (mu.size() != x.size() || log_alpha.size() != x.size())
    throw DomainError("logitnormal_loglik: dimension mismatch");
  check_unit_interval(x);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double y = logit(x[i]);
    const double r = y - mu[i];
    acc += 0.5 * log_alpha[i] - 0.5 * kLn2Pi - 0.5 * std::exp(log_alpha[i]) * r * r -
           std::log(x[i]) - std::log1p(-x[i]);
  }
  return acc;
}

LogitNormalGrad logitnormal_loglik_grad(const Vec& mu, const Vec& log_alpha, const Vec& x) {
  LogitNormalGrad g{Vec(x.size()), Vec(x.size())};
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double r = logit(x[i]) - mu[i];
    const double a = std::exp(log_alpha[i]);
    g.dmu[i] = a * r;
    g.dlog_alpha[i] = 0.5 - 0.5 * a * r * r;
  }
  return g;
}

// ---------------------------------------------------------------------------

InferenceNet InferenceNet::create(int data_dim, const std::vector<int>& hidden,
                                  Eigen::Index latent_dim, FlowFamily family, std::size_t k,
                                  Activation act, int maxout_window) {
  InferenceNet n;
  n.family = family;
  n.latent_dim = latent_dim;
  n.k = k;
  std::vector<int> widths{data_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(static_cast<int>(n.head_count()));
  n.net = MlpParams::create(widths, act, maxout_window);
  return n;
}

bool InferenceNet::amortizes_flow() const {
  return family == FlowFamily::kPlanar || family == FlowFamily::kRadial;
}

std::size_t InferenceNet::head_count() const {
  const auto base = static_cast<std::size_t>(2 * latent_dim);
  if (!amortizes_flow()) return base;
  return base + k * per_layer_param_count(family, latent_dim);
}

FlowStack amortized_stack_template(FlowFamily family, Eigen::Index dim, std::size_t k) {
  FlowStack s(dim);
  for (std::size_t i = 0; i < k; ++i) {
    if (family == FlowFamily::kPlanar)
      s.push_back(PlanarLayer{Vec::Zero(dim), Vec::Zero(dim), 0.0});
    else if (family == FlowFamily::kRadial)
      s.push_back(RadialLayer{Vec::Zero(dim), 0.0, 0.0});
    else
      throw DomainError("amortized_stack_template: family is not amortized");
  }
  return s;
}

InfnetOutput infnet_forward(const InferenceNet& n, const Vec& x, const FlowStack* global_flow) {
  MlpOutput o = mlp_forward(n.net, x);
  const Eigen::Index d = n.latent_dim;
  InfnetOutput out;
  out.q0.mu = o.y.head(d);
  out.q0.log_sigma = o.y.segment(d, d);
  if (n.amortizes_flow()) {
    out.flow = amortized_stack_template(n.family, d, n.k);
    out.flow.unpack({o.y.data() + 2 * d, static_cast<std::size_t>(o.y.size() - 2 * d)});
  } else if (global_flow) {
    out.flow = *global_flow;
  } else {
    out.flow = FlowStack(d);
  }
  out.tape = std::move(o.tape);
  return out;
}

void infnet_backward(const InferenceNet& n, const MlpTape& tape, const Vec& dmu,
                     const Vec& dlog_sigma, const Vec& dflow, std::span<double> dparams) {
  const Eigen::Index d = n.latent_dim;
  Vec dy = Vec::Zero(static_cast<Eigen::Index>(n.head_count()));
  dy.head(d) = dmu;
  dy.segment(d, d) = dlog_sigma;
  if (n.amortizes_flow()) {
    if (dflow.size() != dy.size() - 2 * d) throw DomainError("infnet_backward: flow gradient size");
    dy.tail(dy.size() - 2 * d) = dflow;
  }
  mlp_backward_accumulate(n.net, tape, dy, dparams);
}

// ---------------------------------------------------------------------------

Decoder Decoder::create(Eigen::Index latent_dim, const std::vector<int>& hidden, int data_dim,
                        Likelihood lik, Activation act, int maxout_window) {
  Decoder dec;
  dec.likelihood = lik;
  std::vector<int> widths{static_cast<int>(latent_dim)};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(lik == Likelihood::kLogitNormal ? 2 * data_dim : data_dim);
  dec.net = MlpParams::create(widths, act, maxout_window);
  return dec;
}

int Decoder::data_dim() const {
  return likelihood == Likelihood::kLogitNormal ? net.output_dim() / 2 : net.output_dim();
}

DecoderForward decoder_forward(const Decoder& dec, const Vec& z, const Vec& x) {
  if (x.size() != dec.data_dim()) throw DomainError("decoder: data dimension mismatch");
  DecoderForward f{0.0, mlp_forward(dec.net, z)};
  const Eigen::Index n = x.size();
  if (dec.likelihood == Likelihood::kBernoulli)
    f.loglik = bernoulli_loglik(f.out.y, x);
  else
    f.loglik = logitnormal_loglik(f.out.y.head(n), f.out.y.tail(n), x);
  return f;
}

Vec decoder_backward(const Decoder& dec, const DecoderForward& fwd, const Vec& x, double weight,
                     std::span<double> dparams) {
  const Eigen::Index n = x.size();
  Vec dy(fwd.out.y.size());
  if (dec.likelihood == Likelihood::kBernoulli) {
    dy = weight * bernoulli_loglik_grad(fwd.out.y, x);
  } else {
    const auto g = logitnormal_loglik_grad(fwd.out.y.head(n), fwd.out.y.tail(n), x);
    dy.head(n) = weight * g.dmu;
    dy.tail(n) = weight * g.dlog_alpha;
  }
  return mlp_backward_accumulate(dec.net, fwd.out.tape, dy, dparams);
}

}  // namespace flowvi
