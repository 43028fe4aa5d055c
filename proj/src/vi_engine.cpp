#include "flowvi/vi_engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace flowvi {

void TrainConfig::validate() const {
  if (minibatch < 1) throw InputError("minibatch must be at least 1");
  if (!(anneal_t0 > 0.0 && anneal_t0 <= 1.0)) throw InputError("anneal_t0 must lie in (0, 1]");
  if (anneal_steps < 1) throw InputError("anneal_steps must be at least 1");
  if (eval_every < 1) throw InputError("eval_every must be at least 1");
  if (!(learning_rate > 0.0)) throw InputError("learning rate must be positive");
  if (!(rms_decay >= 0.0 && rms_decay < 1.0)) throw InputError("rms decay must lie in [0, 1)");
}

double anneal_beta(std::size_t t, const TrainConfig& cfg) {
  return std::min(1.0, cfg.anneal_t0 + static_cast<double>(t) / static_cast<double>(cfg.anneal_steps));
}

// ---------------------------------------------------------------------------

void Registry::add(std::string name, std::size_t length) {
  spans_.push_back({std::move(name), total_, length});
  total_ += length;
}

const ParamSpan* Registry::find(const std::string& name) const {
  for (const auto& s : spans_)
    if (s.name == name) return &s;
  return nullptr;
}

const ParamSpan& Registry::at(const std::string& name) const {
  if (const auto* s = find(name)) return *s;
  throw DomainError("registry: no parameter block named '" + name + "'");
}

// ---------------------------------------------------------------------------

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::span<double> view(Vec& v, const ParamSpan& s) { return {v.data() + s.offset, s.length}; }
std::span<const double> view(const Vec& v, const ParamSpan& s) {
  return {v.data() + s.offset, s.length};
}

}  // namespace

Problem::Problem(Posterior posterior, Target target)
    : posterior_(std::move(posterior)), target_(std::move(target)) {
  if (const auto* dlgm = std::get_if<DlgmTarget>(&target_))
    registry_.add("decoder", dlgm->decoder.net.param_count());

  std::visit(Overloaded{
                 [&](const FreePosterior& p) {
                   latent_dim_ = p.flow.dim() > 0 ? p.flow.dim() : p.q0.dim();
                   if (p.q0.dim() != latent_dim_)
                     throw DomainError("Problem: q0 and flow dimensions differ");
                   registry_.add("q0.mu", static_cast<std::size_t>(latent_dim_));
                   registry_.add("q0.log_sigma", static_cast<std::size_t>(latent_dim_));
                   registry_.add("flow", p.flow.param_count());
                 },
                 [&](const AmortizedPosterior& p) {
                   latent_dim_ = p.infnet.latent_dim;
                   registry_.add("infnet", p.infnet.net.param_count());
                   if (!p.infnet.amortizes_flow()) {
                     if (p.global_flow.size() != p.infnet.k)
                       throw DomainError("Problem: global flow length differs from K");
                     registry_.add("flow.global", p.global_flow.param_count());
                   }
                 },
             },
             posterior_);

  std::visit(Overloaded{
                 [&](const EnergyTarget&) {
                   if (latent_dim_ != 2) throw DomainError("Problem: energy targets are 2D");
                 },
                 [&](const DlgmTarget& t) {
                   if (t.decoder.net.input_dim() != latent_dim_)
                     throw DomainError("Problem: decoder input differs from latent dimension");
                 },
                 [&](const LinearGaussianTarget& t) {
                   if (t.a.cols() != latent_dim_ || t.c.size() != t.a.rows())
                     throw DomainError("Problem: linear-Gaussian shapes do not match");
                 },
             },
             target_);
}

Problem Problem::energy_fit(EnergyFunction e, FlowStack flow) {
  FreePosterior p;
  p.q0 = {Vec::Zero(2), Vec::Zero(2)};
  if (flow.dim() == 0) flow = FlowStack(2);
  p.flow = std::move(flow);
  return Problem(std::move(p), EnergyTarget{e});
}

Eigen::Index Problem::data_dim() const {
  return std::visit(Overloaded{
                        [](const EnergyTarget&) -> Eigen::Index { return 0; },
                        [](const DlgmTarget& t) -> Eigen::Index { return t.decoder.data_dim(); },
                        [](const LinearGaussianTarget& t) -> Eigen::Index { return t.a.rows(); },
                    },
                    target_);
}

Vec Problem::pack() const {
  Vec v(static_cast<Eigen::Index>(registry_.total()));
  if (const auto* dlgm = std::get_if<DlgmTarget>(&target_))
    dlgm->decoder.net.pack(view(v, registry_.at("decoder")));
  std::visit(Overloaded{
                 [&](const FreePosterior& p) {
                   auto mu = view(v, registry_.at("q0.mu"));
                   std::copy(p.q0.mu.data(), p.q0.mu.data() + mu.size(), mu.begin());
                   auto ls = view(v, registry_.at("q0.log_sigma"));
                   std::copy(p.q0.log_sigma.data(), p.q0.log_sigma.data() + ls.size(), ls.begin());
                   p.flow.pack(view(v, registry_.at("flow")));
                 },
                 [&](const AmortizedPosterior& p) {
                   p.infnet.net.pack(view(v, registry_.at("infnet")));
                   if (const auto* s = registry_.find("flow.global")) p.global_flow.pack(view(v, *s));
                 },
             },
             posterior_);
  return v;
}

Problem Problem::bind(const Vec& params) const {
  if (static_cast<std::size_t>(params.size()) != registry_.total())
    throw DomainError("Problem::bind: parameter vector has the wrong length");
  Problem out = *this;
  if (auto* dlgm = std::get_if<DlgmTarget>(&out.target_))
    dlgm->decoder.net.unpack(view(params, registry_.at("decoder")));
  std::visit(Overloaded{
                 [&](FreePosterior& p) {
                   const auto mu = view(params, registry_.at("q0.mu"));
                   std::copy(mu.begin(), mu.end(), p.q0.mu.data());
                   const auto ls = view(params, registry_.at("q0.log_sigma"));
                   std::copy(ls.begin(), ls.end(), p.q0.log_sigma.data());
                   p.flow.unpack(view(params, registry_.at("flow")));
                 },
                 [&](AmortizedPosterior& p) {
                   p.infnet.net.unpack(view(params, registry_.at("infnet")));
                   if (const auto* s = registry_.find("flow.global")) p.global_flow.unpack(view(params, *s));
                 },
             },
             out.posterior_);
  return out;
}

Vec Problem::initial_params(Rng& rng, double init_scale) const {
  Problem p = *this;
  if (auto* dlgm = std::get_if<DlgmTarget>(&p.target_)) dlgm->decoder.net.init_random(rng, init_scale);
  auto init_flow = [&](FlowStack& flow) {
    for (std::size_t k = 0; k < flow.size(); ++k) {
      FlowLayer layer = flow.layer(k);
      if (auto* nice = std::get_if<NiceLayer>(&layer)) {
        nice->coupling.init_random(rng, init_scale);
      } else {
        Vec raw(static_cast<Eigen::Index>(layer_param_count(layer)));
        for (Eigen::Index i = 0; i < raw.size(); ++i) raw[i] = init_scale * rng.normal();
        unpack_layer(layer, {raw.data(), static_cast<std::size_t>(raw.size())});
      }
      flow.set_layer(k, std::move(layer));
    }
  };
  std::visit(Overloaded{
                 [&](FreePosterior& f) {
                   f.q0.mu.setZero();
                   f.q0.log_sigma.setZero();
                   init_flow(f.flow);
                 },
                 [&](AmortizedPosterior& a) {
                   // Zero head biases and small weights give mu ~ 0, sigma ~ 1.
                   a.infnet.net.init_random(rng, init_scale);
                   // Planar w heads start at |w| ~ 1: near w = 0 the u_hat
                   // correction grows like 1/|w| and its gradient like 1/|w|^2,
                   // which swamps the shared trunk.
                   if (a.infnet.family == FlowFamily::kPlanar) {
                     const Eigen::Index d = a.infnet.latent_dim;
                     Vec& bias = a.infnet.net.layers.back().bias;
                     for (std::size_t k = 0; k < a.infnet.k; ++k)
                       for (Eigen::Index i = 0; i < d; ++i)
                         bias[2 * d + static_cast<Eigen::Index>(k) * (2 * d + 1) + d + i] = rng.normal();
                   }
                   init_flow(a.global_flow);
                 },
             },
             p.posterior_);
  return p.pack();
}

// ---------------------------------------------------------------------------

std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("FLOWVI_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------

namespace {

// Number of partial gradient buffers; fixed so the reduction order does not
// depend on the worker count.
constexpr std::size_t kReductionBlocks = 8;

struct SampleTerms {
  double log_q0 = 0.0;
  double sum_logdet = 0.0;
  double log_p = 0.0;
};

double target_log_p(const Target& target, const Vec& z, const Vec& x, const DecoderForward** dec_fwd,
                    DecoderForward* storage) {
  return std::visit(Overloaded{
                        [&](const EnergyTarget& t) { return -energy_eval(t.energy, z); },
                        [&](const DlgmTarget& t) {
                          *storage = decoder_forward(t.decoder, z, x);
                          *dec_fwd = storage;
                          return std_normal_logpdf(z) + storage->loglik;
                        },
                        [&](const LinearGaussianTarget& t) {
                          const Vec r = x - t.a * z - t.c;
                          const double s2 = t.noise_sd * t.noise_sd;
                          return std_normal_logpdf(z) -
                                 0.5 * (r.squaredNorm() / s2 +
                                        static_cast<double>(r.size()) * (kLn2Pi + std::log(s2)));
                        },
                    },
                    target);
}

// Adds weight * d ln p / d(theta) into the target's parameter block and
// returns weight * d ln p / dz.
Vec target_backward(const Target& target, const Registry& reg, const Vec& z, const Vec& x,
                    const DecoderForward* dec_fwd, double weight, Vec* grad) {
  return std::visit(Overloaded{
                        [&](const EnergyTarget& t) -> Vec { return -weight * energy_grad(t.energy, z); },
                        [&](const DlgmTarget& t) -> Vec {
                          Vec scratch;
                          std::span<double> dparams;
                          if (grad) {
                            dparams = view(*grad, reg.at("decoder"));
                          } else {
                            scratch = Vec::Zero(static_cast<Eigen::Index>(t.decoder.net.param_count()));
                            dparams = {scratch.data(), static_cast<std::size_t>(scratch.size())};
                          }
                          return decoder_backward(t.decoder, *dec_fwd, x, weight, dparams) - weight * z;
                        },
                        [&](const LinearGaussianTarget& t) -> Vec {
                          const Vec r = x - t.a * z - t.c;
                          return weight * (t.a.transpose() * r / (t.noise_sd * t.noise_sd) - z);
                        },
                    },
                    target);
}

// Evaluates every sample for datapoint b and, when `grad` is non-null, adds
// the gradient of weight * sum_s F_bs into it.
void evaluate_datapoint(const Problem& bound, const Vec* x_ptr, std::size_t b, const Mat& eps,
                        std::size_t samples, double beta_t, double weight,
                        std::vector<SampleTerms>& terms, Vec* grad) {
  static const Vec kEmpty;
  const Vec& x = x_ptr ? *x_ptr : kEmpty;
  const Registry& reg = bound.registry();
  const Eigen::Index d = bound.latent_dim();

  const DiagGaussian* q0 = nullptr;
  const FlowStack* flow = nullptr;
  InfnetOutput amortized;
  const auto* amort = std::get_if<AmortizedPosterior>(&bound.posterior());
  if (amort) {
    amortized = infnet_forward(amort->infnet, x, &amort->global_flow);
    q0 = &amortized.q0;
    flow = &amortized.flow;
  } else {
    const auto& free = std::get<FreePosterior>(bound.posterior());
    q0 = &free.q0;
    flow = &free.flow;
  }
  const Vec sigma = q0->log_sigma.array().exp();

  Vec dmu = Vec::Zero(d);
  Vec dlog_sigma = Vec::Zero(d);
  Vec dflow_local;
  std::span<double> dflow;
  if (grad) {
    if (amort && amort->infnet.amortizes_flow()) {
      dflow_local = Vec::Zero(static_cast<Eigen::Index>(flow->param_count()));
      dflow = {dflow_local.data(), static_cast<std::size_t>(dflow_local.size())};
    } else if (amort) {
      if (const auto* s = reg.find("flow.global")) dflow = view(*grad, *s);
    } else {
      dflow = view(*grad, reg.at("flow"));
    }
  }

  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t row = b * samples + s;
    const Vec e = eps.row(static_cast<Eigen::Index>(row)).transpose();
    const Vec z0 = q0->mu + sigma.cwiseProduct(e);
    SampleTerms& st = terms[row];
    st.log_q0 = -0.5 * (e.squaredNorm() + static_cast<double>(d) * kLn2Pi) - q0->log_sigma.sum();
    const FlowResult fr = flow_forward(*flow, z0);
    st.sum_logdet = fr.sum_logdet;
    DecoderForward dec_storage{};
    const DecoderForward* dec_fwd = nullptr;
    st.log_p = target_log_p(bound.target(), fr.z_out, x, &dec_fwd, &dec_storage);
    const double f = st.log_q0 - st.sum_logdet - beta_t * st.log_p;
    if (!std::isfinite(f) || fr.near_singular)
      throw NumericError("free energy is not finite at sample " + std::to_string(row),
                         static_cast<long>(row));
    if (!grad) continue;

    // d(weight * F)/dz_K = -beta * weight * d ln p/dz_K
    const Vec g_zk = target_backward(bound.target(), reg, fr.z_out, x, dec_fwd, -beta_t * weight, grad);
    const Vec g_z0 = flow_backward_accumulate(*flow, fr.tape, g_zk, -weight, dflow);
    dmu += g_z0;
    // ln q0(z0) = -sum(eps^2)/2 - sum(log sigma) - const at fixed eps.
    dlog_sigma += g_z0.cwiseProduct(sigma).cwiseProduct(e) - Vec::Constant(d, weight);
  }
  if (!grad) return;

  if (amort) {
    infnet_backward(amort->infnet, amortized.tape, dmu, dlog_sigma, dflow_local,
                    view(*grad, reg.at("infnet")));
  } else {
    auto mu = view(*grad, reg.at("q0.mu"));
    auto ls = view(*grad, reg.at("q0.log_sigma"));
    for (Eigen::Index i = 0; i < d; ++i) {
      mu[static_cast<std::size_t>(i)] += dmu[i];
      ls[static_cast<std::size_t>(i)] += dlog_sigma[i];
    }
  }
}

}  // namespace

ElboEstimate elbo_value_and_grad(const Problem& problem, const Vec& params,
                                 const std::vector<Vec>& xs, const Mat& eps, std::size_t samples,
                                 double beta_t, Vec* grad, std::size_t threads) {
  if (samples < 1) throw DomainError("elbo: need at least one sample");
  const std::size_t points = xs.empty() ? 1 : xs.size();
  if (static_cast<std::size_t>(eps.rows()) != points * samples || eps.cols() != problem.latent_dim())
    throw DomainError("elbo: noise matrix has the wrong shape");
  const Problem bound = problem.bind(params);
  const double weight = 1.0 / static_cast<double>(points * samples);

  std::vector<SampleTerms> terms(points * samples);
  const std::size_t blocks = std::min(kReductionBlocks, points);
  std::vector<Vec> partial(grad ? blocks : 0);
  parallel_for(blocks, resolve_threads(threads), [&](std::size_t blk) {
    Vec* g = nullptr;
    if (grad) {
      partial[blk] = Vec::Zero(params.size());
      g = &partial[blk];
    }
    const std::size_t lo = blk * points / blocks;
    const std::size_t hi = (blk + 1) * points / blocks;
    for (std::size_t b = lo; b < hi; ++b)
      evaluate_datapoint(bound, xs.empty() ? nullptr : &xs[b], b, eps, samples, beta_t, weight, terms, g);
  });
  if (grad) {
    *grad = Vec::Zero(params.size());
    for (const auto& p : partial) *grad += p;
  }

  ElboEstimate est;
  est.beta_t = beta_t;
  double sum_f = 0.0, sum_f2 = 0.0;
  for (const auto& st : terms) {
    est.parts.entropy_q0 += st.log_q0;
    est.parts.neg_sum_logdet -= st.sum_logdet;
    est.parts.neg_logp -= st.log_p;
    const double f = st.log_q0 - st.sum_logdet - beta_t * st.log_p;
    sum_f += f;
    sum_f2 += f * f;
  }
  const double n = static_cast<double>(terms.size());
  est.parts.entropy_q0 /= n;
  est.parts.neg_sum_logdet /= n;
  est.parts.neg_logp /= n;
  est.free_energy = est.parts.entropy_q0 + est.parts.neg_sum_logdet + beta_t * est.parts.neg_logp;
  if (terms.size() > 1) {
    const double mean = sum_f / n;
    const double var = std::max(0.0, (sum_f2 - n * mean * mean) / (n - 1.0));
    est.std_error = std::sqrt(var / n);
  }
  return est;
}

std::pair<ElboEstimate, ElboTape> elbo_estimate(const Problem& problem, const Vec& params,
                                                const std::vector<Vec>& xs, std::size_t samples,
                                                double beta_t, Rng& rng) {
  if (samples < 1) throw DomainError("elbo_estimate: need at least one sample");
  ElboTape tape;
  tape.params_fingerprint = fingerprint(params);
  tape.xs = xs;
  tape.samples = samples;
  tape.beta_t = beta_t;
  const std::size_t points = xs.empty() ? 1 : xs.size();
  const Eigen::Index d = problem.latent_dim();
  tape.eps = Mat(static_cast<Eigen::Index>(points * samples), d);
  for (Eigen::Index r = 0; r < tape.eps.rows(); ++r)
    tape.eps.row(r) = sample_std_normal(rng, static_cast<std::size_t>(d)).transpose();
  ElboEstimate est = elbo_value_and_grad(problem, params, xs, tape.eps, samples, beta_t, nullptr);
  return {est, std::move(tape)};
}

Vec elbo_backward(const Problem& problem, const Vec& params, const ElboTape& tape, std::size_t threads) {
  if (tape.params_fingerprint != fingerprint(params))
    throw StaleTapeError("elbo_backward: tape was recorded with different parameters");
  Vec grad;
  elbo_value_and_grad(problem, params, tape.xs, tape.eps, tape.samples, tape.beta_t, &grad, threads);
  return grad;
}

// ---------------------------------------------------------------------------

RmspropState RmspropState::zeros(std::size_t n, double decay, double epsilon) {
  const auto m = static_cast<Eigen::Index>(n);
  return {Vec::Zero(m), Vec::Zero(m), decay, epsilon};
}

void rmsprop_step(Vec& params, RmspropState& state, const Vec& grad, double learning_rate,
                  double momentum) {
  if (grad.size() != params.size() || state.mean_square.size() != params.size() ||
      state.velocity.size() != params.size())
    throw DomainError("rmsprop_step: length mismatch");
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    double& ms = state.mean_square[i];
    ms = state.decay * ms + (1.0 - state.decay) * g * g;
    double& v = state.velocity[i];
    v = momentum * v - learning_rate * g / std::sqrt(ms + state.epsilon);
    params[i] += v;
  }
}

// ---------------------------------------------------------------------------

Vec Dataset::row(std::size_t i) const {
  if (i >= n) throw DomainError("Dataset::row: index out of range");
  return Eigen::Map<const Vec>(values.data() + i * d, static_cast<Eigen::Index>(d));
}

TrainState initial_train_state(const Problem& problem, const TrainConfig& cfg, double init_scale) {
  TrainState st{Vec(), problem.registry(), RmspropState{}, Rng(cfg.seed), 0};
  Rng init_rng = st.rng.split(1);
  st.params = problem.initial_params(init_rng, init_scale);
  st.rmsprop = RmspropState::zeros(problem.registry().total(), cfg.rms_decay, cfg.rms_epsilon);
  st.rng = Rng(cfg.seed).split(2);
  return st;
}

TrainResult train(const TrainConfig& cfg, const Problem& problem, TrainState state,
                  const Dataset* data, const std::vector<Vec>* fixed_xs) {
  cfg.validate();
  if (static_cast<std::size_t>(state.params.size()) != problem.registry().total())
    throw DomainError("train: state does not match the problem's parameter registry");
  const bool amortized = std::holds_alternative<AmortizedPosterior>(problem.posterior());
  if (amortized && (!data || data->n == 0)) throw InputError("train: amortized problems need data");
  if (data && static_cast<Eigen::Index>(data->d) != problem.data_dim())
    throw InputError("train: dataset dimension does not match the model");

  TrainResult result;
  const std::size_t threads = resolve_threads(cfg.threads);
  const auto start = std::chrono::steady_clock::now();
  const Eigen::Index d = problem.latent_dim();
  Vec grad;
  std::vector<Vec> xs;
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const std::size_t t = state.t;
    const double beta = anneal_beta(t, cfg);

    std::size_t samples = 1;
    if (amortized) {
      xs.resize(cfg.minibatch);
      for (auto& x : xs) x = data->row(static_cast<std::size_t>(state.rng.next_u64() % data->n));
    } else if (fixed_xs) {
      xs = *fixed_xs;
      samples = cfg.minibatch;
    } else {
      xs.clear();
      samples = cfg.minibatch;
    }
    const std::size_t points = xs.empty() ? 1 : xs.size();
    Mat eps(static_cast<Eigen::Index>(points * samples), d);
    for (Eigen::Index r = 0; r < eps.rows(); ++r)
      for (Eigen::Index c = 0; c < d; ++c) eps(r, c) = state.rng.normal();

    ElboEstimate est;
    try {
      est = elbo_value_and_grad(problem, state.params, xs, eps, samples, beta, &grad, threads);
      if (!grad.allFinite()) throw NumericError("gradient is not finite");
    } catch (const NumericError& e) {
      result.halted = true;
      result.halt_reason = "iteration " + std::to_string(t) + ": " + e.what();
      result.halt_sample = e.sample_index();
      break;
    }

    if (t % cfg.eval_every == 0) {
      MetricRow row{t, beta, est.free_energy, est.parts.entropy_q0, est.parts.neg_sum_logdet,
                    est.parts.neg_logp, 0.0};
      if (cfg.record_wallclock)
        row.wallclock_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      result.metrics.push_back(row);
    }
    rmsprop_step(state.params, state.rmsprop, grad, cfg.learning_rate, cfg.momentum);
    ++state.t;
  }
  result.state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------

namespace {

struct PosteriorDraw {
  Vec z_k;
  double log_qk;
};

// Draw from q_K for a bound problem, reusing the amortized output for x.
PosteriorDraw draw_posterior(const DiagGaussian& q0, const FlowStack& flow, Rng& rng) {
  const GaussianDraw g = diag_gaussian_sample(q0, rng);
  const FlowResult fr = flow_forward(flow, g.z);
  const double log_q0 = -0.5 * (g.eps.squaredNorm() + static_cast<double>(g.eps.size()) * kLn2Pi) -
                        q0.log_sigma.sum();
  return {fr.z_out, log_q0 - fr.sum_logdet};
}

}  // namespace

KlEstimate kl_to_energy_with_log_z(const Problem& problem, const Vec& params, EnergyFunction e,
                                   std::size_t samples, double log_z, Rng& rng) {
  if (samples < 2) throw DomainError("kl_to_energy: need at least two samples");
  const Problem bound = problem.bind(params);
  const auto* free = std::get_if<FreePosterior>(&bound.posterior());
  if (!free || bound.latent_dim() != 2) throw DomainError("kl_to_energy: needs a free 2D posterior");
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const PosteriorDraw pd = draw_posterior(free->q0, free->flow, rng);
    const double v = pd.log_qk + energy_eval(e, pd.z_k);
    sum += v;
    sum2 += v * v;
  }
  const double n = static_cast<double>(samples);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum2 - n * mean * mean) / (n - 1.0));
  return {mean + log_z, std::sqrt(var / n), log_z};
}

KlEstimate kl_to_energy(const Problem& problem, const Vec& params, EnergyFunction e,
                        std::size_t samples, int grid_n, Rng& rng) {
  return kl_to_energy_with_log_z(problem, params, e, samples, std::log(energy_normalizer(e, grid_n)), rng);
}

std::vector<double> log_importance_weights(const Problem& problem, const Vec& params, const Vec& x,
                                           std::size_t samples, Rng& rng) {
  if (samples < 1) throw DomainError("log_importance_weights: need at least one sample");
  const Problem bound = problem.bind(params);
  DiagGaussian q0;
  FlowStack flow;
  if (const auto* a = std::get_if<AmortizedPosterior>(&bound.posterior())) {
    InfnetOutput o = infnet_forward(a->infnet, x, &a->global_flow);
    q0 = std::move(o.q0);
    flow = std::move(o.flow);
  } else {
    const auto& f = std::get<FreePosterior>(bound.posterior());
    q0 = f.q0;
    flow = f.flow;
  }
  std::vector<double> log_w(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    const PosteriorDraw pd = draw_posterior(q0, flow, rng);
    DecoderForward storage{};
    const DecoderForward* unused = nullptr;
    log_w[s] = target_log_p(bound.target(), pd.z_k, x, &unused, &storage) - pd.log_qk;
  }
  return log_w;
}

double log_mean_exp(const std::vector<double>& log_w) {
  if (log_w.empty()) throw DomainError("log_mean_exp: empty input");
  const double hi = *std::max_element(log_w.begin(), log_w.end());
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double lw : log_w) acc += std::exp(lw - hi);
  return hi + std::log(acc) - std::log(static_cast<double>(log_w.size()));
}

double is_marginal_loglik(const Problem& problem, const Vec& params, const Vec& x,
                          std::size_t samples, Rng& rng) {
  return log_mean_exp(log_importance_weights(problem, params, x, samples, rng));
}

double flow_log_density(const Problem& problem, const Vec& params, const Vec& z_k) {
  const Problem bound = problem.bind(params);
  const auto* free = std::get_if<FreePosterior>(&bound.posterior());
  if (!free) throw DomainError("flow_log_density: needs a non-amortized posterior");
  const Vec z0 = flow_inverse(free->flow, z_k);
  const FlowResult fr = flow_forward(free->flow, z0);
  return diag_gaussian_logpdf(free->q0, z0) - fr.sum_logdet;
}

}  // namespace flowvi
