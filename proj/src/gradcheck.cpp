#include "flowvi/gradcheck.hpp"

#include "flowvi/flows.hpp"
#include "flowvi/mlp.hpp"
#include "flowvi/models.hpp"
#include "flowvi/vi_engine.hpp"

#include <cmath>
#include <functional>
#include <limits>

namespace flowvi {

namespace {

// Finite differences are not meaningful within a step of a maxout kink.
constexpr double kKinkMargin = 1e-3;
constexpr int kMaxRedraws = 50;

struct Instance {
  Vec analytic;
  Vec numeric;
  bool valid = true;  // false: the stencil would cross a maxout kink
};

Vec randn(Rng& rng, Eigen::Index n, double sd = 1.0) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = sd * rng.normal();
  return v;
}

Eigen::Index pick_dim(Rng& rng) { return 2 + static_cast<Eigen::Index>(rng.next_u64() % 3); }

PlanarLayer planar_layer(Rng& rng, Eigen::Index d) {
  return {randn(rng, d), randn(rng, d), rng.normal()};
}

RadialLayer radial_layer(Rng& rng, Eigen::Index d) {
  return {randn(rng, d), 0.5 * rng.normal(), rng.normal()};
}

NiceLayer nice_layer(Rng& rng, Eigen::Index d, bool orthogonal) {
  NiceLayer p;
  const Eigen::Index a = d / 2;
  p.mask.assign(static_cast<std::size_t>(d), false);
  for (Eigen::Index j = 0; j < a; ++j) p.mask[static_cast<std::size_t>(j)] = true;
  if (orthogonal)
    p.mixer = random_orthogonal(rng, static_cast<std::size_t>(d));
  else
    p.mixer = Permutation{random_permutation(rng, static_cast<std::size_t>(d))};
  p.coupling = MlpParams::create({static_cast<int>(a), 6, static_cast<int>(d - a)}, Activation::kTanh);
  p.coupling.init_random(rng, 1.0);
  for (auto& l : p.coupling.layers) l.bias = randn(rng, l.bias.size(), 0.5);
  return p;
}

FlowLayer any_layer(Rng& rng, Eigen::Index d, std::size_t i) {
  switch (i % 4) {
    case 0: return planar_layer(rng, d);
    case 1: return radial_layer(rng, d);
    case 2: return nice_layer(rng, d, false);
    default: return nice_layer(rng, d, true);
  }
}

// Loss a'z_K + c sum_logdet of a stack, checked against parameters or input.
Instance stack_instance(Rng& rng, FlowStack stack, bool wrt_input) {
  const Eigen::Index d = stack.dim();
  const Vec z0 = randn(rng, d);
  const Vec a = randn(rng, d);
  const double c = rng.normal();
  const FlowResult r = flow_forward(stack, z0);
  const FlowGradient g = flow_backward(stack, r.tape, a, c);
  auto loss = [&](const FlowStack& s, const Vec& z) {
    const FlowResult f = flow_forward(s, z);
    return a.dot(f.z_out) + c * f.sum_logdet;
  };
  if (wrt_input) return {g.dz0, fd_gradient([&](const Vec& z) { return loss(stack, z); }, z0)};
  const Vec flat = stack.flat();
  const Vec fd = fd_gradient(
      [&](const Vec& p) {
        FlowStack s = stack;
        s.unpack({p.data(), static_cast<std::size_t>(p.size())});
        return loss(s, z0);
      },
      flat);
  return {g.dparams, fd};
}

FlowStack one(FlowLayer layer) {
  FlowStack s;
  s.push_back(std::move(layer));
  return s;
}

Instance planar_constraint_instance(Rng& rng) {
  const Eigen::Index d = pick_dim(rng);
  PlanarLayer p = planar_layer(rng, d);
  // Set w'u_raw across the range where the correction is active.
  const double target = -4.0 + 8.0 * rng.uniform();
  p.u_raw += ((target - p.w.dot(p.u_raw)) / p.w.squaredNorm()) * p.w;
  return stack_instance(rng, one(p), false);
}

Instance radial_constraint_instance(Rng& rng) {
  const Eigen::Index d = pick_dim(rng);
  RadialLayer p = radial_layer(rng, d);
  p.log_alpha = -2.0 + 4.0 * rng.uniform();
  p.beta_raw = -6.0 + 12.0 * rng.uniform();
  return stack_instance(rng, one(p), false);
}

Instance mlp_instance(Rng& rng, Activation act) {
  const int in = 2 + static_cast<int>(rng.next_u64() % 4);
  MlpParams p = MlpParams::create({in, 6, 5, 3}, act, 3);
  p.init_random(rng, 1.0);
  for (auto& l : p.layers) l.bias = randn(rng, l.bias.size(), 0.3);
  const Vec x = randn(rng, in), a = randn(rng, 3);
  const MlpOutput o = mlp_forward(p, x);
  if (maxout_margin(p, o.tape) < kKinkMargin) return {Vec(), Vec(), false};
  const MlpGradient g = mlp_backward(p, o.tape, a);
  const Vec fd_p = fd_gradient(
      [&](const Vec& v) {
        MlpParams q = p;
        q.unpack({v.data(), static_cast<std::size_t>(v.size())});
        return a.dot(mlp_forward(q, x).y);
      },
      p.flat());
  const Vec fd_x = fd_gradient([&](const Vec& v) { return a.dot(mlp_forward(p, v).y); }, x);
  Vec analytic(g.dparams.size() + g.dx.size()), numeric(analytic.size());
  analytic << g.dparams, g.dx;
  numeric << fd_p, fd_x;
  return {analytic, numeric};
}

Instance energy_instance(Rng& rng, std::size_t i) {
  const EnergyFunction e = make_energy(static_cast<int>(i % 5));
  const Vec z = randn(rng, 2, 1.5);
  return {energy_grad(e, z), fd_gradient([&](const Vec& v) { return energy_eval(e, v); }, z)};
}

Instance bernoulli_instance(Rng& rng) {
  const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.next_u64() % 6);
  const Vec l = randn(rng, n, 3.0);
  Vec x(n);
  for (Eigen::Index j = 0; j < n; ++j) x[j] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  return {bernoulli_loglik_grad(l, x), fd_gradient([&](const Vec& v) { return bernoulli_loglik(v, x); }, l)};
}

Instance logitnormal_instance(Rng& rng) {
  const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.next_u64() % 6);
  const Vec mu = randn(rng, n), la = randn(rng, n, 0.5);
  Vec x(n);
  for (Eigen::Index j = 0; j < n; ++j) x[j] = 0.02 + 0.96 * rng.uniform();
  const LogitNormalGrad g = logitnormal_loglik_grad(mu, la, x);
  Vec analytic(2 * n), numeric(2 * n);
  analytic << g.dmu, g.dlog_alpha;
  numeric << fd_gradient([&](const Vec& v) { return logitnormal_loglik(v, la, x); }, mu),
      fd_gradient([&](const Vec& v) { return logitnormal_loglik(mu, v, x); }, la);
  return {analytic, numeric};
}

const FlowFamily kFamilies[] = {FlowFamily::kPlanar, FlowFamily::kRadial, FlowFamily::kNicePerm,
                                FlowFamily::kNiceOrth};

// Value and gradient of the frozen-noise estimate against finite differences.
Instance elbo_instance(Rng& rng, const Problem& p, const std::vector<Vec>& xs, std::size_t samples,
                       double beta) {
  Vec params = p.initial_params(rng, 0.5);
  params += randn(rng, params.size(), 0.2);
  const std::size_t points = xs.empty() ? 1 : xs.size();
  Mat eps(static_cast<Eigen::Index>(points * samples), p.latent_dim());
  for (Eigen::Index r = 0; r < eps.rows(); ++r)
    for (Eigen::Index c = 0; c < eps.cols(); ++c) eps(r, c) = rng.normal();

  if (std::holds_alternative<DlgmTarget>(p.target())) {
    // Reject draws whose forward pass sits within a step of a maxout kink.
    const Problem bound = p.bind(params);
    const auto& amort = std::get<AmortizedPosterior>(bound.posterior());
    const auto& dec = std::get<DlgmTarget>(bound.target()).decoder;
    for (std::size_t b = 0; b < points; ++b) {
      const InfnetOutput o = infnet_forward(amort.infnet, xs[b], &amort.global_flow);
      if (maxout_margin(amort.infnet.net, o.tape) < kKinkMargin) return {Vec(), Vec(), false};
      for (std::size_t s = 0; s < samples; ++s) {
        const Vec e = eps.row(static_cast<Eigen::Index>(b * samples + s)).transpose();
        const Vec z0 = o.q0.mu + o.q0.log_sigma.array().exp().matrix().cwiseProduct(e);
        const Vec zk = flow_forward(o.flow, z0).z_out;
        if (maxout_margin(dec.net, decoder_forward(dec, zk, xs[b]).out.tape) < kKinkMargin)
          return {Vec(), Vec(), false};
      }
    }
  }

  Vec grad;
  elbo_value_and_grad(p, params, xs, eps, samples, beta, &grad, 1);
  const Vec fd = fd_gradient(
      [&](const Vec& v) { return elbo_value_and_grad(p, v, xs, eps, samples, beta, nullptr, 1).free_energy; },
      params);
  return {grad, fd};
}

Instance elbo_energy_instance(Rng& rng, std::size_t i) {
  const FlowFamily fam = kFamilies[i % 4];
  const std::size_t k = 1 + (i / 4) % 2;
  const int id = 1 + static_cast<int>((i / 8) % 4);
  const Problem p = Problem::energy_fit(make_energy(id), make_flow_stack(fam, 2, k, rng));
  return elbo_instance(rng, p, {}, 3, 0.01 + 0.99 * rng.uniform());
}

Instance elbo_vae_instance(Rng& rng, std::size_t i, Likelihood lik) {
  const FlowFamily fam = kFamilies[i % 4];
  const std::size_t k = 1 + (i / 4) % 2;
  const int data_dim = 6;
  auto infnet = InferenceNet::create(data_dim, {5}, 2, fam, k, Activation::kMaxout, 2);
  FlowStack global(2);
  if (!infnet.amortizes_flow()) global = make_flow_stack(fam, 2, k, rng);
  auto dec = Decoder::create(2, {5}, data_dim, lik, Activation::kMaxout, 2);
  const Problem p(AmortizedPosterior{std::move(infnet), std::move(global)}, DlgmTarget{std::move(dec)});
  std::vector<Vec> xs;
  for (int b = 0; b < 3; ++b) {
    Vec x(data_dim);
    for (int j = 0; j < data_dim; ++j)
      x[j] = lik == Likelihood::kBernoulli ? (rng.uniform() < 0.4 ? 1.0 : 0.0) : 0.05 + 0.9 * rng.uniform();
    xs.push_back(x);
  }
  return elbo_instance(rng, p, xs, 1, 0.01 + 0.99 * rng.uniform());
}

struct FamilySpec {
  const char* name;
  std::function<Instance(Rng&, std::size_t)> make;
};

std::vector<FamilySpec> families() {
  return {
      {"planar.input", [](Rng& r, std::size_t) { return stack_instance(r, one(planar_layer(r, pick_dim(r))), true); }},
      {"planar.params", [](Rng& r, std::size_t) { return stack_instance(r, one(planar_layer(r, pick_dim(r))), false); }},
      {"radial.input", [](Rng& r, std::size_t) { return stack_instance(r, one(radial_layer(r, pick_dim(r))), true); }},
      {"radial.params", [](Rng& r, std::size_t) { return stack_instance(r, one(radial_layer(r, pick_dim(r))), false); }},
      {"nice.input", [](Rng& r, std::size_t i) { return stack_instance(r, one(nice_layer(r, pick_dim(r), i % 2)), true); }},
      {"nice.params", [](Rng& r, std::size_t i) { return stack_instance(r, one(nice_layer(r, pick_dim(r), i % 2)), false); }},
      {"constraint.planar", [](Rng& r, std::size_t) { return planar_constraint_instance(r); }},
      {"constraint.radial", [](Rng& r, std::size_t) { return radial_constraint_instance(r); }},
      {"stack.mixed",
       [](Rng& r, std::size_t i) {
         FlowStack s(2);
         for (std::size_t k = 0; k < 8; ++k) s.push_back(any_layer(r, 2, k + i));
         return stack_instance(r, std::move(s), i % 2 == 0);
       }},
      {"mlp.maxout", [](Rng& r, std::size_t) { return mlp_instance(r, Activation::kMaxout); }},
      {"mlp.tanh", [](Rng& r, std::size_t) { return mlp_instance(r, Activation::kTanh); }},
      {"energy.grad", [](Rng& r, std::size_t i) { return energy_instance(r, i); }},
      {"likelihood.bernoulli", [](Rng& r, std::size_t) { return bernoulli_instance(r); }},
      {"likelihood.logitnormal", [](Rng& r, std::size_t) { return logitnormal_instance(r); }},
      {"elbo.energy", [](Rng& r, std::size_t i) { return elbo_energy_instance(r, i); }},
      {"elbo.bernoulli", [](Rng& r, std::size_t i) { return elbo_vae_instance(r, i, Likelihood::kBernoulli); }},
      {"elbo.logitnormal", [](Rng& r, std::size_t i) { return elbo_vae_instance(r, i, Likelihood::kLogitNormal); }},
  };
}

}  // namespace

std::vector<std::string> gradcheck_family_names() {
  std::vector<std::string> names;
  for (const auto& f : families()) names.emplace_back(f.name);
  return names;
}

GradcheckReport run_gradcheck(const GradcheckConfig& cfg) {
  GradcheckReport report;
  report.tolerance = cfg.tolerance;
  const auto specs = families();
  for (std::size_t f = 0; f < specs.size(); ++f) {
    Rng rng = Rng(cfg.seed).split(f);
    GradcheckFamily fam;
    fam.name = specs[f].name;
    for (std::size_t i = 0; i < cfg.instances; ++i) {
      Instance inst;
      for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
        inst = specs[f].make(rng, i);
        if (inst.valid) break;
      }
      if (!inst.valid) throw NumericError("gradcheck: could not draw a differentiable instance for " + fam.name);
      if (fam.name == cfg.corrupt_family) inst.analytic[0] += 1e-3 * (1.0 + std::abs(inst.analytic[0]));
      const double err = max_relative_error(inst.analytic, inst.numeric);
      if (!(err <= fam.max_rel_error)) {
        fam.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        fam.worst_instance = i;
      }
      ++fam.instances;
    }
    fam.pass = fam.max_rel_error <= cfg.tolerance;
    report.pass = report.pass && fam.pass;
    report.families.push_back(fam);
  }
  return report;
}

}  // namespace flowvi
