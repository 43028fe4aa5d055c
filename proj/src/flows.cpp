#include "flowvi/flows.hpp"

#include <cmath>
#include <type_traits>

namespace flowvi {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

Vec gather(const Vec& v, const std::vector<int>& idx) {
  Vec out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[idx[i]];
  return out;
}

Vec apply_mixer(const Mixer& mixer, const Vec& z) {
  return std::visit(Overloaded{
                        [&](const std::monostate&) -> Vec { return z; },
                        [&](const Permutation& p) -> Vec { return gather(z, p.perm); },
                        [&](const Mat& q) -> Vec { return q * z; },
                    },
                    mixer);
}

// Transpose of the mixing map: the exact inverse, and also the map that
// carries gradients back to the unmixed coordinates.
Vec unapply_mixer(const Mixer& mixer, const Vec& y) {
  return std::visit(Overloaded{
                        [&](const std::monostate&) -> Vec { return y; },
                        [&](const Permutation& p) -> Vec {
                          Vec z(y.size());
                          for (std::size_t i = 0; i < p.perm.size(); ++i)
                            z[p.perm[i]] = y[static_cast<Eigen::Index>(i)];
                          return z;
                        },
                        [&](const Mat& q) -> Vec { return q.transpose() * y; },
                    },
                    mixer);
}

void check_dim(Eigen::Index expected, Eigen::Index got, const char* where) {
  if (expected != got)
    throw DomainError(std::string(where) + ": dimension mismatch (expected " +
                      std::to_string(expected) + ", got " + std::to_string(got) + ")");
}

// One layer of the forward pass. Writes the layer log-determinant and, for
// NICE layers, the coupling tape.
// 1 + (1 - t^2) w'u_hat. For w != 0, w'u_hat = -1 + softplus(w'u_raw), so the
// factor is rewritten as t^2 + (1 - t^2) softplus(w'u_raw), which stays
// positive where -1 + softplus(.) has rounded to exactly -1.
double planar_det(const LayerDerived& dv, double t) {
  const double dt = 1.0 - t * t;
  if (dv.n2 == 0.0) return 1.0 + dt * dv.wu_hat;
  return t * t + dt * dv.sp;
}

Vec planar_step(const PlanarLayer& p, const LayerDerived& dv, const Vec& z, double& logdet, bool& near_singular) {
  check_dim(p.dim(), z.size(), "planar_forward");
  const double t = std::tanh(p.w.dot(z) + p.b);
  const double det = planar_det(dv, t);
  if (std::abs(det) < kNearSingular) near_singular = true;
  logdet = std::log(std::abs(det));
  return z + t * dv.u_hat;
}

struct RadialTerms {
  double alpha, beta_hat, r, h, first, second;
};

RadialTerms radial_terms(const RadialLayer& p, const LayerDerived& dv, const Vec& z) {
  const double alpha = dv.alpha;
  const double beta_hat = dv.beta_hat;
  const double r = (z - p.z0).norm();
  const double h = 1.0 / (alpha + r);
  // 1 + beta h + beta h' r with h' = -h^2 simplifies to 1 + beta alpha h^2.
  return {alpha, beta_hat, r, h, 1.0 + beta_hat * h, 1.0 + beta_hat * alpha * h * h};
}

Vec radial_step(const RadialLayer& p, const LayerDerived& dv, const Vec& z, double& logdet) {
  check_dim(p.dim(), z.size(), "radial_forward");
  const RadialTerms t = radial_terms(p, dv, z);
  if (!(t.first > 0.0) || !(t.second > 0.0))
    throw NumericError("radial_forward: non-positive determinant factor");
  logdet = static_cast<double>(z.size() - 1) * std::log(t.first) + std::log(t.second);
  return z + t.beta_hat * t.h * (z - p.z0);
}

Vec nice_step(const NiceLayer& p, const Vec& z, MlpTape* tape) {
  check_dim(p.dim(), z.size(), "nice_forward");
  Vec y = apply_mixer(p.mixer, z);
  const auto a = p.part_a();
  const auto b = p.part_b();
  MlpOutput out = mlp_forward(p.coupling, gather(y, a));
  for (std::size_t i = 0; i < b.size(); ++i) y[b[i]] += out.y[static_cast<Eigen::Index>(i)];
  if (tape) *tape = std::move(out.tape);
  return y;
}

// Result of a one-layer stack, so flow_backward accepts it.
FlowResult single_layer_result(const FlowLayer& layer, Vec z_in, Vec z_out, double logdet) {
  FlowStack s(std::visit([](const auto& l) { return l.dim(); }, layer));
  s.push_back(layer);
  FlowResult r;
  r.tape.stack_fingerprint = s.fingerprint();
  r.z_out = std::move(z_out);
  r.sum_logdet = logdet;
  r.tape.inputs.push_back(std::move(z_in));
  r.tape.nets.emplace_back();
  return r;
}

// Bisection on a nondecreasing scalar function; returns x with g(x) ~= target.
template <class F>
double bisect(F&& g, double target, double lo, double hi, double tol, const char* where) {
  for (int it = 0; it < kInvertMaxIter; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (hi - lo <= tol || mid == lo || mid == hi) return mid;
    if (g(mid) < target)
      lo = mid;
    else
      hi = mid;
  }
  if (hi - lo <= tol) return 0.5 * (lo + hi);
  throw NumericError(std::string(where) + ": bisection did not converge");
}

}  // namespace

// ---------------------------------------------------------------------------

Vec planar_constrain(const Vec& u_raw, const Vec& w) {
  check_dim(w.size(), u_raw.size(), "planar_constrain");
  const double n2 = w.squaredNorm();
  if (n2 == 0.0) throw DomainError("planar_constrain: w must be nonzero");
  const double wu = w.dot(u_raw);
  const double m = -1.0 + softplus(wu);
  return u_raw + ((m - wu) / n2) * w;
}

Vec PlanarLayer::u_hat() const {
  if (w.squaredNorm() == 0.0) return u_raw;
  return planar_constrain(u_raw, w);
}

RadialConstrained radial_constrain(double log_alpha, double beta_raw) {
  const double alpha = std::exp(log_alpha);
  return {alpha, -alpha + softplus(beta_raw)};
}

LayerDerived derive_layer(const FlowLayer& layer) {
  LayerDerived dv;
  std::visit(Overloaded{
                 [&](const PlanarLayer& p) {
                   dv.u_hat = p.u_hat();
                   dv.wu_hat = p.w.dot(dv.u_hat);
                   dv.n2 = p.w.squaredNorm();
                   if (dv.n2 > 0.0) {
                     const double wu = p.w.dot(p.u_raw);
                     dv.sp = softplus(wu);
                     dv.c = -1.0 + dv.sp - wu;
                     dv.dc = sigmoid(wu) - 1.0;
                   }
                 },
                 [&](const RadialLayer& p) {
                   const auto [alpha, beta_hat] = radial_constrain(p.log_alpha, p.beta_raw);
                   dv.alpha = alpha;
                   dv.beta_hat = beta_hat;
                   dv.sig_beta = sigmoid(p.beta_raw);
                 },
                 [](const NiceLayer&) {},
             },
             layer);
  return dv;
}

std::vector<int> NiceLayer::part_a() const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(static_cast<int>(i));
  return idx;
}

std::vector<int> NiceLayer::part_b() const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) idx.push_back(static_cast<int>(i));
  return idx;
}

FlowResult planar_forward(const PlanarLayer& p, const Vec& z) {
  double logdet = 0.0;
  bool near_singular = false;
  Vec out = planar_step(p, derive_layer(p), z, logdet, near_singular);
  FlowResult r = single_layer_result(p, z, std::move(out), logdet);
  r.near_singular = near_singular;
  return r;
}

FlowResult radial_forward(const RadialLayer& p, const Vec& z) {
  double logdet = 0.0;
  Vec out = radial_step(p, derive_layer(p), z, logdet);
  return single_layer_result(p, z, std::move(out), logdet);
}

FlowResult nice_forward(const NiceLayer& p, const Vec& z) {
  FlowStack s(p.dim());
  s.push_back(p);
  return flow_forward(s, z);
}

Vec planar_invert(const PlanarLayer& p, const Vec& z_prime, double tol) {
  check_dim(p.dim(), z_prime.size(), "planar_invert");
  const Vec u = p.u_hat();
  if (p.w.squaredNorm() == 0.0) return z_prime - std::tanh(p.b) * u;
  const double wu = p.w.dot(u);
  if (wu < -1.0 - 1e-12) throw DomainError("planar_invert: w'u_hat < -1, map is not invertible");
  // w'f(z) = a + w'u tanh(a + b) with a = w'z; the tanh term is bounded by |w'u|.
  // The scalar map has slope at most 1 + |w'u|; bisecting to tol / (1 + |w'u|)
  // keeps the residual of the scalar equation below tol.
  const double target = p.w.dot(z_prime);
  const double a = bisect([&](double x) { return x + wu * std::tanh(x + p.b); }, target,
                          target - std::abs(wu) - tol, target + std::abs(wu) + tol, tol / (1.0 + std::abs(wu)),
                          "planar_invert");
  return z_prime - std::tanh(a + p.b) * u;
}

Vec radial_invert(const RadialLayer& p, const Vec& z_prime, double tol) {
  check_dim(p.dim(), z_prime.size(), "radial_invert");
  const auto [alpha, beta_hat] = radial_constrain(p.log_alpha, p.beta_raw);
  if (beta_hat < -alpha) throw DomainError("radial_invert: beta_hat < -alpha");
  const Vec diff = z_prime - p.z0;
  const double rho = diff.norm();
  if (rho == 0.0) return p.z0;
  // r (1 + beta/(alpha + r)) >= r + min(beta, 0), so r <= rho + max(-beta, 0).
  const double r = bisect([&](double x) { return x * (1.0 + beta_hat / (alpha + x)); }, rho, 0.0,
                          rho + std::max(-beta_hat, 0.0) + tol, tol, "radial_invert");
  return p.z0 + diff / (1.0 + beta_hat / (alpha + r));
}

Vec nice_inverse(const NiceLayer& p, const Vec& z_prime) {
  check_dim(p.dim(), z_prime.size(), "nice_inverse");
  Vec y = z_prime;
  const auto a = p.part_a();
  const auto b = p.part_b();
  const Vec shift = mlp_forward(p.coupling, gather(y, a)).y;
  for (std::size_t i = 0; i < b.size(); ++i) y[b[i]] -= shift[static_cast<Eigen::Index>(i)];
  return unapply_mixer(p.mixer, y);
}

// ---------------------------------------------------------------------------

std::string layer_type_name(const FlowLayer& layer) {
  return std::visit(Overloaded{
                        [](const PlanarLayer&) { return std::string("planar"); },
                        [](const RadialLayer&) { return std::string("radial"); },
                        [](const NiceLayer&) { return std::string("nice"); },
                    },
                    layer);
}

std::size_t layer_param_count(const FlowLayer& layer) {
  return std::visit(Overloaded{
                        [](const PlanarLayer& p) { return static_cast<std::size_t>(2 * p.dim() + 1); },
                        [](const RadialLayer& p) { return static_cast<std::size_t>(p.dim() + 2); },
                        [](const NiceLayer& p) { return p.coupling.param_count(); },
                    },
                    layer);
}

void pack_layer(const FlowLayer& layer, std::span<double> out) {
  if (out.size() != layer_param_count(layer)) throw DomainError("pack_layer: size mismatch");
  std::visit(Overloaded{
                 [&](const PlanarLayer& p) {
                   const auto d = static_cast<std::size_t>(p.dim());
                   std::copy(p.u_raw.data(), p.u_raw.data() + d, out.begin());
                   std::copy(p.w.data(), p.w.data() + d, out.begin() + d);
                   out[2 * d] = p.b;
                 },
                 [&](const RadialLayer& p) {
                   const auto d = static_cast<std::size_t>(p.dim());
                   std::copy(p.z0.data(), p.z0.data() + d, out.begin());
                   out[d] = p.log_alpha;
                   out[d + 1] = p.beta_raw;
                 },
                 [&](const NiceLayer& p) { p.coupling.pack(out); },
             },
             layer);
}

void unpack_layer(FlowLayer& layer, std::span<const double> in) {
  if (in.size() != layer_param_count(layer)) throw DomainError("unpack_layer: size mismatch");
  std::visit(Overloaded{
                 [&](PlanarLayer& p) {
                   const auto d = static_cast<std::size_t>(p.dim());
                   std::copy(in.begin(), in.begin() + d, p.u_raw.data());
                   std::copy(in.begin() + d, in.begin() + 2 * d, p.w.data());
                   p.b = in[2 * d];
                 },
                 [&](RadialLayer& p) {
                   const auto d = static_cast<std::size_t>(p.dim());
                   std::copy(in.begin(), in.begin() + d, p.z0.data());
                   p.log_alpha = in[d];
                   p.beta_raw = in[d + 1];
                 },
                 [&](NiceLayer& p) { p.coupling.unpack(in); },
             },
             layer);
}

std::string to_string(FlowFamily f) {
  switch (f) {
    case FlowFamily::kPlanar: return "planar";
    case FlowFamily::kRadial: return "radial";
    case FlowFamily::kNicePerm: return "nice-perm";
    case FlowFamily::kNiceOrth: return "nice-orth";
  }
  return "unknown";
}

FlowFamily parse_flow_family(const std::string& s) {
  if (s == "planar") return FlowFamily::kPlanar;
  if (s == "radial") return FlowFamily::kRadial;
  if (s == "nice-perm") return FlowFamily::kNicePerm;
  if (s == "nice-orth") return FlowFamily::kNiceOrth;
  throw InputError("unknown flow family '" + s + "'");
}

void FlowStack::validate(Eigen::Index dim, const FlowLayer& layer) {
  const Eigen::Index d = std::visit([](const auto& l) { return l.dim(); }, layer);
  check_dim(dim, d, "FlowStack");
  if (const auto* nice = std::get_if<NiceLayer>(&layer)) {
    const auto a = nice->part_a().size();
    if (a == 0 || a == nice->mask.size())
      throw DomainError("NiceLayer: mask must select a nonempty proper subset");
    if (nice->coupling.input_dim() != static_cast<int>(a) ||
        nice->coupling.output_dim() != static_cast<int>(nice->mask.size() - a))
      throw DomainError("NiceLayer: coupling network dimensions do not match the mask");
    if (const auto* q = std::get_if<Mat>(&nice->mixer)) {
      const Mat gram = q->transpose() * *q;
      if ((gram - Mat::Identity(d, d)).cwiseAbs().maxCoeff() > 1e-10)
        throw DomainError("NiceLayer: mixing matrix is not orthogonal");
    }
  }
}

void FlowStack::push_back(FlowLayer layer) {
  if (layers_.empty() && dim_ == 0) dim_ = std::visit([](const auto& l) { return l.dim(); }, layer);
  validate(dim_, layer);
  param_count_ += layer_param_count(layer);
  derived_.push_back(derive_layer(layer));
  layers_.push_back(std::move(layer));
  refresh_fingerprint();
}

void FlowStack::set_layer(std::size_t k, FlowLayer layer) {
  if (k >= layers_.size()) throw DomainError("FlowStack::set_layer: index out of range");
  validate(dim_, layer);
  param_count_ = param_count_ - layer_param_count(layers_[k]) + layer_param_count(layer);
  derived_[k] = derive_layer(layer);
  layers_[k] = std::move(layer);
  refresh_fingerprint();
}

void FlowStack::pack(std::span<double> out) const {
  if (out.size() != param_count()) throw DomainError("FlowStack::pack: size mismatch");
  std::size_t k = 0;
  for (const auto& l : layers_) {
    const std::size_t n = layer_param_count(l);
    pack_layer(l, out.subspan(k, n));
    k += n;
  }
}

void FlowStack::unpack(std::span<const double> in) {
  if (in.size() != param_count()) throw DomainError("FlowStack::unpack: size mismatch");
  std::size_t k = 0;
  for (auto& l : layers_) {
    const std::size_t n = layer_param_count(l);
    unpack_layer(l, in.subspan(k, n));
    k += n;
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) derived_[i] = derive_layer(layers_[i]);
  refresh_fingerprint();
}

Vec FlowStack::flat() const {
  Vec v(static_cast<Eigen::Index>(param_count()));
  pack({v.data(), static_cast<std::size_t>(v.size())});
  return v;
}

void FlowStack::refresh_fingerprint() {
  std::uint64_t h = kFingerprintSeed ^ static_cast<std::uint64_t>(layers_.size());
  for (const auto& l : layers_) {
    std::visit(Overloaded{
                   [&](const PlanarLayer& p) {
                     h = flowvi::fingerprint(p.u_raw, h);
                     h = flowvi::fingerprint(p.w, h);
                     h = flowvi::fingerprint(&p.b, 1, h);
                   },
                   [&](const RadialLayer& p) {
                     h = flowvi::fingerprint(p.z0, h);
                     const double s[2] = {p.log_alpha, p.beta_raw};
                     h = flowvi::fingerprint(s, 2, h ^ 0x5bd1e995ULL);
                   },
                   [&](const NiceLayer& p) { h ^= p.coupling.fingerprint() + 0x9e3779b97f4a7c15ULL + (h << 6); },
               },
               l);
  }
  fingerprint_ = h;
}

std::size_t per_layer_param_count(FlowFamily family, Eigen::Index dim) {
  switch (family) {
    case FlowFamily::kPlanar: return static_cast<std::size_t>(2 * dim + 1);
    case FlowFamily::kRadial: return static_cast<std::size_t>(dim + 2);
    default: throw DomainError("per_layer_param_count: only planar and radial layers are amortized");
  }
}

FlowStack make_flow_stack(FlowFamily family, Eigen::Index dim, std::size_t k, Rng& rng,
                          double init_sd, const NiceOptions& nice) {
  if (dim < 1) throw DomainError("make_flow_stack: dimension must be positive");
  FlowStack stack(dim);
  auto draw = [&](Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = init_sd * rng.normal();
    return v;
  };
  for (std::size_t i = 0; i < k; ++i) {
    switch (family) {
      case FlowFamily::kPlanar: {
        PlanarLayer p{draw(dim), draw(dim), init_sd * rng.normal()};
        stack.push_back(std::move(p));
        break;
      }
      case FlowFamily::kRadial: {
        RadialLayer p{draw(dim), init_sd * rng.normal(), init_sd * rng.normal()};
        stack.push_back(std::move(p));
        break;
      }
      case FlowFamily::kNicePerm:
      case FlowFamily::kNiceOrth: {
        if (dim < 2) throw DomainError("make_flow_stack: NICE needs dimension >= 2");
        NiceLayer p;
        const Eigen::Index a = dim / 2;
        p.mask.assign(static_cast<std::size_t>(dim), false);
        for (Eigen::Index j = 0; j < a; ++j) p.mask[static_cast<std::size_t>(j)] = true;
        if (family == FlowFamily::kNicePerm)
          p.mixer = Permutation{random_permutation(rng, static_cast<std::size_t>(dim))};
        else
          p.mixer = random_orthogonal(rng, static_cast<std::size_t>(dim));
        p.coupling = MlpParams::create({static_cast<int>(a), nice.hidden, static_cast<int>(dim - a)},
                                       Activation::kTanh);
        p.coupling.init_random(rng, init_sd);
        stack.push_back(std::move(p));
        break;
      }
    }
  }
  return stack;
}

// ---------------------------------------------------------------------------

FlowResult flow_forward(const FlowStack& stack, const Vec& z0) {
  check_dim(stack.dim(), z0.size(), "flow_forward");
  FlowResult res;
  res.tape.stack_fingerprint = stack.fingerprint();
  res.tape.inputs.reserve(stack.size());
  res.tape.nets.resize(stack.size());
  Vec z = z0;
  for (std::size_t k = 0; k < stack.size(); ++k) {
    double logdet = 0.0;
    res.tape.inputs.push_back(std::move(z));
    const Vec& in = res.tape.inputs.back();  // storage reserved above
    const LayerDerived& dv = stack.derived(k);
    z = std::visit(Overloaded{
                       [&](const PlanarLayer& p) { return planar_step(p, dv, in, logdet, res.near_singular); },
                       [&](const RadialLayer& p) { return radial_step(p, dv, in, logdet); },
                       [&](const NiceLayer& p) { return nice_step(p, in, &res.tape.nets[k]); },
                   },
                   stack.layer(k));
    res.sum_logdet += logdet;
  }
  res.z_out = std::move(z);
  return res;
}

namespace {

// The backward passes overwrite g (dL/dz_out on entry) with dL/dz_in.
void planar_backward(const PlanarLayer& p, const LayerDerived& dv, const Vec& z, Vec& g, double gl,
                     std::span<double> dp) {
  const Eigen::Index d = p.dim();
  const Vec& u = dv.u_hat;
  const double t = std::tanh(p.w.dot(z) + p.b);
  const double dt = 1.0 - t * t;
  const double gdet = gl / planar_det(dv, t);
  const double gdt = gdet * dt;

  // g_uhat = t g + gdet dt w
  const double g_a = dt * (g.dot(u) + gdet * dv.wu_hat * (-2.0 * t));
  double* du = dp.data();
  double* dw = dp.data() + d;
  if (dv.n2 == 0.0) {
    for (Eigen::Index i = 0; i < d; ++i) {
      du[i] += t * g[i] + gdt * p.w[i];
      dw[i] += g_a * z[i] + gdt * u[i];
    }
  } else {
    // u_hat = u + c w / |w|^2, c = m(w'u) - w'u, m'(x) = sigmoid(x).
    const double gw_dot = t * g.dot(p.w) + gdt * dv.n2;
    const double su = gw_dot * dv.dc / dv.n2;
    const double cw = dv.c / dv.n2;
    const double sw = -2.0 * gw_dot * dv.c / (dv.n2 * dv.n2);
    for (Eigen::Index i = 0; i < d; ++i) {
      const double g_uhat = t * g[i] + gdt * p.w[i];
      du[i] += g_uhat + su * p.w[i];
      dw[i] += g_a * z[i] + gdt * u[i] + cw * g_uhat + su * p.u_raw[i] + sw * p.w[i];
    }
  }
  dp[static_cast<std::size_t>(2 * d)] += g_a;
  g += g_a * p.w;
}

void radial_backward(const RadialLayer& p, const LayerDerived& dv, const Vec& z, Vec& g, double gl,
                     std::span<double> dp) {
  const Eigen::Index d = p.dim();
  const RadialTerms t = radial_terms(p, dv, z);
  double g_diff_dot = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) g_diff_dot += g[i] * (z[i] - p.z0[i]);
  const double dm1 = static_cast<double>(d - 1);

  const double g_h =
      t.beta_hat * g_diff_dot + gl * (dm1 * t.beta_hat / t.first + 2.0 * t.beta_hat * t.alpha * t.h / t.second);
  const double g_beta = t.h * g_diff_dot + gl * (dm1 * t.h / t.first + t.alpha * t.h * t.h / t.second);
  const double g_r = -t.h * t.h * g_h;
  const double g_alpha = gl * t.beta_hat * t.h * t.h / t.second - t.h * t.h * g_h - g_beta;

  const double scale = 1.0 + t.beta_hat * t.h;
  const double radial = t.r > 0.0 ? g_r / t.r : 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double g_z = scale * g[i] + radial * (z[i] - p.z0[i]);
    dp[static_cast<std::size_t>(i)] += g[i] - g_z;
    g[i] = g_z;
  }
  dp[static_cast<std::size_t>(d)] += t.alpha * g_alpha;
  dp[static_cast<std::size_t>(d + 1)] += g_beta * dv.sig_beta;
}

Vec nice_backward(const NiceLayer& p, const MlpTape& tape, const Vec& g, std::span<double> dp) {
  const auto a = p.part_a();
  const auto b = p.part_b();
  Vec g_y = g;
  const Vec g_shift = gather(g, b);
  const Vec g_in = mlp_backward_accumulate(p.coupling, tape, g_shift, dp);
  for (std::size_t i = 0; i < a.size(); ++i) g_y[a[i]] += g_in[static_cast<Eigen::Index>(i)];
  return unapply_mixer(p.mixer, g_y);
}

}  // namespace

Vec flow_backward_accumulate(const FlowStack& stack, const FlowTape& tape, const Vec& dl_dz_out,
                             double dl_dlogdet, std::span<double> dparams) {
  if (tape.stack_fingerprint != stack.fingerprint() || tape.inputs.size() != stack.size())
    throw StaleTapeError("flow_backward: tape does not match the flow stack");
  check_dim(stack.dim(), dl_dz_out.size(), "flow_backward");
  if (dparams.size() != stack.param_count()) throw DomainError("flow_backward: gradient buffer size");

  Vec g = dl_dz_out;
  std::size_t end = dparams.size();
  for (std::size_t i = stack.size(); i-- > 0;) {
    const auto& layer = stack.layer(i);
    const std::size_t n = layer_param_count(layer);
    end -= n;
    auto dp = dparams.subspan(end, n);
    const Vec& z = tape.inputs[i];
    const LayerDerived& dv = stack.derived(i);
    std::visit(Overloaded{
                   [&](const PlanarLayer& p) { planar_backward(p, dv, z, g, dl_dlogdet, dp); },
                   [&](const RadialLayer& p) { radial_backward(p, dv, z, g, dl_dlogdet, dp); },
                   [&](const NiceLayer& p) { g = nice_backward(p, tape.nets[i], g, dp); },
               },
               layer);
  }
  return g;
}

FlowGradient flow_backward(const FlowStack& stack, const FlowTape& tape, const Vec& dl_dz_out,
                           double dl_dlogdet) {
  FlowGradient out;
  out.dparams = Vec::Zero(static_cast<Eigen::Index>(stack.param_count()));
  out.dz0 = flow_backward_accumulate(stack, tape, dl_dz_out, dl_dlogdet,
                                     {out.dparams.data(), static_cast<std::size_t>(out.dparams.size())});
  return out;
}

Vec flow_inverse(const FlowStack& stack, const Vec& z_out, double tol) {
  check_dim(stack.dim(), z_out.size(), "flow_inverse");
  Vec z = z_out;
  for (std::size_t i = stack.size(); i-- > 0;) {
    z = std::visit(Overloaded{
                       [&](const PlanarLayer& p) { return planar_invert(p, z, tol); },
                       [&](const RadialLayer& p) { return radial_invert(p, z, tol); },
                       [&](const NiceLayer& p) { return nice_inverse(p, z); },
                   },
                   stack.layer(i));
  }
  return z;
}

}  // namespace flowvi
