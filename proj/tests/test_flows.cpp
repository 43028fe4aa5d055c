#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "flowvi/flows.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace flowvi;
using namespace flowvi::testing;

namespace {

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

FlowStack single(FlowLayer layer) {
  FlowStack s;
  s.push_back(std::move(layer));
  return s;
}

// ln q_K on a grid via the inverse chain, for q0 = N(0, I).
double log_qk_via_inverse(const FlowStack& stack, const Vec& z) {
  const Vec z0 = flow_inverse(stack, z);
  const FlowResult fr = flow_forward(stack, z0);
  return -0.5 * z0.squaredNorm() - kLn2Pi - fr.sum_logdet;
}

}  // namespace

// ---------------------------------------------------------------------------
// planar

TEST_CASE("planar_constrain") {
  const Vec u = planar_constrain(v2(0, 1), v2(1, 0));
  CHECK(u[0] == doctest::Approx(std::log(2.0) - 1.0).epsilon(1e-14));
  CHECK(u[0] == doctest::Approx(-0.30685).epsilon(1e-5));
  CHECK(u[1] == 1.0);

  // m(10) = -1 + log(1 + e^10), evaluated directly.
  const Vec big = planar_constrain(v2(10, 0), v2(1, 0));
  CHECK(big[0] == doctest::Approx(-1.0 + std::log(1.0 + std::exp(10.0))).epsilon(1e-14));
  CHECK(big[0] == doctest::Approx(9.0000454).epsilon(1e-7));

  CHECK_THROWS_AS(planar_constrain(v2(1, 1), v2(0, 0)), DomainError);

  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const Vec w = randn(rng, 3, 2.0), u = randn(rng, 3, 3.0);
    // -1 + softplus(x) rounds to -1 once softplus(x) < 2^-53.
    CHECK(w.dot(planar_constrain(u, w)) >= -1.0 - 1e-12 * w.norm() * u.norm());
    if (w.dot(u) > -30.0) CHECK(w.dot(planar_constrain(u, w)) > -1.0);
  }
}

TEST_CASE("planar_forward closed-form cases") {
  SUBCASE("zero u is the identity") {
    Rng rng(1);
    // With w != 0 the constraint shifts a zero u_raw, so w is zeroed too.
    const PlanarLayer p{Vec::Zero(3), Vec::Zero(3), 0.3};
    const Vec z = randn(rng, 3);
    const FlowResult r = planar_forward(p, z);
    CHECK(r.z_out == z);
    CHECK(r.sum_logdet == 0.0);
  }
  SUBCASE("logdet 0.405465 when the effective u is (0.5, 0)") {
    // Solve m(x) = 0.5 for the raw parallel component: softplus(x) = 1.5.
    const double x = std::log(std::exp(1.5) - 1.0);
    PlanarLayer p{v2(x, 0), v2(1, 0), 0.0};
    CHECK(p.u_hat()[0] == doctest::Approx(0.5).epsilon(1e-14));
    const FlowResult r = planar_forward(p, v2(0, 0));
    CHECK(r.z_out.norm() == 0.0);
    CHECK(r.sum_logdet == doctest::Approx(std::log(1.5)).epsilon(1e-14));
    CHECK(r.sum_logdet == doctest::Approx(0.405465).epsilon(1e-6));
  }
}

TEST_CASE("planar logdet matches a finite-difference Jacobian") {
  Rng rng(21);
  for (int i = 0; i < 50; ++i) {
    const PlanarLayer p = random_planar(rng, 2);
    const Vec z = randn(rng, 2);
    const double analytic = planar_forward(p, z).sum_logdet;
    CHECK(relative_error(analytic, fd_logdet(single(p), z)) < 1e-6);
  }
}

TEST_CASE("planar_invert") {
  SUBCASE("zero u") {
    PlanarLayer p{Vec::Zero(2), Vec::Zero(2), 0.0};
    const Vec z = v2(0.3, -2.0);
    CHECK(planar_invert(p, z) == z);
  }
  SUBCASE("round trip") {
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
      const PlanarLayer p = random_planar(rng, 3, 1.5);
      const Vec z = randn(rng, 3, 2.0);
      const Vec zp = planar_forward(p, z).z_out;
      const Vec back = planar_invert(p, zp);
      CHECK((back - z).cwiseAbs().maxCoeff() < 1e-8);
      CHECK((planar_forward(p, back).z_out - zp).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
  SUBCASE("monotone scalar equation") {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
      const PlanarLayer p = random_planar(rng, 2, 2.0);
      const double wu = p.w.dot(p.u_hat());
      const double a = 10.0 * rng.normal();
      const double t = std::tanh(a + p.b);
      CHECK(1.0 + wu * (1.0 - t * t) >= 0.0);
    }
  }
}

// ---------------------------------------------------------------------------
// radial

TEST_CASE("radial_constrain") {
  for (double br : {-3.0, 0.0, 2.0}) {
    const auto c = radial_constrain(0.0, br);
    CHECK(c.alpha == 1.0);
    CHECK(c.beta_hat > -1.0);
    CHECK(c.beta_hat == doctest::Approx(-1.0 + softplus(br)));
  }
  const auto lim = radial_constrain(0.7, -60.0);
  CHECK(lim.beta_hat - (-lim.alpha) < 1e-20);
  CHECK(lim.beta_hat >= -lim.alpha);
  // softplus(ln(e - 1)) = 1
  const auto id = radial_constrain(0.0, std::log(std::exp(1.0) - 1.0));
  CHECK(std::abs(id.beta_hat) < 1e-15);
}

TEST_CASE("radial_forward") {
  const double beta_one = std::log(std::exp(2.0) - 1.0);  // beta_hat = -1 + 2 = 1
  SUBCASE("beta 0 is the identity") {
    RadialLayer p{v2(0.2, 0.1), 0.0, std::log(std::exp(1.0) - 1.0)};
    const FlowResult r = radial_forward(p, v2(1.0, -1.0));
    CHECK((r.z_out - v2(1.0, -1.0)).norm() < 1e-15);
    CHECK(std::abs(r.sum_logdet) < 1e-15);
  }
  SUBCASE("alpha 1, beta 1 at z = (1, 0)") {
    RadialLayer p{Vec::Zero(2), 0.0, beta_one};
    const FlowResult r = radial_forward(p, v2(1, 0));
    CHECK(r.z_out[0] == doctest::Approx(1.5).epsilon(1e-14));
    CHECK(r.z_out[1] == 0.0);
    CHECK(r.sum_logdet == doctest::Approx(std::log(1.875)).epsilon(1e-14));
    CHECK(relative_error(r.sum_logdet, fd_logdet(single(p), v2(1, 0))) < 1e-6);
  }
  SUBCASE("the reference point is fixed") {
    RadialLayer p{v2(0.5, -0.5), 0.3, 0.4};
    const auto c = radial_constrain(p.log_alpha, p.beta_raw);
    const FlowResult r = radial_forward(p, p.z0);
    CHECK(r.z_out == p.z0);
    CHECK(r.sum_logdet == doctest::Approx(2.0 * std::log(1.0 + c.beta_hat / c.alpha)).epsilon(1e-14));
  }
  SUBCASE("logdet matches finite differences in 2 and 3 dimensions") {
    Rng rng(31);
    for (Eigen::Index d : {2, 3}) {
      for (int i = 0; i < 40; ++i) {
        const RadialLayer p = random_radial(rng, d);
        const Vec z = randn(rng, d, 1.5);
        CHECK(relative_error(radial_forward(p, z).sum_logdet, fd_logdet(single(p), z)) < 1e-6);
      }
    }
  }
}

TEST_CASE("radial_invert") {
  SUBCASE("identity map") {
    RadialLayer p{v2(1, 1), 0.0, std::log(std::exp(1.0) - 1.0)};
    const Vec z = v2(-0.4, 3.0);
    CHECK((radial_invert(p, z) - z).norm() < 1e-9);
  }
  SUBCASE("reference point") {
    RadialLayer p{v2(1, 1), 0.0, 0.0};
    CHECK(radial_invert(p, p.z0) == p.z0);
  }
  SUBCASE("round trip") {
    Rng rng(12);
    for (int i = 0; i < 200; ++i) {
      const RadialLayer p = random_radial(rng, 2, 1.5);
      const Vec z = randn(rng, 2, 2.0);
      const Vec zp = radial_forward(p, z).z_out;
      CHECK((radial_invert(p, zp) - z).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
  SUBCASE("monotone radial equation") {
    Rng rng(13);
    for (int i = 0; i < 50; ++i) {
      const auto c = radial_constrain(rng.normal(), 2.0 * rng.normal());
      double prev = 0.0;
      for (int k = 0; k <= 100; ++k) {
        const double r = 0.1 * k;
        const double g = r * (1.0 + c.beta_hat / (c.alpha + r));
        CHECK(g >= prev - 1e-15);
        prev = g;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// NICE

TEST_CASE("nice coupling") {
  Rng rng(5);
  SUBCASE("zero coupling net leaves only the mixer") {
    NiceLayer p = random_nice(rng, 4, true);
    for (auto& l : p.coupling.layers) {
      l.weight.setZero();
      l.bias.setZero();
    }
    const Vec z = randn(rng, 4);
    const FlowResult r = nice_forward(p, z);
    CHECK((r.z_out - std::get<Mat>(p.mixer) * z).norm() < 1e-14);
    CHECK(r.sum_logdet == 0.0);
    CHECK((nice_inverse(p, z) - std::get<Mat>(p.mixer).transpose() * z).norm() < 1e-14);
  }
  SUBCASE("determinant is one and the inverse is exact") {
    for (bool orth : {false, true}) {
      for (int i = 0; i < 50; ++i) {
        const NiceLayer p = random_nice(rng, 4, orth);
        const Vec z = randn(rng, 4, 2.0);
        const FlowResult r = nice_forward(p, z);
        CHECK(r.sum_logdet == 0.0);
        CHECK((nice_inverse(p, r.z_out) - z).cwiseAbs().maxCoeff() <= 1e-10);
        CHECK((nice_forward(p, nice_inverse(p, z)).z_out - z).cwiseAbs().maxCoeff() <= 1e-10);
        CHECK(std::abs(fd_logdet(single(p), z)) < 1e-6);
      }
    }
  }
  SUBCASE("inverse-chain density equals the forward-chain density") {
    FlowStack s(4);
    for (int k = 0; k < 6; ++k) s.push_back(random_nice(rng, 4, k % 2 == 0));
    for (int i = 0; i < 50; ++i) {
      const Vec z0 = randn(rng, 4);
      const FlowResult fr = flow_forward(s, z0);
      const double forward_density = -0.5 * z0.squaredNorm() - 2.0 * kLn2Pi - fr.sum_logdet;
      const Vec back = flow_inverse(s, fr.z_out);
      const double inverse_density = -0.5 * back.squaredNorm() - 2.0 * kLn2Pi;
      CHECK(std::abs(forward_density - inverse_density) < 1e-8);
    }
  }
  SUBCASE("layer validation") {
    NiceLayer bad = random_nice(rng, 4, false);
    bad.mask.assign(4, true);
    FlowStack s(4);
    CHECK_THROWS_AS(s.push_back(bad), DomainError);
    NiceLayer skew = random_nice(rng, 4, true);
    std::get<Mat>(skew.mixer)(0, 0) += 1e-3;
    CHECK_THROWS_AS(s.push_back(skew), DomainError);
  }
}

// ---------------------------------------------------------------------------
// stacks

TEST_CASE("flow_forward composition") {
  Rng rng(14);
  SUBCASE("empty stack") {
    const FlowStack s(3);
    const Vec z = randn(rng, 3);
    const FlowResult r = flow_forward(s, z);
    CHECK(r.z_out == z);
    CHECK(r.sum_logdet == 0.0);
  }
  SUBCASE("two planar layers") {
    const PlanarLayer a = random_planar(rng, 2), b = random_planar(rng, 2);
    FlowStack s;
    s.push_back(a);
    s.push_back(b);
    const Vec z = randn(rng, 2);
    const FlowResult r1 = planar_forward(a, z);
    const FlowResult r2 = planar_forward(b, r1.z_out);
    const FlowResult r = flow_forward(s, z);
    CHECK(r.z_out == r2.z_out);
    CHECK(r.sum_logdet == r1.sum_logdet + r2.sum_logdet);
  }
  SUBCASE("logdet against assembled Jacobians, d in {2, 3}, K <= 4") {
    for (Eigen::Index d : {2, 3}) {
      for (std::size_t k = 0; k <= 4; ++k) {
        for (int i = 0; i < 10; ++i) {
          const FlowStack s = random_mixed_stack(rng, d, k, 0.8);
          const Vec z = randn(rng, d);
          CHECK(relative_error(flow_forward(s, z).sum_logdet, fd_logdet(s, z)) < 1e-6);
        }
      }
    }
  }
  SUBCASE("dimension mismatch") {
    const FlowStack s = random_mixed_stack(rng, 2, 3);
    CHECK_THROWS_AS(flow_forward(s, Vec::Zero(3)), DomainError);
  }
}

TEST_CASE("constrained layers keep positive determinant factors (property)") {
  Rng rng(77);
  for (int i = 0; i < 10000; ++i) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.next_u64() % 5);
    const PlanarLayer p = random_planar(rng, d, 3.0);
    const Vec u = p.u_hat();
    const Vec z = randn(rng, d, 3.0);
    const FlowResult fwd = planar_forward(p, z);
    REQUIRE(std::isfinite(fwd.sum_logdet));
    REQUIRE(p.w.dot(u) >= -1.0 - 1e-12 * p.w.norm() * p.u_raw.norm());

    const RadialLayer r = random_radial(rng, d, 3.0);
    const auto c = radial_constrain(r.log_alpha, r.beta_raw);
    const double h = 1.0 / (c.alpha + (z - r.z0).norm());
    REQUIRE(1.0 + c.beta_hat * h > 0.0);
    REQUIRE(1.0 + c.beta_hat * h - c.beta_hat * h * h * (z - r.z0).norm() > 0.0);
  }
}

TEST_CASE("random stacks integrate to one (change of variables)") {
  Rng rng(2024);
  const int n = 400;
  const double lo = -8.0, hi = 8.0, step = (hi - lo) / n;
  for (std::size_t k : {1u, 4u, 8u}) {
    const FlowStack s = random_mixed_stack(rng, 2, k, 0.8);
    double mass = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        mass += std::exp(log_qk_via_inverse(s, v2(lo + (i + 0.5) * step, lo + (j + 0.5) * step)));
    mass *= step * step;
    CHECK(std::abs(mass - 1.0) < 0.01);
  }
}

TEST_CASE("expectations under q_K by pushforward agree with quadrature") {
  Rng rng(99);
  const FlowStack s = random_mixed_stack(rng, 2, 4, 0.8);
  const int n = 400;
  const double lo = -8.0, hi = 8.0, step = (hi - lo) / n;
  Vec quad_mean = Vec::Zero(2);
  double quad_sq = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const Vec z = v2(lo + (i + 0.5) * step, lo + (j + 0.5) * step);
      const double q = std::exp(log_qk_via_inverse(s, z)) * step * step;
      quad_mean += q * z;
      quad_sq += q * z.squaredNorm();
    }

  const int m = 100000;
  Vec sum = Vec::Zero(2), sum2 = Vec::Zero(2);
  double s_sq = 0.0, s_sq2 = 0.0;
  for (int i = 0; i < m; ++i) {
    const Vec z = flow_forward(s, randn(rng, 2)).z_out;
    sum += z;
    sum2 += z.cwiseProduct(z);
    s_sq += z.squaredNorm();
    s_sq2 += z.squaredNorm() * z.squaredNorm();
  }
  const Vec mc_mean = sum / m;
  const Vec se = ((sum2 / m - mc_mean.cwiseProduct(mc_mean)) / m).cwiseSqrt();
  for (int c = 0; c < 2; ++c) CHECK(std::abs(mc_mean[c] - quad_mean[c]) < 3.0 * se[c] + 1e-4);
  const double mc_sq = s_sq / m;
  const double se_sq = std::sqrt((s_sq2 / m - mc_sq * mc_sq) / m);
  CHECK(std::abs(mc_sq - quad_sq) < 3.0 * se_sq + 1e-3);
}

// ---------------------------------------------------------------------------
// gradients

TEST_CASE("flow_backward") {
  Rng rng(55);
  SUBCASE("zero upstream gradient") {
    const FlowStack s = random_mixed_stack(rng, 3, 5);
    const FlowResult r = flow_forward(s, randn(rng, 3));
    const FlowGradient g = flow_backward(s, r.tape, Vec::Zero(3), 0.0);
    CHECK(g.dz0.norm() == 0.0);
    CHECK(g.dparams.norm() == 0.0);
  }
  SUBCASE("per layer type, 100 random instances each") {
    for (int type = 0; type < 4; ++type) {
      double worst = 0.0;
      for (int i = 0; i < 100; ++i) {
        const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng.next_u64() % 3);
        FlowStack s(d);
        if (type == 0) s.push_back(random_planar(rng, d));
        if (type == 1) s.push_back(random_radial(rng, d));
        if (type == 2) s.push_back(random_nice(rng, d, false));
        if (type == 3) s.push_back(random_nice(rng, d, true));
        const Vec z0 = randn(rng, d);
        const Vec a = randn(rng, d);
        const double c = rng.normal();
        const FlowResult r = flow_forward(s, z0);
        const FlowGradient g = flow_backward(s, r.tape, a, c);
        const Vec params = s.flat();
        const Vec fd_p = fd_gradient([&](const Vec& p) { return stack_loss(s, p, z0, a, c); }, params);
        const Vec fd_z = fd_gradient([&](const Vec& z) { return stack_loss(s, params, z, a, c); }, z0);
        worst = std::max({worst, max_relative_error(g.dparams, fd_p), max_relative_error(g.dz0, fd_z)});
      }
      CAPTURE(type);
      CHECK(worst <= 1e-5);
    }
  }
  SUBCASE("K = 8 mixed stack, d = 2") {
    for (int i = 0; i < 20; ++i) {
      const FlowStack s = random_mixed_stack(rng, 2, 8, 0.8);
      const Vec z0 = randn(rng, 2), a = randn(rng, 2);
      const double c = rng.normal();
      const FlowResult r = flow_forward(s, z0);
      const FlowGradient g = flow_backward(s, r.tape, a, c);
      const Vec params = s.flat();
      const Vec fd_p = fd_gradient([&](const Vec& p) { return stack_loss(s, p, z0, a, c); }, params);
      CHECK(max_relative_error(g.dparams, fd_p) <= 1e-5);
    }
  }
  SUBCASE("w = 0 planar layer bypasses the constraint in the gradient too") {
    PlanarLayer p{v2(0.4, -0.2), Vec::Zero(2), 0.3};
    FlowStack s = single(p);
    const Vec z0 = v2(0.1, 0.2), a = v2(1.0, -1.0);
    const FlowResult r = flow_forward(s, z0);
    const FlowGradient g = flow_backward(s, r.tape, a, 0.7);
    CHECK(std::abs(g.dparams[4] - (1.0 - std::tanh(0.3) * std::tanh(0.3)) * a.dot(p.u_raw)) < 1e-12);
    CHECK(std::abs(g.dparams[0] - std::tanh(0.3) * a[0]) < 1e-12);
  }
  SUBCASE("stale tape") {
    FlowStack s = random_mixed_stack(rng, 2, 3);
    const FlowResult r = flow_forward(s, randn(rng, 2));
    Vec p = s.flat();
    p[0] += 0.1;
    s.unpack({p.data(), static_cast<std::size_t>(p.size())});
    CHECK_THROWS_AS(flow_backward(s, r.tape, Vec::Ones(2), 1.0), StaleTapeError);
  }
}

TEST_CASE("flattening order and family helpers") {
  PlanarLayer p{v2(1, 2), v2(3, 4), 5};
  RadialLayer r{v2(6, 7), 8, 9};
  FlowStack s;
  s.push_back(p);
  s.push_back(r);
  const Vec flat = s.flat();
  REQUIRE(flat.size() == 9);
  for (int i = 0; i < 9; ++i) CHECK(flat[i] == i + 1);
  CHECK(per_layer_param_count(FlowFamily::kPlanar, 2) == 5);
  CHECK(per_layer_param_count(FlowFamily::kRadial, 2) == 4);
  for (auto f : {FlowFamily::kPlanar, FlowFamily::kRadial, FlowFamily::kNicePerm, FlowFamily::kNiceOrth})
    CHECK(parse_flow_family(to_string(f)) == f);
  CHECK_THROWS_AS(parse_flow_family("hamiltonian"), InputError);

  Rng rng(3);
  const FlowStack nice = make_flow_stack(FlowFamily::kNicePerm, 2, 4, rng);
  CHECK(nice.size() == 4);
  CHECK(flow_forward(nice, v2(0.5, 0.5)).sum_logdet == 0.0);
}
