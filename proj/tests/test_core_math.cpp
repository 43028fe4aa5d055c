#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "flowvi/core_math.hpp"

#include <cmath>

using namespace flowvi;

TEST_CASE("sample_std_normal is reproducible per seed") {
  Rng a(42);
  const Vec first = sample_std_normal(a, 2);
  const Vec second = sample_std_normal(a, 2);
  CHECK((first - second).norm() > 0.0);

  Rng b(42);
  CHECK(sample_std_normal(b, 2) == first);
  CHECK(sample_std_normal(b, 2) == second);
}

TEST_CASE("sample_std_normal moments at 1e5 draws") {
  Rng rng(7);
  const int n = 100000;
  Vec sum = Vec::Zero(3), sum2 = Vec::Zero(3);
  for (int i = 0; i < n; ++i) {
    const Vec v = sample_std_normal(rng, 3);
    sum += v;
    sum2 += v.cwiseProduct(v);
  }
  const Vec mean = sum / n;
  const Vec var = sum2 / n - mean.cwiseProduct(mean);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(mean[i]) < 0.02);
    CHECK(std::abs(var[i] - 1.0) < 0.02);
  }
}

TEST_CASE("sample_std_normal rejects zero dimension") {
  Rng rng(1);
  CHECK_THROWS_AS(sample_std_normal(rng, 0), DomainError);
}

TEST_CASE("split streams are independent of the parent's future draws") {
  Rng parent(9);
  Rng c1 = parent.split(1);
  Rng c2 = parent.split(2);
  CHECK(c1.next_u64() != c2.next_u64());
  Rng again = Rng(9).split(1);
  Rng c1b = parent.split(1);
  CHECK(again.next_u64() == c1b.next_u64());
}

TEST_CASE("softplus") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(softplus(1000.0) == 1000.0);
  const double tiny = softplus(-1000.0);
  CHECK(tiny >= 0.0);
  CHECK(tiny < 1e-300);
  CHECK(softplus(-30.0) > 0.0);
  // continuity across the overflow branch
  CHECK(softplus(30.0) == doctest::Approx(softplus(30.0 + 1e-12)).epsilon(1e-13));
  for (double x : {-20.0, -3.0, 0.5, 10.0, 40.0, 200.0}) {
    CHECK(softplus(x) > 0.0);
    CHECK(softplus(x) - x >= 0.0);
  }
  CHECK(softplus(60.0) - 60.0 < 1e-25);
}

TEST_CASE("logit and sigmoid") {
  CHECK(logit(0.5) == 0.0);
  for (double t : {-5.0, 0.0, 3.0}) CHECK(std::abs(logit(sigmoid(t)) - t) < 1e-12);
  CHECK_THROWS_AS(logit(0.0), DomainError);
  CHECK_THROWS_AS(logit(1.0), DomainError);
  CHECK_THROWS_AS(logit(-0.2), DomainError);
}

TEST_CASE("fd_gradient") {
  SUBCASE("half squared norm") {
    Vec x(2);
    x << 1.0, 2.0;
    const Vec g = fd_gradient([](const Vec& v) { return 0.5 * v.squaredNorm(); }, x, 1e-5);
    CHECK(std::abs(g[0] - 1.0) < 1e-8);
    CHECK(std::abs(g[1] - 2.0) < 1e-8);
  }
  SUBCASE("constant") {
    const Vec g = fd_gradient([](const Vec&) { return 3.5; }, Vec::Ones(4));
    CHECK(g.norm() == 0.0);
  }
  SUBCASE("sine against its closed-form derivative") {
    Vec x(3);
    x << 0.3, -1.0, 2.0;
    const Vec g = fd_gradient([](const Vec& v) { return std::sin(v[0]); }, x);
    CHECK(std::abs(g[0] - std::cos(0.3)) < 1e-8);
    CHECK(std::abs(g[1]) < 1e-12);
  }
  SUBCASE("quadratic forms are exact up to rounding") {
    Rng rng(3);
    const Mat a = Mat::NullaryExpr(4, 4, [&] { return rng.normal(); });
    const Vec x = sample_std_normal(rng, 4);
    const Vec g = fd_gradient([&](const Vec& v) { return v.dot(a * v) + 2.0 * v.sum(); }, x);
    const Vec exact = (a + a.transpose()) * x + Vec::Constant(4, 2.0);
    CHECK(max_relative_error(g, exact) < 1e-9);
  }
  SUBCASE("non-finite evaluation") {
    CHECK_THROWS_AS(fd_gradient([](const Vec& v) { return std::log(v[0]); }, Vec::Zero(1)),
                    NumericError);
  }
}

TEST_CASE("random_orthogonal") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    const Mat q = random_orthogonal(rng, 4);
    CHECK((q.transpose() * q - Mat::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(std::abs(std::abs(determinant(q)) - 1.0) <= 1e-10);
    for (int j = 0; j < 4; ++j) CHECK(std::abs(q.col(j).norm() - 1.0) <= 1e-12);
  }
  Rng rng(11);
  for (std::size_t d : {1u, 8u, 33u, 64u}) {
    const Mat q = random_orthogonal(rng, d);
    const auto n = static_cast<Eigen::Index>(d);
    CHECK((q.transpose() * q - Mat::Identity(n, n)).cwiseAbs().maxCoeff() <= 1e-12);
  }
  CHECK_THROWS_AS(random_orthogonal(rng, 0), DomainError);
}

TEST_CASE("random_orthogonal is Haar: sign pattern of the first entry is balanced") {
  Rng rng(5);
  int positive = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) positive += random_orthogonal(rng, 3)(0, 0) > 0.0;
  // Binomial(4000, 1/2): 5 standard deviations is ~158.
  CHECK(std::abs(positive - n / 2) < 160);
}

TEST_CASE("random_permutation covers every index once") {
  Rng rng(2);
  auto p = random_permutation(rng, 10);
  std::sort(p.begin(), p.end());
  for (int i = 0; i < 10; ++i) CHECK(p[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("relative_error uses max(1, |a|, |b|)") {
  CHECK(relative_error(1e-3, 2e-3) == doctest::Approx(1e-3));
  CHECK(relative_error(1000.0, 1001.0) == doctest::Approx(1.0 / 1001.0));
}
