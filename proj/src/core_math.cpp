#include "flowvi/core_math.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

namespace flowvi {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& word : s_) word = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = std::rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = std::rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  // 53 random mantissa bits, shifted by half an ulp so 0 is never returned.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Rng Rng::split(std::uint64_t stream_id) const {
  std::uint64_t x = s_[0] ^ std::rotl(s_[2], 23);
  std::uint64_t mixed = splitmix64(x) ^ (stream_id * 0xd1342543de82ef95ULL);
  Rng child(splitmix64(mixed));
  child.seed_ = seed_;
  return child;
}

void Rng::set_state(const std::array<std::uint64_t, 4>& s, bool has_spare, double spare) {
  s_ = s;
  has_spare_ = has_spare;
  spare_ = spare;
}

Vec sample_std_normal(Rng& rng, std::size_t d) {
  if (d == 0) throw DomainError("sample_std_normal: dimension must be at least 1");
  Vec out(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = rng.normal();
  return out;
}

double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double x) {
  if (!(x > 0.0 && x < 1.0)) throw DomainError("logit: argument must lie in (0, 1)");
  return std::log(x) - std::log1p(-x);
}

double log_sum_exp(double a, double b) {
  const double hi = std::max(a, b);
  if (hi == -INFINITY) return -INFINITY;
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

Vec fd_gradient(const ScalarFn& f, const Vec& x, double h) {
  Vec grad(x.size());
  Vec probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("fd_gradient: non-finite function value at coordinate " +
                         std::to_string(i));
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h) {
  const Vec f0 = f(x);
  Mat jac(f0.size(), x.size());
  Vec probe = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    probe[j] = x[j] + h;
    const Vec up = f(probe);
    probe[j] = x[j] - h;
    const Vec down = f(probe);
    probe[j] = x[j];
    jac.col(j) = (up - down) / (2.0 * h);
  }
  if (!jac.allFinite()) throw NumericError("fd_jacobian: non-finite function value");
  return jac;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double max_relative_error(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw DomainError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i]));
  return worst;
}

Mat random_orthogonal(Rng& rng, std::size_t d) {
  if (d == 0) throw DomainError("random_orthogonal: dimension must be at least 1");
  const auto n = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

std::vector<int> random_permutation(Rng& rng, std::size_t d) {
  std::vector<int> perm(d);
  for (std::size_t i = 0; i < d; ++i) perm[i] = static_cast<int>(i);
  for (std::size_t i = d; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

double determinant(const Mat& m) {
  return Eigen::MatrixXd(m).partialPivLu().determinant();
}

std::uint64_t fingerprint(const double* data, std::size_t n, std::uint64_t seed) {
  std::uint64_t h = seed ^ n;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, data + i, sizeof bits);
    h = (h ^ bits) * 0x100000001b3ULL;
    h ^= h >> 29;
  }
  return h;
}

}  // namespace flowvi
