#pragma once

// Numeric substrate shared by every flowvi module: dense vectors and
// matrices, a reproducible random stream, Gaussian sampling, stable scalar
// helpers and finite-difference oracles.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowvi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A computation produced a non-finite or singular value.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, long sample_index = -1)
      : Error(what), sample_index_(sample_index) {}
  long sample_index() const { return sample_index_; }

 private:
  long sample_index_;
};

/// A backward pass was handed a tape that does not belong to the parameters.
class StaleTapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed user input (files, configuration).
class InputError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Random numbers

/// xoshiro256** seeded through splitmix64. Standard normals come from
/// Box-Muller on this stream, so a seed fixes the output on every platform.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "xoshiro256starstar";

  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();

  /// Independent sub-stream keyed by `stream_id`; does not advance *this.
  Rng split(std::uint64_t stream_id) const;

  std::uint64_t seed() const { return seed_; }
  const std::array<std::uint64_t, 4>& state() const { return s_; }
  /// Restores a stream captured with state(). Any cached Box-Muller value is
  /// carried separately by the caller if needed.
  void set_state(const std::array<std::uint64_t, 4>& s, bool has_spare, double spare);
  bool has_spare() const { return has_spare_; }
  double spare() const { return spare_; }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// d independent N(0, 1) draws. Throws DomainError when d == 0.
Vec sample_std_normal(Rng& rng, std::size_t d);

// ---------------------------------------------------------------------------
// Scalar helpers

/// log(1 + e^x) without overflow.
double softplus(double x);
double sigmoid(double x);
/// log(x / (1 - x)); throws DomainError unless 0 < x < 1.
double logit(double x);
double log_sum_exp(double a, double b);

constexpr double kLn2Pi = 1.8378770664093454835606594728112;

// ---------------------------------------------------------------------------
// Finite differences

using ScalarFn = std::function<double(const Vec&)>;

constexpr double kFdStep = 1e-5;

/// Central-difference gradient. Throws NumericError if f is non-finite at any
/// probe point.
Vec fd_gradient(const ScalarFn& f, const Vec& x, double h = kFdStep);

/// Central-difference Jacobian of a vector map (rows: outputs).
Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h = kFdStep);

/// |a - b| / max(1, |a|, |b|)
double relative_error(double a, double b);
/// Largest coordinate-wise relative_error; vectors must be the same length.
double max_relative_error(const Vec& a, const Vec& b);

// ---------------------------------------------------------------------------
// Linear algebra used by the flows

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// columns of Q sign-corrected so that R has a positive diagonal.
Mat random_orthogonal(Rng& rng, std::size_t d);

/// Uniform random permutation of 0..d-1 (Fisher-Yates).
std::vector<int> random_permutation(Rng& rng, std::size_t d);

/// Determinant via LU; only used as a test oracle for small matrices.
double determinant(const Mat& m);

/// Bitwise checksum of a parameter vector, used to detect stale tapes.
/// Chain several buffers by passing the previous result as `seed`.
constexpr std::uint64_t kFingerprintSeed = 0xcbf29ce484222325ULL;
std::uint64_t fingerprint(const double* data, std::size_t n,
                          std::uint64_t seed = kFingerprintSeed);
inline std::uint64_t fingerprint(const Vec& v, std::uint64_t seed = kFingerprintSeed) {
  return fingerprint(v.data(), static_cast<std::size_t>(v.size()), seed);
}

}  // namespace flowvi
