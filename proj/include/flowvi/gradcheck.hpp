#pragma once

// Finite-difference audit of every hand-written backward pass: flow layers
// (input and parameter gradients), the invertibility reparameterizations,
// MLPs, energies, likelihoods and the frozen-noise free energy in each
// problem mode.

#include "flowvi/core_math.hpp"

#include <string>
#include <vector>

namespace flowvi {

struct GradcheckConfig {
  std::uint64_t seed = 0;
  std::size_t instances = 100;
  double tolerance = 1e-5;
  /// Test hook: perturbs the analytic gradient of the named family so the
  /// suite must fail.
  std::string corrupt_family;
};

struct GradcheckFamily {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  std::size_t worst_instance = 0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckFamily> families;
  double tolerance = 0.0;
  bool pass = true;
};

/// Family names in report order.
std::vector<std::string> gradcheck_family_names();

GradcheckReport run_gradcheck(const GradcheckConfig& cfg);

}  // namespace flowvi
