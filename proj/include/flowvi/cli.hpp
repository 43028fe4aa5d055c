#pragma once

// Experiment drivers behind the flowvi command line: 2D energy fits, VAE
// training on binary-matrix datasets, the gradient audit and the synthetic
// data generator, plus the on-disk formats they share.

#include "flowvi/gradcheck.hpp"
#include "flowvi/vi_engine.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace flowvi {

/// Process exit codes.
constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitNumericHalt = 2;
constexpr int kExitInputError = 3;

// ---------------------------------------------------------------------------
// Configurations

struct Fit2dConfig {
  int energy = 1;
  FlowFamily flow = FlowFamily::kPlanar;
  std::size_t k = 2;
  TrainConfig train = default_train();
  /// Trapezoid nodes per axis for the normalizer.
  int grid_n = 400;
  /// Nodes per axis of the written density grids; 0 uses grid_n.
  int density_n = 0;
  std::size_t kl_samples = 10000;
  double init_scale = 0.01;
  std::string out_dir;

  static TrainConfig default_train();
  void validate() const;
};

struct VaeConfig {
  std::string data;
  int latent_dim = 2;
  FlowFamily flow = FlowFamily::kPlanar;
  std::size_t k = 0;
  Likelihood likelihood = Likelihood::kBernoulli;
  int hidden = 32;
  int maxout_window = 4;
  TrainConfig train = default_train();
  std::size_t is_samples = 200;
  double init_scale = 0.01;
  std::string out_dir;

  static TrainConfig default_train();
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base);
nlohmann::json to_json(const Fit2dConfig& c);
Fit2dConfig fit2d_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VaeConfig& c);
VaeConfig vae_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Files

/// Binary matrix: one JSON header line {"n", "d", "dtype": "u8" | "f64"}
/// followed by n * d little-endian values, row-major.
Dataset read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const Dataset& data, const std::string& dtype);

/// n x d binary rows. For square d the rows are noisy bar images on a
/// sqrt(d) x sqrt(d) grid; otherwise noisy copies of random prototypes.
Dataset synth_dataset(std::size_t n, std::size_t d, std::uint64_t seed);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
nlohmann::json checkpoint_json(const nlohmann::json& config, const Problem& problem, const TrainState& state);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

struct DensityGrid {
  double lo = kEnergyLo;
  double hi = kEnergyHi;
  int n = 0;
  std::vector<double> values;  // row-major, index i * n + j at (z1_i, z2_j)

  double node(int i) const { return lo + (hi - lo) * i / (n - 1); }
};

/// ln q_K on the grid for a free 2D posterior, through the inverse flow.
DensityGrid approx_log_density(const Problem& problem, const Vec& params, int n);
/// -U on the grid.
DensityGrid neg_energy_grid(EnergyFunction e, int n);
void write_density_csv(const std::filesystem::path& path, const DensityGrid& grid, const std::string& column);

// ---------------------------------------------------------------------------
// Runs

struct Fit2dOutcome {
  TrainResult train;
  KlEstimate kl;
  int exit_code = kExitOk;
};

/// Writes config.json, metrics.csv, checkpoint.json and, unless training
/// halted, approx_density.csv, true_density.csv and kl.json into out_dir.
Fit2dOutcome run_fit2d(const Fit2dConfig& cfg);

struct VaeOutcome {
  TrainResult train;
  double final_bound = 0.0;  // mean free energy per datapoint
  double is_loglik = 0.0;    // mean importance-sampled ln p(x)
  int exit_code = kExitOk;
};

/// Writes config.json, metrics.csv, checkpoint.json and eval.json.
VaeOutcome run_vae(const VaeConfig& cfg);

/// Writes gradcheck.json; exit code 0 iff every family passes.
int run_gradcheck_to(const GradcheckConfig& cfg, const std::filesystem::path& out_dir,
                     GradcheckReport* report = nullptr);

/// Full command line, argv[0] included. Returns the process exit code.
int cli_main(int argc, const char* const* argv);

}  // namespace flowvi
