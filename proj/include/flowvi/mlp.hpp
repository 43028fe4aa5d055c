#pragma once

// Fully connected networks with maxout or tanh hidden units and a linear
// output layer, plus their reverse-mode gradients.

#include "flowvi/core_math.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace flowvi {

enum class Activation { kMaxout, kTanh };

struct DenseLayer {
  Mat weight;  // out x in
  Vec bias;    // out
};

/// Parameters of a feed-forward network. `widths` in create() lists the
/// input dimension, each hidden layer's unit count (after maxout pooling)
/// and the output dimension. A maxout hidden layer with `u` units has `u *
/// window` pre-activations.
struct MlpParams {
  std::vector<DenseLayer> layers;
  Activation hidden = Activation::kTanh;
  int maxout_window = 4;

  static MlpParams create(const std::vector<int>& widths, Activation hidden, int maxout_window = 4);

  int input_dim() const;
  int output_dim() const;
  std::size_t param_count() const;

  /// Weights (row-major) then bias, layer by layer.
  void pack(std::span<double> out) const;
  void unpack(std::span<const double> in);
  Vec flat() const;

  /// Weights ~ N(0, scale^2 * 2 / fan_in), biases zero.
  void init_random(Rng& rng, double scale);

  std::uint64_t fingerprint() const;
};

/// Window-wise maximum over consecutive blocks of `window` entries. Ties go to
/// the lowest index. `argmax` (optional) receives the selected positions.
Vec maxout(const Vec& x, int window, std::vector<int>* argmax = nullptr);

struct MlpTape {
  std::uint64_t params_fingerprint = 0;
  std::vector<Vec> inputs;                 // input to each layer
  std::vector<Vec> activations;            // tanh outputs per hidden layer
  std::vector<std::vector<int>> argmax;    // maxout selections per hidden layer
};

struct MlpOutput {
  Vec y;
  MlpTape tape;
};

MlpOutput mlp_forward(const MlpParams& p, const Vec& x);

/// Adds the parameter gradient into `dparams` (length param_count()) and
/// returns dL/dx. Throws StaleTapeError when the tape came from other
/// parameters.
Vec mlp_backward_accumulate(const MlpParams& p, const MlpTape& tape, const Vec& dl_dy,
                            std::span<double> dparams);

struct MlpGradient {
  Vec dx;
  Vec dparams;
};

MlpGradient mlp_backward(const MlpParams& p, const MlpTape& tape, const Vec& dl_dy);

/// Smallest gap between the winning and runner-up pre-activation over every
/// maxout window of the recorded pass; +inf for tanh networks. Finite
/// differences are only meaningful when the step stays below this margin.
double maxout_margin(const MlpParams& p, const MlpTape& tape);

}  // namespace flowvi
