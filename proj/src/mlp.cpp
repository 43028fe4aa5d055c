#include "flowvi/mlp.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace flowvi {

MlpParams MlpParams::create(const std::vector<int>& widths, Activation hidden,
                            int maxout_window) {
  if (widths.size() < 2) throw DomainError("MlpParams: need at least input and output widths");
  if (maxout_window < 1) throw DomainError("MlpParams: maxout window must be positive");
  for (int w : widths)
    if (w < 1) throw DomainError("MlpParams: layer widths must be positive");
  MlpParams p;
  p.hidden = hidden;
  p.maxout_window = maxout_window;
  int fan_in = widths.front();
  for (std::size_t i = 1; i < widths.size(); ++i) {
    const bool is_output = i + 1 == widths.size();
    const int rows =
        (!is_output && hidden == Activation::kMaxout) ? widths[i] * maxout_window : widths[i];
    p.layers.push_back({Mat::Zero(rows, fan_in), Vec::Zero(rows)});
    fan_in = widths[i];
  }
  return p;
}

int MlpParams::input_dim() const { return static_cast<int>(layers.front().weight.cols()); }

int MlpParams::output_dim() const { return static_cast<int>(layers.back().weight.rows()); }

std::size_t MlpParams::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

void MlpParams::pack(std::span<double> out) const {
  if (out.size() != param_count()) throw DomainError("MlpParams::pack: size mismatch");
  std::size_t k = 0;
  for (const auto& l : layers) {
    std::copy(l.weight.data(), l.weight.data() + l.weight.size(), out.begin() + k);
    k += static_cast<std::size_t>(l.weight.size());
    std::copy(l.bias.data(), l.bias.data() + l.bias.size(), out.begin() + k);
    k += static_cast<std::size_t>(l.bias.size());
  }
}

void MlpParams::unpack(std::span<const double> in) {
  if (in.size() != param_count()) throw DomainError("MlpParams::unpack: size mismatch");
  std::size_t k = 0;
  for (auto& l : layers) {
    std::copy(in.begin() + k, in.begin() + k + l.weight.size(), l.weight.data());
    k += static_cast<std::size_t>(l.weight.size());
    std::copy(in.begin() + k, in.begin() + k + l.bias.size(), l.bias.data());
    k += static_cast<std::size_t>(l.bias.size());
  }
}

Vec MlpParams::flat() const {
  Vec v(static_cast<Eigen::Index>(param_count()));
  pack({v.data(), static_cast<std::size_t>(v.size())});
  return v;
}

void MlpParams::init_random(Rng& rng, double scale) {
  for (auto& l : layers) {
    const double sd = scale * std::sqrt(2.0 / static_cast<double>(l.weight.cols()));
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = sd * rng.normal();
    l.bias.setZero();
  }
}

std::uint64_t MlpParams::fingerprint() const {
  std::uint64_t h = kFingerprintSeed;
  for (const auto& l : layers) {
    h = flowvi::fingerprint(l.weight.data(), static_cast<std::size_t>(l.weight.size()), h);
    h = flowvi::fingerprint(l.bias, h);
  }
  return h;
}

Vec maxout(const Vec& x, int window, std::vector<int>* argmax) {
  if (window < 1 || x.size() % window != 0)
    throw DomainError("maxout: input width must be a multiple of the window");
  const Eigen::Index units = x.size() / window;
  Vec out(units);
  if (argmax) argmax->assign(static_cast<std::size_t>(units), 0);
  for (Eigen::Index k = 0; k < units; ++k) {
    Eigen::Index best = k * window;
    for (Eigen::Index i = best + 1; i < (k + 1) * window; ++i)
      if (x[i] > x[best]) best = i;
    out[k] = x[best];
    if (argmax) (*argmax)[static_cast<std::size_t>(k)] = static_cast<int>(best);
  }
  return out;
}

MlpOutput mlp_forward(const MlpParams& p, const Vec& x) {
  if (x.size() != p.input_dim())
    throw DomainError("mlp_forward: input has dimension " + std::to_string(x.size()) +
                      ", network expects " + std::to_string(p.input_dim()));
  MlpOutput out;
  out.tape.params_fingerprint = p.fingerprint();
  Vec h = x;
  const std::size_t n = p.layers.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = p.layers[i];
    out.tape.inputs.push_back(h);
    Vec a = l.weight * h + l.bias;
    if (i + 1 == n) {
      h = std::move(a);
    } else if (p.hidden == Activation::kMaxout) {
      std::vector<int> idx;
      h = maxout(a, p.maxout_window, &idx);
      out.tape.argmax.push_back(std::move(idx));
    } else {
      h = a.array().tanh().matrix();
      out.tape.activations.push_back(h);
    }
  }
  out.y = std::move(h);
  return out;
}

Vec mlp_backward_accumulate(const MlpParams& p, const MlpTape& tape, const Vec& dl_dy,
                            std::span<double> dparams) {
  if (tape.params_fingerprint != p.fingerprint() || tape.inputs.size() != p.layers.size())
    throw StaleTapeError("mlp_backward: tape does not match the network parameters");
  if (dl_dy.size() != p.output_dim()) throw DomainError("mlp_backward: gradient dimension mismatch");
  if (dparams.size() != p.param_count()) throw DomainError("mlp_backward: gradient buffer size");

  // Offsets of each layer's block in the flat parameter vector.
  std::vector<std::size_t> offset(p.layers.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    offset[i] = k;
    k += static_cast<std::size_t>(p.layers[i].weight.size() + p.layers[i].bias.size());
  }

  Vec g = dl_dy;
  for (std::size_t ii = p.layers.size(); ii-- > 0;) {
    const auto& l = p.layers[ii];
    const bool is_output = ii + 1 == p.layers.size();
    Vec da;
    if (is_output) {
      da = g;
    } else if (p.hidden == Activation::kMaxout) {
      da = Vec::Zero(l.weight.rows());
      const auto& idx = tape.argmax[ii];
      for (std::size_t u = 0; u < idx.size(); ++u) da[idx[u]] += g[static_cast<Eigen::Index>(u)];
    } else {
      const Vec& act = tape.activations[ii];
      da = g.array() * (1.0 - act.array().square());
    }
    const Vec& in = tape.inputs[ii];
    Eigen::Map<Mat> dw(dparams.data() + offset[ii], l.weight.rows(), l.weight.cols());
    dw.noalias() += da * in.transpose();
    Eigen::Map<Vec> db(dparams.data() + offset[ii] + l.weight.size(), l.bias.size());
    db += da;
    g = l.weight.transpose() * da;
  }
  return g;
}

MlpGradient mlp_backward(const MlpParams& p, const MlpTape& tape, const Vec& dl_dy) {
  MlpGradient out;
  out.dparams = Vec::Zero(static_cast<Eigen::Index>(p.param_count()));
  out.dx = mlp_backward_accumulate(p, tape, dl_dy,
                                   {out.dparams.data(), static_cast<std::size_t>(out.dparams.size())});
  return out;
}

double maxout_margin(const MlpParams& p, const MlpTape& tape) {
  double margin = std::numeric_limits<double>::infinity();
  if (p.hidden != Activation::kMaxout) return margin;
  if (tape.inputs.size() != p.layers.size()) throw StaleTapeError("maxout_margin: tape does not match");
  for (std::size_t i = 0; i + 1 < p.layers.size(); ++i) {
    const Vec a = p.layers[i].weight * tape.inputs[i] + p.layers[i].bias;
    for (Eigen::Index start = 0; start < a.size(); start += p.maxout_window) {
      double best = -std::numeric_limits<double>::infinity(), second = best;
      for (Eigen::Index j = start; j < start + p.maxout_window; ++j) {
        if (a[j] > best) {
          second = best;
          best = a[j];
        } else if (a[j] > second) {
          second = a[j];
        }
      }
      margin = std::min(margin, best - second);
    }
  }
  return margin;
}

}  // namespace flowvi
