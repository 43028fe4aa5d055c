#include "flowvi/cli.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>

namespace flowvi {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configurations

TrainConfig Fit2dConfig::default_train() {
  TrainConfig t;
  t.iters = 30000;
  t.learning_rate = 1e-3;
  return t;
}

void Fit2dConfig::validate() const {
  if (energy < 1 || energy > 4) throw InputError("--energy must be 1, 2, 3 or 4");
  if (grid_n < 100) throw InputError("--grid-n must be at least 100");
  if (density_n != 0 && density_n < 2) throw InputError("--density-n must be at least 2");
  if (kl_samples < 2) throw InputError("--kl-samples must be at least 2");
  if (out_dir.empty()) throw InputError("--out is required");
  train.validate();
}

TrainConfig VaeConfig::default_train() {
  TrainConfig t;
  t.iters = 10000;
  t.learning_rate = 1e-3;
  return t;
}

void VaeConfig::validate() const {
  if (data.empty()) throw InputError("--data is required");
  if (latent_dim < 1) throw InputError("--latent-dim must be positive");
  if (hidden < 1 || maxout_window < 1) throw InputError("hidden sizes must be positive");
  if ((flow == FlowFamily::kNicePerm || flow == FlowFamily::kNiceOrth) && k > 0 && latent_dim < 2)
    throw InputError("NICE flows need --latent-dim >= 2");
  if (is_samples < 1) throw InputError("--is-samples must be positive");
  if (out_dir.empty()) throw InputError("--out is required");
  train.validate();
}

json to_json(const TrainConfig& c) {
  return {{"minibatch", c.minibatch},     {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"anneal_t0", c.anneal_t0},     {"anneal_steps", c.anneal_steps},   {"k", c.k},
          {"iters", c.iters},             {"seed", c.seed},                   {"eval_every", c.eval_every},
          {"rms_decay", c.rms_decay},     {"rms_epsilon", c.rms_epsilon},     {"threads", c.threads},
          {"record_wallclock", c.record_wallclock}};
}

namespace {

template <class T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InputError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw InputError("config: 'train' must be an object");
  read_field(j, "minibatch", c.minibatch);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "momentum", c.momentum);
  read_field(j, "anneal_t0", c.anneal_t0);
  read_field(j, "anneal_steps", c.anneal_steps);
  read_field(j, "k", c.k);
  read_field(j, "iters", c.iters);
  read_field(j, "seed", c.seed);
  read_field(j, "eval_every", c.eval_every);
  read_field(j, "rms_decay", c.rms_decay);
  read_field(j, "rms_epsilon", c.rms_epsilon);
  read_field(j, "threads", c.threads);
  read_field(j, "record_wallclock", c.record_wallclock);
  return c;
}

namespace {

// The flow length lives at the top level; the train block mirrors it.
json with_k(TrainConfig t, std::size_t k) {
  t.k = k;
  return to_json(t);
}

}  // namespace

json to_json(const Fit2dConfig& c) {
  return {{"mode", "fit2d"},         {"energy", c.energy},         {"flow", to_string(c.flow)},
          {"k", c.k},                {"train", with_k(c.train, c.k)}, {"grid_n", c.grid_n},
          {"density_n", c.density_n}, {"kl_samples", c.kl_samples}, {"init_scale", c.init_scale},
          {"out", c.out_dir}};
}

Fit2dConfig fit2d_config_from_json(const json& j) {
  if (!j.is_object() || j.value("mode", "") != "fit2d") throw InputError("config: not a fit2d configuration");
  Fit2dConfig c;
  read_field(j, "energy", c.energy);
  std::string flow = to_string(c.flow);
  read_field(j, "flow", flow);
  c.flow = parse_flow_family(flow);
  read_field(j, "k", c.k);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  read_field(j, "grid_n", c.grid_n);
  read_field(j, "density_n", c.density_n);
  read_field(j, "kl_samples", c.kl_samples);
  read_field(j, "init_scale", c.init_scale);
  read_field(j, "out", c.out_dir);
  c.train.k = c.k;
  return c;
}

json to_json(const VaeConfig& c) {
  return {{"mode", "vae"},
          {"data", c.data},
          {"latent_dim", c.latent_dim},
          {"flow", to_string(c.flow)},
          {"k", c.k},
          {"likelihood", to_string(c.likelihood)},
          {"hidden", c.hidden},
          {"maxout_window", c.maxout_window},
          {"train", with_k(c.train, c.k)},
          {"is_samples", c.is_samples},
          {"init_scale", c.init_scale},
          {"out", c.out_dir}};
}

VaeConfig vae_config_from_json(const json& j) {
  if (!j.is_object() || j.value("mode", "") != "vae") throw InputError("config: not a vae configuration");
  VaeConfig c;
  read_field(j, "data", c.data);
  read_field(j, "latent_dim", c.latent_dim);
  std::string flow = to_string(c.flow);
  read_field(j, "flow", flow);
  c.flow = parse_flow_family(flow);
  read_field(j, "k", c.k);
  std::string lik = to_string(c.likelihood);
  read_field(j, "likelihood", lik);
  c.likelihood = parse_likelihood(lik);
  read_field(j, "hidden", c.hidden);
  read_field(j, "maxout_window", c.maxout_window);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  read_field(j, "is_samples", c.is_samples);
  read_field(j, "init_scale", c.init_scale);
  read_field(j, "out", c.out_dir);
  c.train.k = c.k;
  return c;
}

// ---------------------------------------------------------------------------
// Files

namespace {

template <class T>
T byteswap_if_big_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw InputError("cannot create output directory '" + dir.string() + "'");
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  return out;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Dataset read_dataset(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open dataset '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header) || in.eof()) throw InputError("dataset: missing header line");
  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw InputError(std::string("dataset: header is not JSON: ") + e.what());
  }
  if (!h.is_object() || !h.contains("n") || !h.contains("d") || !h.contains("dtype"))
    throw InputError("dataset: header needs n, d and dtype");
  if (!h["n"].is_number_unsigned() || !h["d"].is_number_unsigned() || !h["dtype"].is_string())
    throw InputError("dataset: n and d must be non-negative integers and dtype a string");
  Dataset data;
  data.n = h["n"].get<std::size_t>();
  data.d = h["d"].get<std::size_t>();
  const std::string dtype = h["dtype"].get<std::string>();
  if (data.n == 0 || data.d == 0) throw InputError("dataset: n and d must be positive");
  std::size_t width = 0;
  if (dtype == "u8")
    width = 1;
  else if (dtype == "f64")
    width = 8;
  else
    throw InputError("dataset: dtype must be \"u8\" or \"f64\"");
  if (data.n > (std::size_t{1} << 40) / data.d / width) throw InputError("dataset: header size is implausible");

  const std::size_t count = data.n * data.d;
  std::vector<char> raw(count * width);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw InputError("dataset: file holds fewer values than the header declares");
  if (in.peek() != std::char_traits<char>::eof()) throw InputError("dataset: trailing bytes after the last row");

  data.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (width == 1) {
      data.values[i] = static_cast<unsigned char>(raw[i]);
    } else {
      double v;
      std::memcpy(&v, raw.data() + 8 * i, 8);
      data.values[i] = byteswap_if_big_endian(v);
    }
    if (!std::isfinite(data.values[i])) throw InputError("dataset: non-finite value");
  }
  return data;
}

void write_dataset(const fs::path& path, const Dataset& data, const std::string& dtype) {
  if (dtype != "u8" && dtype != "f64") throw InputError("dataset dtype must be u8 or f64");
  if (data.values.size() != data.n * data.d) throw DomainError("write_dataset: value count mismatch");
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out = open_out(path, std::ios::binary);
  const json h = {{"n", data.n}, {"d", data.d}, {"dtype", dtype}};
  out << h.dump() << '\n';
  for (double v : data.values) {
    if (dtype == "u8") {
      if (v < 0.0 || v > 255.0 || v != std::floor(v)) throw DomainError("write_dataset: value does not fit u8");
      const auto b = static_cast<unsigned char>(v);
      out.put(static_cast<char>(b));
    } else {
      const double le = byteswap_if_big_endian(v);
      out.write(reinterpret_cast<const char*>(&le), 8);
    }
  }
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

Dataset synth_dataset(std::size_t n, std::size_t d, std::uint64_t seed) {
  if (n == 0 || d == 0) throw InputError("synth: shape must be positive");
  Rng rng(seed);
  Dataset data{n, d, std::vector<double>(n * d, 0.0)};
  const double flip = 0.05;
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d))));
  if (side * side == d) {
    // Each of the 2 * side bars is on with probability 1 / side, at least one.
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<bool> on(2 * side, false);
      bool any = false;
      while (!any) {
        for (std::size_t b = 0; b < 2 * side; ++b) {
          on[b] = rng.uniform() < 1.0 / static_cast<double>(side);
          any = any || on[b];
        }
      }
      for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j) {
          double px = (on[i] || on[side + j]) ? 1.0 : 0.0;
          if (rng.uniform() < flip) px = 1.0 - px;
          data.values[r * d + i * side + j] = px;
        }
    }
  } else {
    const std::size_t protos = 8;
    std::vector<double> proto(protos * d);
    for (auto& p : proto) p = rng.uniform() < 0.3 ? 1.0 : 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t c = static_cast<std::size_t>(rng.next_u64() % protos);
      for (std::size_t j = 0; j < d; ++j) {
        double px = proto[c * d + j];
        if (rng.uniform() < flip) px = 1.0 - px;
        data.values[r * d + j] = px;
      }
    }
  }
  return data;
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream out = open_out(path);
  out << "t,beta_t,free_energy,entropy_q0,neg_sum_logdet,neg_logp,wallclock_ms\n";
  for (const auto& r : rows)
    out << r.t << ',' << fmt17(r.beta_t) << ',' << fmt17(r.free_energy) << ',' << fmt17(r.entropy_q0) << ','
        << fmt17(r.neg_sum_logdet) << ',' << fmt17(r.neg_logp) << ',' << fmt17(r.wallclock_ms) << '\n';
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

namespace {

std::vector<double> to_vector(const Vec& v) { return {v.data(), v.data() + v.size()}; }

json layer_json(const FlowLayer& layer, bool with_params) {
  json j = {{"type", layer_type_name(layer)}, {"d", std::visit([](const auto& l) { return l.dim(); }, layer)}};
  if (with_params) {
    Vec p(static_cast<Eigen::Index>(layer_param_count(layer)));
    pack_layer(layer, {p.data(), static_cast<std::size_t>(p.size())});
    j["params"] = to_vector(p);
  }
  if (const auto* nice = std::get_if<NiceLayer>(&layer)) {
    std::vector<int> mask(nice->mask.begin(), nice->mask.end());
    j["mask"] = mask;
    if (const auto* perm = std::get_if<Permutation>(&nice->mixer)) {
      j["mixer"] = {{"kind", "permutation"}, {"perm", perm->perm}};
    } else if (const auto* q = std::get_if<Mat>(&nice->mixer)) {
      j["mixer"] = {{"kind", "orthogonal"},
                    {"rows", q->rows()},
                    {"values", std::vector<double>(q->data(), q->data() + q->size())}};
    } else {
      j["mixer"] = {{"kind", "none"}};
    }
  }
  return j;
}

}  // namespace

json checkpoint_json(const json& config, const Problem& problem, const TrainState& state) {
  json reg = json::array();
  for (const auto& s : state.registry.spans())
    reg.push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}});
  const auto& st = state.rng.state();
  json j = {{"config", config},
            {"registry", reg},
            {"params", to_vector(state.params)},
            {"rmsprop",
             {{"mean_square", to_vector(state.rmsprop.mean_square)},
              {"velocity", to_vector(state.rmsprop.velocity)},
              {"decay", state.rmsprop.decay},
              {"epsilon", state.rmsprop.epsilon}}},
            {"rng",
             {{"algorithm", Rng::kAlgorithm},
              {"state", std::vector<std::uint64_t>(st.begin(), st.end())},
              {"has_spare", state.rng.has_spare()},
              {"spare", state.rng.spare()}}},
            {"t", state.t}};

  // Flow structure at the checkpointed parameters.
  json layers = json::array();
  const Problem bound = problem.bind(state.params);
  if (const auto* f = std::get_if<FreePosterior>(&bound.posterior())) {
    for (const auto& l : f->flow.layers()) layers.push_back(layer_json(l, true));
  } else {
    const auto& a = std::get<AmortizedPosterior>(bound.posterior());
    if (a.infnet.amortizes_flow()) {
      for (const auto& l : amortized_stack_template(a.infnet.family, a.infnet.latent_dim, a.infnet.k).layers()) {
        json lj = layer_json(l, false);
        lj["amortized"] = true;
        layers.push_back(lj);
      }
    } else {
      for (const auto& l : a.global_flow.layers()) layers.push_back(layer_json(l, true));
    }
  }
  j["layers"] = layers;
  return j;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

DensityGrid approx_log_density(const Problem& problem, const Vec& params, int n) {
  if (n < 2) throw DomainError("approx_log_density: need at least two nodes per axis");
  const Problem bound = problem.bind(params);
  const auto* free = std::get_if<FreePosterior>(&bound.posterior());
  if (!free || bound.latent_dim() != 2) throw DomainError("approx_log_density: needs a free 2D posterior");
  DensityGrid g;
  g.n = n;
  g.values.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
  Vec z(2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      z << g.node(i), g.node(j);
      const Vec z0 = flow_inverse(free->flow, z);
      const FlowResult fr = flow_forward(free->flow, z0);
      g.values[static_cast<std::size_t>(i) * n + j] = diag_gaussian_logpdf(free->q0, z0) - fr.sum_logdet;
    }
  return g;
}

DensityGrid neg_energy_grid(EnergyFunction e, int n) {
  if (n < 2) throw DomainError("neg_energy_grid: need at least two nodes per axis");
  DensityGrid g;
  g.n = n;
  g.values.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
  Vec z(2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      z << g.node(i), g.node(j);
      g.values[static_cast<std::size_t>(i) * n + j] = -energy_eval(e, z);
    }
  return g;
}

void write_density_csv(const fs::path& path, const DensityGrid& grid, const std::string& column) {
  std::ofstream out = open_out(path);
  out << "z1,z2," << column << '\n';
  for (int i = 0; i < grid.n; ++i)
    for (int j = 0; j < grid.n; ++j)
      out << fmt17(grid.node(i)) << ',' << fmt17(grid.node(j)) << ','
          << fmt17(grid.values[static_cast<std::size_t>(i) * grid.n + j]) << '\n';
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Runs

namespace {

// Stream ids under the run seed; training itself uses 1 (init) and 2.
constexpr std::uint64_t kStructureStream = 3;
constexpr std::uint64_t kEvalStream = 4;

void write_halt(const fs::path& dir, const TrainResult& r) {
  write_json(dir / "halt.json",
             {{"reason", r.halt_reason}, {"sample_index", r.halt_sample}, {"t", r.state.t}});
  std::cerr << "flowvi: training halted: " << r.halt_reason << '\n';
}

}  // namespace

Fit2dOutcome run_fit2d(const Fit2dConfig& cfg_in) {
  Fit2dConfig cfg = cfg_in;
  cfg.train.k = cfg.k;
  cfg.validate();
  const fs::path dir(cfg.out_dir);
  ensure_dir(dir);
  const json config = to_json(cfg);
  write_json(dir / "config.json", config);

  const EnergyFunction e = make_energy(cfg.energy);
  Rng structure = Rng(cfg.train.seed).split(kStructureStream);
  const Problem problem = Problem::energy_fit(e, make_flow_stack(cfg.flow, 2, cfg.k, structure));

  Fit2dOutcome out;
  out.train = train(cfg.train, problem, initial_train_state(problem, cfg.train, cfg.init_scale));
  write_metrics_csv(dir / "metrics.csv", out.train.metrics);
  write_json(dir / "checkpoint.json", checkpoint_json(config, problem, out.train.state));
  if (out.train.halted) {
    write_halt(dir, out.train);
    out.exit_code = kExitNumericHalt;
    return out;
  }

  const int dn = cfg.density_n > 0 ? cfg.density_n : cfg.grid_n;
  write_density_csv(dir / "approx_density.csv", approx_log_density(problem, out.train.state.params, dn), "log_q");
  write_density_csv(dir / "true_density.csv", neg_energy_grid(e, dn), "neg_energy");

  Rng eval = Rng(cfg.train.seed).split(kEvalStream);
  const double z = energy_normalizer(e, cfg.grid_n);
  out.kl = kl_to_energy_with_log_z(problem, out.train.state.params, e, cfg.kl_samples, std::log(z), eval);
  write_json(dir / "kl.json", {{"kl_estimate", out.kl.kl},
                               {"kl_std_error", out.kl.std_error},
                               {"Z", z},
                               {"S", cfg.kl_samples},
                               {"grid_n", cfg.grid_n}});
  return out;
}

VaeOutcome run_vae(const VaeConfig& cfg_in) {
  VaeConfig cfg = cfg_in;
  cfg.train.k = cfg.k;
  cfg.validate();
  Dataset data = read_dataset(cfg.data);
  if (cfg.likelihood == Likelihood::kBernoulli) {
    for (double v : data.values)
      if (v != 0.0 && v != 1.0) throw InputError("dataset: Bernoulli likelihood needs 0/1 values");
  } else {
    // Pixel intensities in [0, 1], or bytes scaled by 255, are squeezed into
    // [eps, 1 - eps].
    const double hi = *std::max_element(data.values.begin(), data.values.end());
    const double scale = hi > 1.0 ? 255.0 : 1.0;
    for (double& v : data.values) {
      v /= scale;
      if (v < 0.0 || v > 1.0) throw InputError("dataset: logit-normal data must lie in [0, 1] or [0, 255]");
      v = kLogitNormalEps + (1.0 - 2.0 * kLogitNormalEps) * v;
    }
  }

  const fs::path dir(cfg.out_dir);
  ensure_dir(dir);
  const json config = to_json(cfg);
  write_json(dir / "config.json", config);

  const int data_dim = static_cast<int>(data.d);
  auto infnet = InferenceNet::create(data_dim, {cfg.hidden}, cfg.latent_dim, cfg.flow, cfg.k,
                                     Activation::kMaxout, cfg.maxout_window);
  FlowStack global(cfg.latent_dim);
  if (!infnet.amortizes_flow()) {
    Rng structure = Rng(cfg.train.seed).split(kStructureStream);
    global = make_flow_stack(cfg.flow, cfg.latent_dim, cfg.k, structure);
  }
  auto decoder = Decoder::create(cfg.latent_dim, {cfg.hidden}, data_dim, cfg.likelihood, Activation::kMaxout,
                                 cfg.maxout_window);
  const Problem problem(AmortizedPosterior{std::move(infnet), std::move(global)}, DlgmTarget{std::move(decoder)});

  VaeOutcome out;
  out.train = train(cfg.train, problem, initial_train_state(problem, cfg.train, cfg.init_scale), &data);
  write_metrics_csv(dir / "metrics.csv", out.train.metrics);
  write_json(dir / "checkpoint.json", checkpoint_json(config, problem, out.train.state));
  if (out.train.halted) {
    write_halt(dir, out.train);
    out.exit_code = kExitNumericHalt;
    return out;
  }

  // Every datapoint gets is_samples posterior draws; the same draws give the
  // free-energy estimate and the importance-sampled likelihood.
  Rng eval = Rng(cfg.train.seed).split(kEvalStream);
  double sum_f = 0.0, sum_f2 = 0.0, sum_is = 0.0;
  for (std::size_t i = 0; i < data.n; ++i) {
    const auto log_w = log_importance_weights(problem, out.train.state.params, data.row(i), cfg.is_samples, eval);
    double mean = 0.0;
    for (double w : log_w) mean += w;
    mean /= static_cast<double>(log_w.size());
    const double is = log_mean_exp(log_w);
    if (!std::isfinite(mean) || !std::isfinite(is)) {
      out.train.halted = true;
      out.train.halt_reason = "evaluation: non-finite bound at datapoint " + std::to_string(i);
      out.train.halt_sample = static_cast<long>(i);
      write_halt(dir, out.train);
      out.exit_code = kExitNumericHalt;
      return out;
    }
    sum_f -= mean;
    sum_f2 += mean * mean;
    sum_is += is;
  }
  const double n = static_cast<double>(data.n);
  out.final_bound = sum_f / n;
  out.is_loglik = sum_is / n;
  const double var = data.n > 1 ? std::max(0.0, (sum_f2 - n * out.final_bound * out.final_bound) / (n - 1.0)) : 0.0;
  write_json(dir / "eval.json", {{"final_bound", out.final_bound},
                                 {"final_bound_se", std::sqrt(var / n)},
                                 {"is_loglik", out.is_loglik},
                                 {"is_samples", cfg.is_samples},
                                 {"n", data.n}});
  return out;
}

int run_gradcheck_to(const GradcheckConfig& cfg, const fs::path& out_dir, GradcheckReport* report_out) {
  ensure_dir(out_dir);
  const GradcheckReport report = run_gradcheck(cfg);
  json fams = json::array();
  json failed = json::array();
  for (const auto& f : report.families) {
    fams.push_back({{"name", f.name},
                    {"instances", f.instances},
                    {"max_rel_error", f.max_rel_error},
                    {"worst_instance", f.worst_instance},
                    {"pass", f.pass}});
    if (!f.pass) failed.push_back(f.name);
  }
  write_json(out_dir / "gradcheck.json", {{"seed", cfg.seed},
                                          {"tolerance", report.tolerance},
                                          {"pass", report.pass},
                                          {"failed", failed},
                                          {"families", fams}});
  for (const auto& f : report.families)
    if (!f.pass) std::cerr << "flowvi: gradcheck family " << f.name << " failed (max rel error " << f.max_rel_error << ")\n";
  if (report_out) *report_out = report;
  return report.pass ? kExitOk : kExitFailure;
}

}  // namespace flowvi
