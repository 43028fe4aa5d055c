#include "flowvi/cli.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <functional>
#include <iostream>
#include <regex>

namespace flowvi {

namespace {

using nlohmann::json;

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

// Options that were given explicitly override whatever the config file (or
// the defaults) provided.
template <class Cfg>
class Overrides {
 public:
  template <class T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& help,
                   std::function<void(Cfg&, const T&)> apply) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    entries_.push_back({opt, [value, apply](Cfg& c) { apply(c, *value); }});
    return opt;
  }

  void apply(Cfg& c) const {
    for (const auto& e : entries_)
      if (e.opt->count() > 0) e.fn(c);
  }

 private:
  struct Entry {
    CLI::Option* opt;
    std::function<void(Cfg&)> fn;
  };
  std::vector<Entry> entries_;
};

template <class Cfg>
void add_train_options(Overrides<Cfg>& o, CLI::App* app) {
  o.template add<std::size_t>(app, "--iters", "number of updates", [](Cfg& c, auto v) { c.train.iters = v; });
  o.template add<std::uint64_t>(app, "--seed", "run seed", [](Cfg& c, auto v) { c.train.seed = v; });
  o.template add<std::size_t>(app, "--minibatch", "samples (fit2d) or datapoints (vae) per update",
                              [](Cfg& c, auto v) { c.train.minibatch = v; });
  o.template add<double>(app, "--lr", "RMSprop learning rate", [](Cfg& c, auto v) { c.train.learning_rate = v; });
  o.template add<double>(app, "--momentum", "RMSprop momentum", [](Cfg& c, auto v) { c.train.momentum = v; });
  o.template add<double>(app, "--anneal-t0", "initial inverse temperature", [](Cfg& c, auto v) { c.train.anneal_t0 = v; });
  o.template add<std::size_t>(app, "--anneal-steps", "updates until the inverse temperature reaches 1",
                              [](Cfg& c, auto v) { c.train.anneal_steps = v; });
  o.template add<std::size_t>(app, "--eval-every", "metrics row interval", [](Cfg& c, auto v) { c.train.eval_every = v; });
  o.template add<std::size_t>(app, "--threads", "worker count (default: FLOWVI_THREADS or all cores)",
                              [](Cfg& c, auto v) { c.train.threads = v; });
  o.template add<double>(app, "--init-scale", "initial weight scale", [](Cfg& c, auto v) { c.init_scale = v; });
}

std::pair<std::size_t, std::size_t> parse_shape(const std::string& s) {
  static const std::regex re(R"(^\s*(\d+)\s*[xX]\s*(\d+)\s*$)");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw InputError("--shape must look like NxD, got '" + s + "'");
  try {
    return {std::stoull(m[1]), std::stoull(m[2])};
  } catch (const std::exception&) {
    throw InputError("--shape is out of range");
  }
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Variational inference with normalizing flows"};
  app.require_subcommand(1);

  // fit2d
  CLI::App* fit2d = app.add_subcommand("fit2d", "fit a flow posterior to a 2D test energy");
  std::string fit2d_config;
  fit2d->add_option("--config", fit2d_config, "config.json of an earlier run");
  Overrides<Fit2dConfig> fo;
  fo.add<int>(fit2d, "--energy", "test energy 1-4", [](Fit2dConfig& c, int v) { c.energy = v; });
  fo.add<std::string>(fit2d, "--flow", "planar | radial | nice-perm | nice-orth",
                      [](Fit2dConfig& c, const std::string& v) { c.flow = parse_flow_family(v); });
  fo.add<std::size_t>(fit2d, "--k", "flow length", [](Fit2dConfig& c, std::size_t v) { c.k = v; });
  fo.add<int>(fit2d, "--grid-n", "nodes per axis for the normalizer", [](Fit2dConfig& c, int v) { c.grid_n = v; });
  fo.add<int>(fit2d, "--density-n", "nodes per axis of the density grids (default: grid-n)",
              [](Fit2dConfig& c, int v) { c.density_n = v; });
  fo.add<std::size_t>(fit2d, "--kl-samples", "samples for the KL estimate",
                      [](Fit2dConfig& c, std::size_t v) { c.kl_samples = v; });
  fo.add<std::string>(fit2d, "--out", "output directory", [](Fit2dConfig& c, const std::string& v) { c.out_dir = v; });
  add_train_options(fo, fit2d);

  // vae
  CLI::App* vae = app.add_subcommand("vae", "train a deep latent Gaussian model with a flow posterior");
  std::string vae_config;
  vae->add_option("--config", vae_config, "config.json of an earlier run");
  Overrides<VaeConfig> vo;
  vo.add<std::string>(vae, "--data", "dataset file", [](VaeConfig& c, const std::string& v) { c.data = v; });
  vo.add<int>(vae, "--latent-dim", "latent dimension", [](VaeConfig& c, int v) { c.latent_dim = v; });
  vo.add<std::string>(vae, "--flow", "planar | radial | nice-perm | nice-orth",
                      [](VaeConfig& c, const std::string& v) { c.flow = parse_flow_family(v); });
  vo.add<std::size_t>(vae, "--k", "flow length", [](VaeConfig& c, std::size_t v) { c.k = v; });
  vo.add<std::string>(vae, "--likelihood", "bernoulli | logitnormal",
                      [](VaeConfig& c, const std::string& v) { c.likelihood = parse_likelihood(v); });
  vo.add<int>(vae, "--hidden", "maxout units per hidden layer", [](VaeConfig& c, int v) { c.hidden = v; });
  vo.add<int>(vae, "--maxout-window", "maxout pool size", [](VaeConfig& c, int v) { c.maxout_window = v; });
  vo.add<std::size_t>(vae, "--is-samples", "importance samples per datapoint",
                      [](VaeConfig& c, std::size_t v) { c.is_samples = v; });
  vo.add<std::string>(vae, "--out", "output directory", [](VaeConfig& c, const std::string& v) { c.out_dir = v; });
  add_train_options(vo, vae);

  // gradcheck
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference audit of every backward pass");
  std::string gc_out;
  GradcheckConfig gcfg;
  gc->add_option("--out", gc_out, "output directory")->required();
  gc->add_option("--seed", gcfg.seed, "seed");
  gc->add_option("--instances", gcfg.instances, "random instances per family");
  gc->add_option("--corrupt-family", gcfg.corrupt_family)->group("");

  // synth
  CLI::App* synth = app.add_subcommand("synth", "write a synthetic binary dataset");
  std::string shape, synth_out;
  std::uint64_t synth_seed = 0;
  synth->add_option("--shape", shape, "NxD")->required();
  synth->add_option("--out", synth_out, "dataset file")->required();
  synth->add_option("--seed", synth_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInputError;
  }

  try {
    if (fit2d->parsed()) {
      Fit2dConfig cfg = fit2d_config.empty() ? Fit2dConfig{} : fit2d_config_from_json(load_config(fit2d_config));
      fo.apply(cfg);
      const Fit2dOutcome r = run_fit2d(cfg);
      if (r.exit_code == kExitOk)
        std::cout << "kl_estimate " << r.kl.kl << " (se " << r.kl.std_error << ")\n";
      return r.exit_code;
    }
    if (vae->parsed()) {
      VaeConfig cfg = vae_config.empty() ? VaeConfig{} : vae_config_from_json(load_config(vae_config));
      vo.apply(cfg);
      const VaeOutcome r = run_vae(cfg);
      if (r.exit_code == kExitOk)
        std::cout << "final_bound " << r.final_bound << " is_loglik " << r.is_loglik << '\n';
      return r.exit_code;
    }
    if (gc->parsed()) {
      GradcheckReport report;
      const int code = run_gradcheck_to(gcfg, gc_out, &report);
      std::cout << (report.pass ? "gradcheck passed" : "gradcheck FAILED") << " (" << report.families.size()
                << " families)\n";
      return code;
    }
    if (synth->parsed()) {
      const auto [n, d] = parse_shape(shape);
      write_dataset(synth_out, synth_dataset(n, d, synth_seed), "u8");
      return kExitOk;
    }
  } catch (const InputError& e) {
    std::cerr << "flowvi: " << e.what() << '\n';
    return kExitInputError;
  } catch (const DomainError& e) {
    std::cerr << "flowvi: " << e.what() << '\n';
    return kExitInputError;
  } catch (const NumericError& e) {
    std::cerr << "flowvi: " << e.what() << '\n';
    return kExitNumericHalt;
  } catch (const std::exception& e) {
    std::cerr << "flowvi: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace flowvi
