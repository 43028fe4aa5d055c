#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "flowvi/cli.hpp"
#include "test_util.hpp"

#include <unistd.h>

#include <fstream>
#include <initializer_list>
#include <sstream>

using namespace flowvi;
using namespace flowvi::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("flowvi_test_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

int run(std::initializer_list<std::string> args) {
  std::vector<std::string> owned{"flowvi"};
  owned.insert(owned.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : owned) argv.push_back(s.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

}  // namespace

TEST_CASE("dataset files") {
  const fs::path dir = scratch("data");
  fs::create_directories(dir);

  SUBCASE("round trip") {
    const Dataset bars = synth_dataset(30, 16, 4);
    write_dataset(dir / "b.bin", bars, "u8");
    const Dataset back = read_dataset(dir / "b.bin");
    CHECK(back.n == 30);
    CHECK(back.d == 16);
    CHECK(back.values == bars.values);

    Dataset real{3, 2, {0.25, -1.5, 1e-300, 7.0, 0.1, 3.0}};
    write_dataset(dir / "r.bin", real, "f64");
    CHECK(read_dataset(dir / "r.bin").values == real.values);
    CHECK_THROWS_AS(write_dataset(dir / "x.bin", real, "u8"), DomainError);
  }
  SUBCASE("synthetic data is binary, seeded and not constant") {
    const Dataset a = synth_dataset(50, 64, 9);
    CHECK(a.values == synth_dataset(50, 64, 9).values);
    CHECK(a.values != synth_dataset(50, 64, 10).values);
    double ones = 0.0;
    for (double v : a.values) {
      CHECK((v == 0.0 || v == 1.0));
      ones += v;
    }
    CHECK(ones > 0.0);
    CHECK(ones < static_cast<double>(a.values.size()));
    const Dataset b = synth_dataset(20, 10, 1);  // non-square width
    CHECK(b.values.size() == 200);
  }
  SUBCASE("malformed files") {
    const std::string header = R"({"n": 2, "d": 3, "dtype": "u8"})";
    spit(dir / "short.bin", header + "\n" + std::string(5, '\1'));
    spit(dir / "long.bin", header + "\n" + std::string(7, '\1'));
    spit(dir / "nohdr.bin", std::string(6, '\1'));
    spit(dir / "dtype.bin", R"({"n": 2, "d": 3, "dtype": "f32"})" "\n" + std::string(24, '\0'));
    spit(dir / "zero.bin", R"({"n": 0, "d": 3, "dtype": "u8"})" "\n");
    for (const char* f : {"short.bin", "long.bin", "nohdr.bin", "dtype.bin", "zero.bin", "missing.bin"}) {
      CAPTURE(f);
      CHECK_THROWS_AS(read_dataset(dir / f), InputError);
      CHECK(run({"vae", "--data", (dir / f).string(), "--iters", "1", "--out", (dir / "o").string()}) ==
            kExitInputError);
    }
  }
  SUBCASE("synth command") {
    CHECK(run({"synth", "--shape", "12x25", "--out", (dir / "s.bin").string(), "--seed", "3"}) == kExitOk);
    CHECK(read_dataset(dir / "s.bin").values == synth_dataset(12, 25, 3).values);
    CHECK(run({"synth", "--shape", "12by25", "--out", (dir / "s.bin").string()}) == kExitInputError);
  }
}

TEST_CASE("configuration") {
  SUBCASE("json round trip") {
    Fit2dConfig f;
    f.energy = 3;
    f.flow = FlowFamily::kNiceOrth;
    f.k = 7;
    f.train.learning_rate = 3.25e-4;
    f.train.seed = 99;
    f.out_dir = "somewhere";
    const json jf = to_json(f);
    CHECK(to_json(fit2d_config_from_json(jf)) == jf);
    CHECK(jf.at("mode") == "fit2d");

    VaeConfig v;
    v.likelihood = Likelihood::kLogitNormal;
    v.hidden = 12;
    v.train.minibatch = 5;
    const json jv = to_json(v);
    CHECK(to_json(vae_config_from_json(jv)) == jv);
    CHECK_THROWS_AS(fit2d_config_from_json(jv), InputError);
  }
  SUBCASE("invalid values exit with an input error") {
    const std::string out = scratch("bad").string();
    CHECK(run({"fit2d", "--energy", "9", "--out", out}) == kExitInputError);
    CHECK(run({"fit2d", "--flow", "spline", "--out", out}) == kExitInputError);
    CHECK(run({"fit2d", "--grid-n", "50", "--out", out}) == kExitInputError);
    CHECK(run({"fit2d", "--no-such-flag"}) == kExitInputError);
    CHECK(run({}) == kExitInputError);
    CHECK(run({"fit2d", "--config", out + "/absent.json"}) == kExitInputError);
  }
}

TEST_CASE("fit2d outputs") {
  const fs::path a = scratch("fit_a");
  const fs::path b = scratch("fit_b");
  const fs::path c = scratch("fit_c");
  REQUIRE(run({"fit2d", "--energy", "2", "--k", "3", "--iters", "300", "--eval-every", "50", "--grid-n", "120",
               "--density-n", "15", "--kl-samples", "400", "--seed", "5", "--out", a.string()}) == kExitOk);
  for (const char* f : {"config.json", "metrics.csv", "checkpoint.json", "approx_density.csv", "true_density.csv",
                        "kl.json"})
    CHECK(fs::exists(a / f));

  SUBCASE("file layout") {
    CHECK(first_line(a / "metrics.csv") == "t,beta_t,free_energy,entropy_q0,neg_sum_logdet,neg_logp,wallclock_ms");
    CHECK(first_line(a / "approx_density.csv") == "z1,z2,log_q");
    CHECK(first_line(a / "true_density.csv") == "z1,z2,neg_energy");
    std::ifstream m(a / "metrics.csv");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(m, line)) ++rows;
    CHECK(rows == 1 + 300 / 50);
    const json kl = read_json(a / "kl.json");
    for (const char* key : {"kl_estimate", "kl_std_error", "Z", "S", "grid_n"}) CHECK(kl.contains(key));
    const json ck = read_json(a / "checkpoint.json");
    CHECK(ck.at("t") == 300);
    CHECK(ck.at("layers").size() == 3);
    CHECK(ck.at("config") == read_json(a / "config.json"));
  }
  SUBCASE("rerun from config.json is byte-identical") {
    REQUIRE(run({"fit2d", "--config", (a / "config.json").string(), "--out", b.string()}) == kExitOk);
    for (const char* f : {"metrics.csv", "approx_density.csv", "true_density.csv", "kl.json"}) {
      CAPTURE(f);
      CHECK(slurp(a / f) == slurp(b / f));
    }
    json ca = read_json(a / "checkpoint.json");
    json cb = read_json(b / "checkpoint.json");
    ca["config"].erase("out");
    cb["config"].erase("out");
    CHECK(ca == cb);
    // same directory: every file matches
    const std::string before = slurp(a / "checkpoint.json");
    REQUIRE(run({"fit2d", "--config", (a / "config.json").string()}) == kExitOk);
    CHECK(slurp(a / "checkpoint.json") == before);
  }
  SUBCASE("a different seed changes the run") {
    REQUIRE(run({"fit2d", "--config", (a / "config.json").string(), "--seed", "6", "--out", c.string()}) ==
            kExitOk);
    CHECK(slurp(a / "metrics.csv") != slurp(c / "metrics.csv"));
    CHECK(read_json(c / "config.json").at("train").at("seed") == 6);
  }
}

TEST_CASE("density grids") {
  SUBCASE("K = 0 is the base Gaussian") {
    const Problem p = Problem::energy_fit(make_energy(1), FlowStack(2));
    Vec params = p.pack();
    params.segment(static_cast<Eigen::Index>(p.registry().at("q0.mu").offset), 2) << 0.3, -0.8;
    params.segment(static_cast<Eigen::Index>(p.registry().at("q0.log_sigma").offset), 2) << -0.2, 0.4;
    const DiagGaussian q0{Vec::Map(params.data() + p.registry().at("q0.mu").offset, 2),
                          Vec::Map(params.data() + p.registry().at("q0.log_sigma").offset, 2)};
    const DensityGrid g = approx_log_density(p, params, 41);
    double worst = 0.0;
    for (int i = 0; i < g.n; ++i)
      for (int j = 0; j < g.n; ++j) {
        Vec z(2);
        z << g.node(i), g.node(j);
        worst = std::max(worst, std::abs(g.values[static_cast<std::size_t>(i) * g.n + j] - diag_gaussian_logpdf(q0, z)));
      }
    CHECK(worst <= 1e-10);
    CHECK(g.node(0) == -4.0);
    CHECK(g.node(40) == 4.0);
  }
  SUBCASE("approximate densities integrate to one") {
    Rng rng(31);
    const int n = 400;
    for (FlowFamily fam : {FlowFamily::kPlanar, FlowFamily::kRadial, FlowFamily::kNicePerm}) {
      for (std::size_t k : {1u, 4u, 8u}) {
        const Problem p = Problem::energy_fit(make_energy(1), make_flow_stack(fam, 2, k, rng));
        Vec params = p.pack() + randn(rng, static_cast<Eigen::Index>(p.registry().total()), 0.3);
        params.segment(static_cast<Eigen::Index>(p.registry().at("q0.mu").offset), 2).setZero();
        params.segment(static_cast<Eigen::Index>(p.registry().at("q0.log_sigma").offset), 2).setConstant(std::log(0.6));
        const DensityGrid g = approx_log_density(p, params, n);
        const double step = (g.hi - g.lo) / (n - 1);
        double total = 0.0;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) {
            const double w = ((i == 0 || i == n - 1) ? 0.5 : 1.0) * ((j == 0 || j == n - 1) ? 0.5 : 1.0);
            total += w * std::exp(g.values[static_cast<std::size_t>(i) * n + j]);
          }
        total *= step * step;
        CAPTURE(to_string(fam));
        CAPTURE(k);
        CHECK(std::abs(total - 1.0) < 0.02);
      }
    }
  }
  SUBCASE("true density is the negated energy") {
    const DensityGrid g = neg_energy_grid(make_energy(3), 9);
    Vec z(2);
    z << g.node(2), g.node(7);
    CHECK(g.values[2 * 9 + 7] == -energy_eval(make_energy(3), z));
  }
}

TEST_CASE("gradcheck command") {
  const fs::path dir = scratch("gc");
  CHECK(run({"gradcheck", "--out", dir.string(), "--instances", "8", "--seed", "2"}) == kExitOk);
  const json ok = read_json(dir / "gradcheck.json");
  CHECK(ok.at("pass") == true);
  CHECK(ok.at("failed").empty());
  CHECK(ok.at("families").size() == gradcheck_family_names().size());

  CHECK(run({"gradcheck", "--out", dir.string(), "--instances", "8", "--corrupt-family", "radial.params"}) ==
        kExitFailure);
  const json bad = read_json(dir / "gradcheck.json");
  CHECK(bad.at("pass") == false);
  CHECK(bad.at("failed") == json::array({"radial.params"}));
}

TEST_CASE("vae command") {
  const fs::path dir = scratch("vae");
  fs::create_directories(dir);
  write_dataset(dir / "one.bin", synth_dataset(1, 16, 2), "u8");
  write_dataset(dir / "few.bin", synth_dataset(12, 16, 2), "u8");

  SUBCASE("single datapoint smoke run") {
    REQUIRE(run({"vae", "--data", (dir / "one.bin").string(), "--iters", "10", "--minibatch", "1", "--hidden", "8",
                 "--k", "2", "--is-samples", "20", "--out", (dir / "one").string()}) == kExitOk);
    const json ev = read_json(dir / "one" / "eval.json");
    CHECK(ev.at("n") == 1);
    CHECK(std::isfinite(ev.at("final_bound").get<double>()));
  }
  SUBCASE("importance-sampled likelihood dominates the bound") {
    for (const char* flow : {"planar", "radial", "nice-perm"}) {
      const fs::path out = dir / flow;
      REQUIRE(run({"vae", "--data", (dir / "few.bin").string(), "--iters", "40", "--minibatch", "4", "--hidden", "8",
                   "--k", "2", "--flow", flow, "--is-samples", "50", "--out", out.string()}) == kExitOk);
      const json ev = read_json(out / "eval.json");
      CAPTURE(flow);
      CHECK(ev.at("is_loglik").get<double>() >= -ev.at("final_bound").get<double>() - 1e-12);
      CHECK(read_json(out / "checkpoint.json").at("config") == read_json(out / "config.json"));
    }
  }
  SUBCASE("logit-normal data must lie in range") {
    write_dataset(dir / "neg.bin", Dataset{1, 2, {0.5, -0.1}}, "f64");
    CHECK(run({"vae", "--data", (dir / "neg.bin").string(), "--likelihood", "logitnormal", "--iters", "1", "--out",
               (dir / "neg").string()}) == kExitInputError);
    CHECK(run({"vae", "--data", (dir / "neg.bin").string(), "--iters", "1", "--out", (dir / "neg").string()}) ==
          kExitInputError);
  }
}
