#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pmv/harness.hpp"

using namespace pmv;

TEST_CASE("fit_decay on exact exponentials") {
  std::vector<double> d;
  for (int n = 0; n <= 10; ++n) d.push_back(std::exp(-2.0 * n));
  auto f = fit_decay(d, 0);
  CHECK(f.rate == Catch::Approx(2.0).epsilon(1e-12));
  CHECK(f.r2 == Catch::Approx(1.0).epsilon(1e-12));

  d.clear();
  for (int n = 0; n <= 10; ++n) d.push_back(5.0 * std::exp(-0.7 * n));
  f = fit_decay(d, 2);
  CHECK(f.rate == Catch::Approx(0.7).epsilon(1e-12));
  CHECK(f.intercept == Catch::Approx(std::log(5.0)).epsilon(1e-10));
}

TEST_CASE("fit_decay under bounded multiplicative noise stays near the rate") {
  std::mt19937 rng(123);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int seed = 0; seed < 20; ++seed) {
    std::vector<double> d;
    for (int n = 0; n <= 12; ++n) d.push_back(std::exp(-n) * (1.0 + 0.05 * u(rng)));
    auto f = fit_decay(d, 0);
    CHECK(f.rate > 0.9);
    CHECK(f.rate < 1.1);
  }
}

TEST_CASE("fit_decay error paths") {
  std::vector<double> too_few{1.0, 0.5, 0.25, 0.125};
  CHECK_THROWS_AS(fit_decay(too_few, 2), FitError);
  std::vector<double> zero{1.0, 0.5, 0.0, 0.25};
  CHECK_THROWS_AS(fit_decay(zero, 0), FitError);
}

TEST_CASE("minimal config fills the documented defaults") {
  ExperimentConfig cfg = parse_config("{}");
  CHECK(cfg.sim.n == 4096);
  CHECK(cfg.sim.steps_per_period == 1000);  // dt = t0/1000
  CHECK(cfg.sim.periods == 12);
  CHECK(cfg.burn_in == 2);
  CHECK(cfg.knn_k == 5);
  CHECK(cfg.metric == "w2");
  CHECK(cfg.invariant_copy == "coupled");
  CHECK_FALSE(cfg.output_dir.empty());
}

TEST_CASE("config validation lists every offending key") {
  const std::string bad = R"({
    "metric": "wasserstein-3",
    "burn_in": -2,
    "sim": {"n": 0, "bogus_knob": 1},
    "mystery": true
  })";
  try {
    parse_config(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("/metric") != std::string::npos);
    CHECK(msg.find("wasserstein-3") != std::string::npos);
    CHECK(msg.find("w2") != std::string::npos);  // lists the valid names
    CHECK(msg.find("/burn_in") != std::string::npos);
    CHECK(msg.find("sim/n") != std::string::npos);
    CHECK(msg.find("sim/bogus_knob") != std::string::npos);
    CHECK(msg.find("/mystery") != std::string::npos);
  }
}

TEST_CASE("parse errors carry line and column") {
  const std::string broken = "{\n  \"metric\": \"w2\",\n  \"burn_in\": oops\n}";
  try {
    parse_config(broken);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("metric and cost compatibility is enforced") {
  CHECK_THROWS_WITH(parse_config(R"({"metric": "wpsi"})"),
                    Catch::Matchers::ContainsSubstring("psi cost family"));
  CHECK_NOTHROW(parse_config(R"({"metric": "wpsi", "cost": {"family": "example31"}})"));
}

TEST_CASE("config round-trips through emission") {
  const std::string text = R"({
    "scenario": {"form": "granular", "dim": 1, "period": 1.0,
                 "a": {"kind": "sine", "base": 0.5, "amp": 0.25}, "eps": 0.05,
                 "init": {"kind": "gaussian", "mean": [2.0], "stddev": 0.5}},
    "metric": "w1",
    "sim": {"n": 512, "steps_per_period": 100, "periods": 4, "seed": 3, "workers": 2},
    "fixed_point": {"eps": 0.1, "consecutive": 2, "max_periods": 64},
    "burn_in": 1,
    "invariant_copy": "independent",
    "output_dir": "roundtrip-out"
  })";
  ExperimentConfig a = parse_config(text);
  ExperimentConfig b = parse_config(a.to_json().dump());
  CHECK(a.to_json() == b.to_json());
}

TEST_CASE("inline scenarios resolve onto the built-in forms") {
  json spec = json::parse(R"({
    "form": "ou", "dim": 2, "period": 2.0,
    "a": {"kind": "table", "values": [0.5, 1.0, 0.5, 0.25]},
    "sigma": 1.0,
    "domain": {"kind": "ball", "center": [0.0, 0.0], "radius": 2.0},
    "init": {"kind": "uniform"}
  })");
  Scenario s = resolve_scenario(spec);
  CHECK(s.coeffs.t0 == 2.0);
  CHECK(s.coeffs.dim == 2);
  CHECK(s.domain.kind() == ConvexDomain::Kind::Ball);

  CHECK_THROWS_AS(resolve_scenario(json::parse(R"({"form": "sand"})")), ConfigError);
  CHECK_THROWS_AS(resolve_scenario(json(42)), ConfigError);
  // errors are collected, not reported one at a time
  try {
    resolve_scenario(json::parse(R"({"form": "ou", "dim": 0, "period": -1, "wat": 1})"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("dim") != std::string::npos);
    CHECK(msg.find("period") != std::string::npos);
    CHECK(msg.find("wat") != std::string::npos);
  }
}

TEST_CASE("linear-drift experiment passes its own tolerance policy") {
  ExperimentConfig cfg = parse_config(R"({
    "scenario": "ou-periodic",
    "metric": "w2",
    "sim": {"n": 2000, "steps_per_period": 250, "periods": 8, "seed": 7},
    "fixed_point": {"eps": 0.05, "consecutive": 2},
    "burn_in": 2
  })");
  ErgodicityReport rep = run_experiment(cfg);
  CHECK(rep.verdict == "pass");
  CHECK(rep.metric == "w2-squared");
  CHECK(rep.lambda_predicted == Catch::Approx(2.0).epsilon(1e-9));
  CHECK(rep.fitted_rate == Catch::Approx(2.0).margin(0.3));
  CHECK(rep.r2 >= 0.95);
  CHECK(rep.distances.size() == 9);

  // report completeness: verdict comes with its evidence
  json j = rep.to_json();
  CHECK(j.contains("predicted"));
  CHECK(j["predicted"].contains("lambda"));
  CHECK(j.contains("fit"));
  CHECK(j["fit"].contains("rate"));
  CHECK(j["fit"].contains("r2"));
  CHECK(j.contains("tolerance_policy"));
  CHECK(j["tolerance_policy"].contains("rate_factor"));
  CHECK(j["tolerance_policy"].contains("r2_threshold"));
  CHECK(j["environment"].contains("seed"));
  CHECK(j["environment"].contains("n"));
  CHECK(j["environment"].contains("dt"));
  CHECK(j["environment"].contains("version"));
}

TEST_CASE("frozen dynamics yield a degenerate pass") {
  ExperimentConfig cfg = parse_config(R"({
    "scenario": {"form": "ou", "dim": 1, "a": {"kind": "table", "values": [0.0, 0.0]},
                 "sigma": 0.0, "init": {"kind": "point", "at": [1.5]}},
    "sim": {"n": 64, "steps_per_period": 20, "periods": 4},
    "fixed_point": {"eps": 1e-6, "consecutive": 1},
    "burn_in": 0
  })");
  ErgodicityReport rep = run_experiment(cfg);
  CHECK(rep.verdict == "pass-degenerate");
}

TEST_CASE("zero predicted rate reports no-contraction-predicted") {
  ExperimentConfig cfg = parse_config(R"({
    "scenario": {"form": "granular", "dim": 1, "a": {"kind": "table", "values": [0.0, 0.0]},
                 "eps": 0.0,
                 "domain": {"kind": "box", "lower": [-1.0], "upper": [1.0]},
                 "init": {"kind": "uniform"}},
    "metric": "w2",
    "invariant_copy": "independent",
    "sim": {"n": 512, "steps_per_period": 100, "periods": 6, "seed": 2},
    "fixed_point": {"eps": 0.15, "consecutive": 2},
    "burn_in": 1
  })");
  ErgodicityReport rep = run_experiment(cfg);
  CHECK(rep.verdict == "no-contraction-predicted");
  CHECK(rep.lambda_predicted == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("entropy experiments always use independent copies") {
  ExperimentConfig cfg = parse_config(R"({
    "scenario": "granular-periodic",
    "metric": "entropy",
    "invariant_copy": "coupled",
    "sim": {"n": 800, "steps_per_period": 150, "periods": 5, "seed": 5},
    "fixed_point": {"eps": 0.1, "consecutive": 2},
    "burn_in": 1
  })");
  ErgodicityReport rep = run_experiment(cfg);
  CHECK(rep.prediction_details["invariant_copy"] == "independent");
  CHECK(rep.prediction_details.contains("trend_nonincreasing"));
  CHECK((rep.verdict == "pass-trend" || rep.verdict == "fail-trend"));
}

TEST_CASE("emit_report writes report, distances, config and snapshots") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "pmv_harness_emit").string();
  fs::remove_all(dir);
  ExperimentConfig cfg = parse_config(R"({
    "scenario": "ou-periodic",
    "sim": {"n": 1024, "steps_per_period": 100, "periods": 4, "seed": 1},
    "fixed_point": {"eps": 0.12, "consecutive": 2},
    "burn_in": 1
  })");
  cfg.output_dir = dir;
  ErgodicityReport rep = run_and_emit(cfg);
  REQUIRE(rep.fixed_point_converged);
  CHECK(fs::exists(dir + "/report.json"));
  CHECK(fs::exists(dir + "/config.json"));
  CHECK(fs::exists(dir + "/distances.csv"));
  CHECK(fs::exists(dir + "/snapshots/test.csv"));
  CHECK(fs::exists(dir + "/snapshots/invariant.csv"));

  std::ifstream f(dir + "/distances.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line == "period,distance");
  int rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == static_cast<int>(rep.distances.size()));

  // emitted config reloads to the same effective config
  std::ifstream cf(dir + "/config.json");
  std::stringstream ss;
  ss << cf.rdbuf();
  ExperimentConfig back = parse_config(ss.str());
  CHECK(back.to_json() == cfg.to_json());
}

TEST_CASE("scenario rate tables") {
  json r = scenario_rates(find_scenario("granular-periodic"));
  CHECK(r["w2"]["lambda_w2_squared"].get<double>() == Catch::Approx(2.0).epsilon(1e-9));
  CHECK(r["gamma"]["lambda_conservative"].get<double>() == Catch::Approx(1.0).epsilon(1e-9));
  CHECK(r["gamma"]["rates_disagree"].get<bool>());
  CHECK(r["entropy"].contains("phi_one_period"));
  CHECK(r["entropy"].contains("decay_constant_one_period"));

  json dw = scenario_rates(find_scenario("doublewell-periodic"));
  CHECK(dw.contains("psi_example31"));
  CHECK(dw["psi_example31"]["c1"].get<double>() <
        dw["psi_example31"]["c2"].get<double>());
  CHECK(dw["wpsi"].contains("lambda"));
  CHECK(dw["wpsi"].contains("lambda_example_display"));

  json nd = scenario_rates(find_scenario("nondissipative-periodic"));
  CHECK(nd.contains("psi_eigen"));
  CHECK(nd["psi_eigen"]["D1"].get<double>() > 0.0);
  CHECK(nd["wpsiv"].contains("lambda"));
  CHECK(nd["wpsiv"].contains("long_range_branch_min"));
  CHECK(nd["wpsiv"].contains("short_range_branch_min"));
}
