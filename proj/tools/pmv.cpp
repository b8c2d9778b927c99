// Command-line front end: scenario catalog, simulation, distances, rate
// tables, cost-function construction and full ergodicity experiments.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "pmv/harness.hpp"

namespace {

using nlohmann::json;

pmv::Ensemble read_snapshot_any(const std::string& path, int period) {
  std::vector<pmv::Ensemble> snaps;
  if (path.size() > 4 && path.substr(path.size() - 4) == ".bin") {
    snaps = pmv::read_snapshots_binary(path);
  } else {
    // CSV in the snapshot layout: period,particle,x_1..x_d,reflection_cum
    std::ifstream f(path);
    if (!f) throw pmv::ConfigError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw pmv::ConfigError(path + ": empty snapshot file");
    int d = 0;
    {
      std::stringstream hs(line);
      std::string col;
      while (std::getline(hs, col, ','))
        if (col.rfind("x_", 0) == 0) ++d;
    }
    if (d == 0) throw pmv::ConfigError(path + ": no coordinate columns in header");
    std::map<int, std::vector<double>> by_period;
    std::map<int, std::vector<double>> refl;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::stringstream ls(line);
      std::string col;
      std::getline(ls, col, ',');
      const int p = std::stoi(col);
      std::getline(ls, col, ',');  // particle index (rows are ordered)
      auto& pos = by_period[p];
      for (int k = 0; k < d; ++k) {
        std::getline(ls, col, ',');
        pos.push_back(std::stod(col));
      }
      std::getline(ls, col, ',');
      refl[p].push_back(std::stod(col));
    }
    for (auto& [p, pos] : by_period) {
      pmv::Ensemble e;
      e.dim = d;
      e.n = static_cast<int>(pos.size()) / d;
      e.positions = std::move(pos);
      e.reflection = std::move(refl[p]);
      snaps.push_back(std::move(e));
    }
  }
  if (snaps.empty()) throw pmv::ConfigError(path + ": no snapshots");
  if (period < 0) return snaps.back();
  if (period >= static_cast<int>(snaps.size()))
    throw pmv::ConfigError(path + ": period " + std::to_string(period) + " out of range");
  return snaps[static_cast<std::size_t>(period)];
}

std::string default_out_dir() {
  const char* env = std::getenv("PMV_OUTPUT_DIR");
  return env ? env : "pmv-out";
}

struct SimOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> workers, n;
  std::optional<double> dt;

  void attach(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "noise seed");
    cmd->add_option("--workers", workers, "worker threads for particle updates");
    cmd->add_option("--n", n, "particle count");
    cmd->add_option("--dt", dt, "step size (rounded to an exact divisor of the period)");
  }

  void apply(pmv::SimConfig& sim, double t0) const {
    if (seed) sim.seed = *seed;
    if (workers) sim.workers = *workers;
    if (n) sim.n = *n;
    if (dt) {
      const int spp = std::max(1, static_cast<int>(std::llround(t0 / *dt)));
      sim.steps_per_period = spp;
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"periodic mean-field SDE simulator and ergodicity toolkit"};
  app.require_subcommand(1);

  // --- catalog -------------------------------------------------------------
  auto* cmd_catalog = app.add_subcommand("catalog", "list built-in scenarios");

  // --- simulate ------------------------------------------------------------
  auto* cmd_sim = app.add_subcommand("simulate", "run the particle system and dump snapshots");
  std::string sim_scenario = "ou-periodic";
  std::string sim_out = default_out_dir();
  std::string sim_format = "csv";
  int sim_periods = 12;
  int sim_spp = 1000;
  SimOverrides sim_ovr;
  cmd_sim->add_option("--scenario", sim_scenario, "catalog scenario name");
  cmd_sim->add_option("--periods", sim_periods, "number of periods");
  cmd_sim->add_option("--steps-per-period", sim_spp, "steps per period");
  cmd_sim->add_option("--out", sim_out, "output directory");
  cmd_sim->add_option("--format", sim_format, "snapshot format: csv | bin")
      ->check(CLI::IsMember({"csv", "bin"}));
  sim_ovr.attach(cmd_sim);

  // --- metrics ---------------------------------------------------------------
  auto* cmd_metrics = app.add_subcommand("metrics", "distance between two snapshot files");
  std::string ma, mb, mmetric = "w2", mdump;
  int mperiod_a = -1, mperiod_b = -1, mproj = 256, mk = 5;
  double mbeta = 0.1;
  std::string mfamily = "example31";
  double mtheta1 = 1, mtheta2 = 1, mR = 1, md0 = 0, ml = 0.5 * pmv::kPi;
  cmd_metrics->add_option("--a", ma, "first snapshot file (.csv or .bin)")->required();
  cmd_metrics->add_option("--b", mb, "second snapshot file (.csv or .bin)")->required();
  cmd_metrics->add_option("--period-a", mperiod_a, "snapshot index in --a (default: last)");
  cmd_metrics->add_option("--period-b", mperiod_b, "snapshot index in --b (default: last)");
  cmd_metrics->add_option("--metric", mmetric, "w1 | w2 | sliced-w1 | sliced-w2 | wpsi | entropy")
      ->check(CLI::IsMember({"w1", "w2", "sliced-w1", "sliced-w2", "wpsi", "entropy"}));
  cmd_metrics->add_option("--projections", mproj, "directions for sliced metrics");
  cmd_metrics->add_option("--k", mk, "neighbor count for the entropy estimator");
  cmd_metrics->add_option("--psi-family", mfamily, "example31 | eigen (for wpsi)");
  cmd_metrics->add_option("--theta1", mtheta1, "psi shape parameter");
  cmd_metrics->add_option("--theta2", mtheta2, "psi shape parameter");
  cmd_metrics->add_option("--R", mR, "psi shape parameter");
  cmd_metrics->add_option("--d0", md0, "eigen psi drift coefficient");
  cmd_metrics->add_option("--l", ml, "eigen psi flatten radius");
  cmd_metrics->add_option("--beta", mbeta, "Lyapunov weight strength");
  cmd_metrics->add_option("--dump-cost", mdump, "write the ground-cost matrix CSV here");

  // --- rates -----------------------------------------------------------------
  auto* cmd_rates = app.add_subcommand("rates", "closed-form rate constants for a scenario");
  std::string rates_scenario = "ou-periodic";
  cmd_rates->add_option("--scenario", rates_scenario, "catalog scenario name");

  // --- psi -------------------------------------------------------------------
  auto* cmd_psi = app.add_subcommand("psi", "construct a cost function and print constants");
  std::string psi_family = "example31";
  double ptheta1 = 1, ptheta2 = 1, pR = 1, ptol = 1e-12, prmax = 25, pd0 = 0,
         pl = 0.5 * pmv::kPi;
  std::string psi_table_out;
  cmd_psi->add_option("--family", psi_family, "example31 | eigen")
      ->check(CLI::IsMember({"example31", "eigen"}));
  cmd_psi->add_option("--theta1", ptheta1, "shape parameter");
  cmd_psi->add_option("--theta2", ptheta2, "shape parameter");
  cmd_psi->add_option("--R", pR, "shape parameter");
  cmd_psi->add_option("--tol", ptol, "truncation tolerance");
  cmd_psi->add_option("--r-max", prmax, "tabulation range");
  cmd_psi->add_option("--d0", pd0, "eigen drift coefficient");
  cmd_psi->add_option("--l", pl, "eigen interval length");
  cmd_psi->add_option("--table", psi_table_out, "write (r, psi, psi', psi'') CSV here");

  // --- experiment --------------------------------------------------------------
  auto* cmd_exp = app.add_subcommand("experiment", "predict, simulate, measure, fit, verdict");
  std::string exp_config;
  std::string exp_out;
  SimOverrides exp_ovr;
  cmd_exp->add_option("--config", exp_config, "experiment config (JSON)")->required();
  cmd_exp->add_option("--out", exp_out, "output directory override");
  exp_ovr.attach(cmd_exp);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_catalog->parsed()) {
      for (const auto& s : pmv::builtin_scenarios()) {
        std::cout << s.name << "  [d=" << s.coeffs.dim << ", t0=" << s.coeffs.t0
                  << ", domain: " << s.domain.describe() << ", oracle: " << s.oracle_tag
                  << "]\n    " << s.description << "\n";
      }
      return 0;
    }

    if (cmd_sim->parsed()) {
      pmv::Scenario scn = pmv::find_scenario(sim_scenario);
      pmv::SimConfig cfg;
      cfg.periods = sim_periods;
      cfg.steps_per_period = sim_spp;
      sim_ovr.apply(cfg, scn.coeffs.t0);
      auto snaps = pmv::simulate(scn, cfg);
      std::filesystem::create_directories(sim_out);
      const std::string path =
          sim_out + "/snapshots_" + sim_scenario + (sim_format == "bin" ? ".bin" : ".csv");
      if (sim_format == "bin")
        pmv::write_snapshots_binary(path, snaps);
      else
        pmv::write_snapshots_csv(path, snaps);
      const auto mean = snaps.back().mean();
      std::cout << "wrote " << snaps.size() << " snapshots (n=" << cfg.n
                << ", dt=" << cfg.dt(scn.coeffs.t0) << ") to " << path << "\n";
      std::cout << "final mean:";
      for (double v : mean) std::cout << " " << v;
      std::cout << "\n";
      return 0;
    }

    if (cmd_metrics->parsed()) {
      pmv::Ensemble A = read_snapshot_any(ma, mperiod_a);
      pmv::Ensemble B = read_snapshot_any(mb, mperiod_b);
      json out;
      out["metric"] = mmetric;
      std::shared_ptr<const pmv::TabulatedCostFunction> psi;
      if (mmetric == "wpsi" || !mdump.empty()) {
        if (mfamily == "example31")
          psi = std::make_shared<pmv::TabulatedCostFunction>(
              pmv::build_psi_example31(mtheta1, mtheta2, mR));
        else if (mfamily == "eigen")
          psi = std::make_shared<pmv::TabulatedCostFunction>(pmv::build_psi_eigen(md0, ml).psi);
      }
      if (mmetric == "w1" || mmetric == "w2") {
        auto r = pmv::ot_exact(A, B, mmetric == "w2" ? pmv::CostSpec::w2()
                                                     : pmv::CostSpec::w1());
        out["value"] = r.distance;
        out["solver_iterations"] = r.iterations;
      } else if (mmetric == "sliced-w1" || mmetric == "sliced-w2") {
        pmv::NoisePolicy noise(0x51edda7au);
        out["value"] = pmv::ot_sliced(A, B, mmetric == "sliced-w2" ? 2 : 1, mproj, noise);
        out["projections"] = mproj;
      } else if (mmetric == "wpsi") {
        out["value"] = pmv::ot_exact(A, B, pmv::CostSpec::psi_cost(psi)).distance;
      } else if (mmetric == "entropy") {
        out["value"] = pmv::relative_entropy_knn(A, B, mk);
        out["k"] = mk;
      }
      if (!mdump.empty()) {
        pmv::CostSpec spec = pmv::CostSpec::w2();
        if (psi) spec = pmv::CostSpec::psi_cost(psi);
        pmv::dump_cost_matrix_csv(A, B, spec, mdump);
        out["cost_matrix"] = mdump;
      }
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (cmd_rates->parsed()) {
      pmv::Scenario scn = pmv::find_scenario(rates_scenario);
      std::cout << pmv::scenario_rates(scn).dump(2) << "\n";
      return 0;
    }

    if (cmd_psi->parsed()) {
      pmv::TabulatedCostFunction psi;
      json out;
      if (psi_family == "example31") {
        psi = pmv::build_psi_example31(ptheta1, ptheta2, pR, ptol, prmax);
      } else {
        auto eig = pmv::build_psi_eigen(pd0, pl);
        psi = eig.psi;
        out["D1"] = eig.D1;
      }
      out["family"] = psi_family;
      out["c1"] = psi.c1();
      out["c2"] = psi.c2();
      out["c_psi"] = psi.c_psi();
      out["c_monotone"] = psi.c_monotone();
      out["grid_points"] = psi.size();
      out["grid_max"] = psi.grid_max();
      if (!psi_table_out.empty()) {
        std::ofstream f(psi_table_out, std::ios::binary);
        f << "r,psi,dpsi,ddpsi\n";
        // thin the table to ~4k rows for inspection
        const std::size_t stride = std::max<std::size_t>(1, psi.size() / 4096);
        for (std::size_t i = 0; i < psi.size(); i += stride) {
          f << psi.grid_point(i) << "," << psi.psi_values()[i] << "," << psi.dpsi_values()[i]
            << "," << psi.ddpsi_values()[i] << "\n";
        }
        out["table"] = psi_table_out;
      }
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (cmd_exp->parsed()) {
      pmv::ExperimentConfig cfg = pmv::load_config(exp_config);
      if (!exp_out.empty()) cfg.output_dir = exp_out;
      pmv::Scenario scn = pmv::resolve_scenario(cfg.scenario_spec);
      exp_ovr.apply(cfg.sim, scn.coeffs.t0);
      pmv::ErgodicityReport rep = pmv::run_and_emit(cfg);
      std::cout << "scenario:  " << rep.scenario << "\n"
                << "metric:    " << rep.metric << "\n"
                << "predicted: " << rep.lambda_predicted << "\n"
                << "fitted:    " << rep.fitted_rate << "  (r2=" << rep.r2 << ")\n"
                << "verdict:   " << rep.verdict << "\n"
                << "outputs:   " << cfg.output_dir << "\n";
      return rep.verdict.rfind("fail", 0) == 0 ? 2 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
