#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmv/coefficients.hpp"
#include "pmv/core.hpp"
#include "pmv/engine.hpp"
#include "pmv/rates.hpp"
#include "pmv/transport.hpp"

namespace pmv {

using nlohmann::json;

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Decay fitting
// ---------------------------------------------------------------------------

struct FitResult {
  double rate = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Ordinary least squares of log d_n against n for n >= burn_in;
/// rate = -slope. Zeros must be filtered upstream (degenerate pass).
inline FitResult fit_decay(std::span<const double> d, int burn_in) {
  if (burn_in < 0) throw FitError("fit_decay: burn_in must be >= 0");
  std::vector<double> xs, ys;
  for (std::size_t i = static_cast<std::size_t>(burn_in); i < d.size(); ++i) {
    if (!(d[i] > 0.0))
      throw FitError("fit_decay: nonpositive distance at period " + std::to_string(i));
    xs.push_back(static_cast<double>(i));
    ys.push_back(std::log(d[i]));
  }
  if (xs.size() < 3) throw FitError("fit_decay: need at least 3 points after burn-in");
  const LinearFit f = least_squares(xs, ys);
  return {-f.slope, f.intercept, f.r2};
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct CostConfig {
  std::string family = "power";  // power | example31 | eigen
  int p = 2;
  double theta1 = 1.0, theta2 = 1.0, R = 1.0, tol = 1e-12, r_max = 25.0;
  double d0 = 0.0, l = 0.5 * kPi;
  double beta = 0.1;
};

struct FixedPointConfig {
  double eps = 0.05;
  int consecutive = 3;
  int max_periods = 256;
};

struct ExperimentConfig {
  json scenario_spec = "ou-periodic";
  std::string metric = "w2";
  SimConfig sim;
  FixedPointConfig fixed_point;
  int burn_in = 2;
  CostConfig cost;
  int knn_k = 5;
  bool force_exact = false;
  // "coupled": the test chain and the invariant copy share increments, so the
  // measured distance realizes the synchronous-coupling upper bound and decays
  // without an empirical same-law floor. "independent" evolves the invariant
  // copy on its own stream (honest floor at the finite-N resolution).
  std::string invariant_copy = "coupled";
  std::string output_dir;

  json to_json() const {
    json j;
    j["scenario"] = scenario_spec;
    j["metric"] = metric;
    j["invariant_copy"] = invariant_copy;
    j["sim"] = {{"n", sim.n},
                {"steps_per_period", sim.steps_per_period},
                {"periods", sim.periods},
                {"seed", sim.seed},
                {"workers", sim.workers},
                {"subsample", sim.subsample}};
    j["fixed_point"] = {{"eps", fixed_point.eps},
                        {"consecutive", fixed_point.consecutive},
                        {"max_periods", fixed_point.max_periods}};
    j["burn_in"] = burn_in;
    j["cost"] = {{"family", cost.family}, {"p", cost.p},       {"theta1", cost.theta1},
                 {"theta2", cost.theta2}, {"R", cost.R},       {"tol", cost.tol},
                 {"r_max", cost.r_max},   {"d0", cost.d0},     {"l", cost.l},
                 {"beta", cost.beta}};
    j["knn_k"] = knn_k;
    j["force_exact"] = force_exact;
    j["output_dir"] = output_dir;
    return j;
  }
};

namespace detail {

struct Validator {
  std::vector<std::string> errors;

  void expect_keys(const json& j, const std::string& path,
                   std::initializer_list<const char*> allowed) {
    if (!j.is_object()) return;
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool known = false;
      for (const char* k : allowed)
        if (it.key() == k) known = true;
      if (!known) errors.push_back(path + "/" + it.key() + ": unknown key");
    }
  }

  template <typename T>
  void read(const json& j, const std::string& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      errors.push_back(path + "/" + key + ": wrong type");
    }
  }
};

inline TimeProfile profile_from_json(const json& j, double t0, const std::string& path,
                                     std::vector<std::string>& errors) {
  if (j.is_number()) return TimeProfile::constant(j.get<double>());
  if (j.is_object()) {
    const std::string kind = j.value("kind", "");
    if (kind == "sine") {
      return TimeProfile::sine(j.value("base", 0.0), j.value("amp", 0.0), t0,
                               j.value("phase", 0.0));
    }
    if (kind == "table") {
      if (!j.contains("values") || !j.at("values").is_array() || j.at("values").size() < 2) {
        errors.push_back(path + ": table profile needs a 'values' array (>= 2 entries)");
        return TimeProfile::constant(0.0);
      }
      return TimeProfile::table(t0, j.at("values").get<std::vector<double>>());
    }
    errors.push_back(path + ": profile kind must be 'sine' or 'table'");
    return TimeProfile::constant(0.0);
  }
  errors.push_back(path + ": expected a number or a profile object");
  return TimeProfile::constant(0.0);
}

inline ConvexDomain domain_from_json(const json& j, int dim, const std::string& path,
                                     std::vector<std::string>& errors) {
  const std::string kind = j.value("kind", "whole");
  try {
    if (kind == "whole") return ConvexDomain::whole_space(dim);
    if (kind == "ball")
      return ConvexDomain::ball(j.at("center").get<std::vector<double>>(),
                                j.at("radius").get<double>());
    if (kind == "box")
      return ConvexDomain::box(j.at("lower").get<std::vector<double>>(),
                               j.at("upper").get<std::vector<double>>());
    if (kind == "halfspaces")
      return ConvexDomain::halfspaces(dim,
                                      j.at("normals").get<std::vector<std::vector<double>>>(),
                                      j.at("offsets").get<std::vector<double>>());
    errors.push_back(path + "/kind: unknown domain kind '" + kind + "'");
  } catch (const std::exception& e) {
    errors.push_back(path + ": " + e.what());
  }
  return ConvexDomain::whole_space(dim);
}

inline InitialLaw init_from_json(const json& j, const std::string& path,
                                 std::vector<std::string>& errors) {
  const std::string kind = j.value("kind", "point");
  try {
    if (kind == "point") return InitialLaw::point(j.at("at").get<std::vector<double>>());
    if (kind == "gaussian")
      return InitialLaw::gaussian(j.at("mean").get<std::vector<double>>(),
                                  j.value("stddev", 1.0));
    if (kind == "uniform") return InitialLaw::uniform_in_domain();
    errors.push_back(path + "/kind: unknown initial-law kind '" + kind + "'");
  } catch (const std::exception& e) {
    errors.push_back(path + ": " + e.what());
  }
  return InitialLaw::point({0.0});
}

}  // namespace detail

/// Builds a scenario from a catalog name or an inline definition. Inline
/// scenarios pick one of the built-in drift forms and parameterize it; the
/// toolkit never evaluates user-supplied code.
inline Scenario resolve_scenario(const json& spec) {
  if (spec.is_string()) return find_scenario(spec.get<std::string>());
  if (!spec.is_object())
    throw ConfigError("scenario: expected a catalog name or an inline object");

  std::vector<std::string> errors;
  detail::Validator v;
  v.expect_keys(spec, "scenario",
                {"form", "dim", "period", "a", "sigma", "eps", "domain", "init"});
  errors = std::move(v.errors);

  const std::string form = spec.value("form", "");
  int dim = spec.value("dim", 1);
  double t0 = spec.value("period", 1.0);
  if (t0 <= 0.0) {
    errors.push_back("scenario/period: must be > 0");
    t0 = 1.0;  // placeholder so the remaining checks can still run
  }
  if (dim < 1) {
    errors.push_back("scenario/dim: must be >= 1");
    dim = 1;
  }

  TimeProfile a = spec.contains("a")
                      ? detail::profile_from_json(spec.at("a"), t0, "scenario/a", errors)
                      : TimeProfile::sine(1.0, 0.5, t0);
  ConvexDomain domain = spec.contains("domain")
                            ? detail::domain_from_json(spec.at("domain"), dim,
                                                       "scenario/domain", errors)
                            : ConvexDomain::whole_space(dim);
  InitialLaw init = spec.contains("init")
                        ? detail::init_from_json(spec.at("init"), "scenario/init", errors)
                        : InitialLaw::point(std::vector<double>(dim, 1.0));
  const double eps = spec.value("eps", 0.1);

  if (!errors.empty()) {
    std::string msg = "scenario definition invalid:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }

  if (form == "ou")
    return make_ou_scenario(dim, a, spec.value("sigma", std::sqrt(2.0)), init, domain);
  if (form == "granular") return make_granular_scenario(dim, a, eps, init, domain);
  if (form == "doublewell") {
    if (!domain.is_whole_space())
      throw ConfigError("scenario: doublewell form supports the whole space only");
    if (dim != 1) throw ConfigError("scenario: doublewell form is one-dimensional");
    return make_double_well_scenario(a, eps, init);
  }
  if (form == "nondissipative") {
    if (!domain.is_whole_space())
      throw ConfigError("scenario: nondissipative form supports the whole space only");
    return make_nondissipative_scenario(dim, a, eps, init);
  }
  throw ConfigError("scenario/form: expected ou | granular | doublewell | nondissipative");
}

/// Parses and validates an experiment configuration. Parse errors carry line
/// and column; schema violations are collected and reported together.
inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("config parse error at line " + std::to_string(line) + ", column " +
                      std::to_string(col) + ": " + e.what());
  }

  detail::Validator v;
  v.expect_keys(j, "", {"scenario", "metric", "sim", "fixed_point", "burn_in", "cost", "knn_k",
                        "force_exact", "invariant_copy", "output_dir"});
  ExperimentConfig cfg;
  if (j.contains("scenario")) cfg.scenario_spec = j.at("scenario");
  v.read(j, "", "metric", cfg.metric);
  v.read(j, "", "invariant_copy", cfg.invariant_copy);
  if (j.contains("sim")) {
    const json& s = j.at("sim");
    v.expect_keys(s, "sim", {"n", "steps_per_period", "periods", "seed", "workers",
                             "subsample", "dt"});
    v.read(s, "sim", "n", cfg.sim.n);
    v.read(s, "sim", "steps_per_period", cfg.sim.steps_per_period);
    v.read(s, "sim", "periods", cfg.sim.periods);
    v.read(s, "sim", "seed", cfg.sim.seed);
    v.read(s, "sim", "workers", cfg.sim.workers);
    v.read(s, "sim", "subsample", cfg.sim.subsample);
  }
  if (j.contains("fixed_point")) {
    const json& f = j.at("fixed_point");
    v.expect_keys(f, "fixed_point", {"eps", "consecutive", "max_periods"});
    v.read(f, "fixed_point", "eps", cfg.fixed_point.eps);
    v.read(f, "fixed_point", "consecutive", cfg.fixed_point.consecutive);
    v.read(f, "fixed_point", "max_periods", cfg.fixed_point.max_periods);
  }
  v.read(j, "", "burn_in", cfg.burn_in);
  if (j.contains("cost")) {
    const json& c = j.at("cost");
    v.expect_keys(c, "cost", {"family", "p", "theta1", "theta2", "R", "tol", "r_max", "d0",
                              "l", "beta"});
    v.read(c, "cost", "family", cfg.cost.family);
    v.read(c, "cost", "p", cfg.cost.p);
    v.read(c, "cost", "theta1", cfg.cost.theta1);
    v.read(c, "cost", "theta2", cfg.cost.theta2);
    v.read(c, "cost", "R", cfg.cost.R);
    v.read(c, "cost", "tol", cfg.cost.tol);
    v.read(c, "cost", "r_max", cfg.cost.r_max);
    v.read(c, "cost", "d0", cfg.cost.d0);
    v.read(c, "cost", "l", cfg.cost.l);
    v.read(c, "cost", "beta", cfg.cost.beta);
  }
  v.read(j, "", "knn_k", cfg.knn_k);
  v.read(j, "", "force_exact", cfg.force_exact);
  v.read(j, "", "output_dir", cfg.output_dir);

  static const std::vector<std::string> kMetrics = {"w2",    "w1",      "wpsi",
                                                    "wpsiv", "entropy", "ratio"};
  if (std::find(kMetrics.begin(), kMetrics.end(), cfg.metric) == kMetrics.end()) {
    std::string valid;
    for (const auto& m : kMetrics) valid += " " + m;
    v.errors.push_back("/metric: unknown metric '" + cfg.metric + "'; valid:" + valid);
  }
  if ((cfg.metric == "wpsi" || cfg.metric == "wpsiv" || cfg.metric == "ratio") &&
      cfg.cost.family == "power")
    v.errors.push_back("/cost: metric '" + cfg.metric +
                       "' requires a psi cost family (example31 or eigen)");
  if (cfg.invariant_copy != "coupled" && cfg.invariant_copy != "independent")
    v.errors.push_back("/invariant_copy: expected 'coupled' or 'independent'");
  if (cfg.burn_in < 0) v.errors.push_back("/burn_in: must be >= 0");
  if (cfg.knn_k < 1) v.errors.push_back("/knn_k: must be >= 1");
  if (cfg.fixed_point.eps <= 0) v.errors.push_back("/fixed_point/eps: must be > 0");
  if (cfg.fixed_point.consecutive < 1)
    v.errors.push_back("/fixed_point/consecutive: must be >= 1");
  if (cfg.sim.n < 1) v.errors.push_back("/sim/n: must be >= 1");
  if (cfg.sim.steps_per_period < 1) v.errors.push_back("/sim/steps_per_period: must be >= 1");
  if (cfg.sim.periods < 0) v.errors.push_back("/sim/periods: must be >= 0");
  if (cfg.sim.workers < 1) v.errors.push_back("/sim/workers: must be >= 1");

  if (!v.errors.empty()) {
    std::string msg = "config invalid (" + std::to_string(v.errors.size()) + " problems):";
    for (const auto& e : v.errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  if (cfg.output_dir.empty()) {
    const char* env = std::getenv("PMV_OUTPUT_DIR");
    cfg.output_dir = env ? env : "pmv-out";
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Rate report for a scenario (the `rates` CLI subcommand)
// ---------------------------------------------------------------------------

inline json scenario_rates(const Scenario& scn, const CostConfig& cost_cfg = {}) {
  const auto& c = scn.coeffs.constants;
  const double t0 = scn.coeffs.t0;
  json out;
  out["scenario"] = scn.name;
  out["period"] = t0;

  if (c.K1 && c.K2) {
    const double lam = rate_w2(*c.K1, *c.K2, t0);
    out["w2"]["lambda_w2_squared"] = lam;
    out["w2"]["w2_factor_per_period"] = std::exp(-0.5 * lam);
  }
  if (c.gamma) {
    const double ig = integrate_period(*c.gamma, t0);
    out["gamma"]["integral"] = ig;
    if (c.K1 && c.K2) {
      // The stated per-period rate for this family is int gamma, while the
      // contraction constants imply 2 int gamma for squared W2; report both.
      out["gamma"]["lambda_conservative"] = ig;
      out["gamma"]["lambda_from_constants"] = rate_w2(*c.K1, *c.K2, t0);
      out["gamma"]["rates_disagree"] =
          std::abs(rate_w2(*c.K1, *c.K2, t0) - 2.0 * ig) < 1e-9 && ig > 0.0;
    }
  }
  if (c.kappa1 && c.kappa2 && c.lambda) {
    double k1 = -std::numeric_limits<double>::infinity(), k2 = k1, lb = k1;
    for (int i = 0; i <= 256; ++i) {
      const double t = t0 * i / 256.0;
      k1 = std::max(k1, (*c.kappa1)(t));
      k2 = std::max(k2, (*c.kappa2)(t));
      lb = std::max(lb, (*c.lambda)(t));
    }
    out["entropy"]["phi_one_period"] = entropy_constant_phi(lb, k1, k2, t0);
    out["entropy"]["kappa1_sup"] = k1;
    out["entropy"]["kappa2_sup"] = k2;
    out["entropy"]["lambda_sup"] = lb;
  }
  if (c.gamma && c.A) {
    double lb = 0.0;
    if (c.lambda)
      for (int i = 0; i <= 256; ++i) lb = std::max(lb, (*c.lambda)(t0 * i / 256.0));
    out["entropy"]["decay_constant_one_period"] =
        entropy_decay_constant(*c.gamma, *c.A, lb, 0.0, 0.0, t0);
  }
  if (c.theta1 && c.theta2 && c.R && c.alpha && c.eps) {
    auto psi = build_psi_example31(*c.theta1, *c.theta2, *c.R, cost_cfg.tol, cost_cfg.r_max);
    out["psi_example31"] = {{"c1", psi.c1()},
                            {"c2", psi.c2()},
                            {"c_psi", psi.c_psi()},
                            {"c_monotone", psi.c_monotone()}};
    const TimeProfile alpha = *c.alpha;
    const double eps = *c.eps;
    const double c1v = psi.c1(), c2v = psi.c2();
    const TimeProfile kappa =
        TimeProfile::function(t0, [alpha, c2v](double t) { return 2.0 * alpha(t) / c2v; });
    const TimeProfile theta = TimeProfile::constant(2.0 * eps / c1v);
    out["wpsi"]["lambda"] = rate_wpsi(kappa, theta, psi, t0);
    // the companion display in the source example drops the |psi'|_inf factor
    // on the interaction term; reported for comparison, not used as gate
    out["wpsi"]["lambda_example_display"] =
        2.0 * (integrate_period(alpha, t0) / c2v - eps * t0 / c1v);
  }
  if (c.D0 && c.l && c.beta && c.alpha && scn.lyapunov && scn.lyapunov_grad) {
    auto eig = build_psi_eigen(*c.D0, *c.l);
    out["psi_eigen"] = {{"D0", *c.D0}, {"l", *c.l}, {"D1", eig.D1},
                        {"c_psi", eig.psi.c_psi()}};
    RateInputs in;
    in.K0 = c.K0 ? *c.K0 : TimeProfile::constant(0.0);
    in.K1 = c.K1 ? *c.K1 : TimeProfile::constant(0.0);
    in.alpha = *c.alpha;
    in.theta = c.theta ? *c.theta : TimeProfile::constant(0.0);
    const double D1 = eig.D1;
    const TimeProfile alpha = *c.alpha;
    in.u_l = TimeProfile::function(t0, [alpha, D1](double t) { return D1 * alpha(t); });
    in.beta = *c.beta;
    in.l = *c.l;
    in.V = scn.lyapunov;
    in.gradV = scn.lyapunov_grad;
    in.radial = scn.lyapunov_radial;
    in.dim = scn.coeffs.dim;
    in.box_radius = 4.0 * (*c.l);
    auto res = rate_wpsiv(in, eig.psi, t0, 64);
    out["wpsiv"]["lambda"] = res.lambda;
    out["wpsiv"]["boundary_warning"] = res.boundary_warning;
    double lr = std::numeric_limits<double>::infinity(), sr = lr;
    for (std::size_t i = 0; i < res.t.size(); ++i) {
      lr = std::min(lr, res.long_range[i]);
      sr = std::min(sr, res.short_range[i]);
    }
    out["wpsiv"]["long_range_branch_min"] = lr;
    out["wpsiv"]["short_range_branch_min"] = sr;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment orchestration
// ---------------------------------------------------------------------------

struct ErgodicityReport {
  std::string scenario;
  std::string metric;
  double lambda_predicted = 0.0;
  json prediction_details;
  std::vector<double> distances;
  int burn_in = 0;
  double fitted_rate = 0.0;
  double fitted_intercept = 0.0;
  double r2 = 0.0;
  std::string verdict = "inconclusive";
  double rate_tolerance_factor = 0.75;
  double r2_threshold = 0.9;
  std::uint64_t seed = 0;
  int n = 0;
  double dt = 0.0;
  std::string version = kVersion;
  int fixed_point_periods = 0;
  bool fixed_point_converged = false;
  std::vector<double> fixed_point_trace;

  json to_json() const {
    json j;
    j["scenario"] = scenario;
    j["metric"] = metric;
    j["predicted"] = {{"lambda", lambda_predicted}, {"details", prediction_details}};
    j["distances"] = distances;
    j["burn_in"] = burn_in;
    j["fit"] = {{"rate", fitted_rate}, {"intercept", fitted_intercept}, {"r2", r2}};
    j["verdict"] = verdict;
    j["tolerance_policy"] = {{"rate_factor", rate_tolerance_factor},
                             {"r2_threshold", r2_threshold}};
    j["environment"] = {{"seed", seed}, {"n", n}, {"dt", dt}, {"version", version}};
    j["fixed_point"] = {{"periods", fixed_point_periods},
                        {"converged", fixed_point_converged},
                        {"trace", fixed_point_trace}};
    return j;
  }
};

namespace detail {

inline std::shared_ptr<const TabulatedCostFunction> build_cost_table(const CostConfig& c) {
  if (c.family == "example31")
    return std::make_shared<TabulatedCostFunction>(
        build_psi_example31(c.theta1, c.theta2, c.R, c.tol, c.r_max));
  if (c.family == "eigen")
    return std::make_shared<TabulatedCostFunction>(build_psi_eigen(c.d0, c.l).psi);
  return nullptr;
}

struct MetricEval {
  std::function<double(const Ensemble&, const Ensemble&)> fn;
  bool squared = false;
  bool surrogate = false;
};

inline MetricEval make_metric(const ExperimentConfig& cfg, const Scenario& scn,
                              std::shared_ptr<const TabulatedCostFunction> psi) {
  MetricEval m;
  const int n = cfg.sim.n;
  const int d = scn.coeffs.dim;
  const bool exact_ok = d == 1 || n <= 4096 || cfg.force_exact;

  if (cfg.metric == "w2" || cfg.metric == "w1") {
    const int p = (cfg.metric == "w2") ? 2 : 1;
    m.squared = (p == 2);  // the dissipative contraction estimate controls squared W2
    if (exact_ok) {
      m.fn = [p, squared = m.squared](const Ensemble& a, const Ensemble& b) {
        const double v =
            ot_exact(a, b, p == 2 ? CostSpec::w2() : CostSpec::w1()).distance;
        return squared ? v * v : v;
      };
    } else {
      m.surrogate = true;
      const std::uint64_t seed = cfg.sim.seed;
      m.fn = [p, seed, squared = m.squared](const Ensemble& a, const Ensemble& b) {
        NoisePolicy noise(seed ^ 0x51edda7au);
        const double v = ot_sliced(a, b, p, 256, noise);
        return squared ? v * v : v;
      };
    }
    return m;
  }
  if (cfg.metric == "wpsi") {
    m.fn = [psi](const Ensemble& a, const Ensemble& b) {
      return ot_exact(a, b, CostSpec::psi_cost(psi)).distance;
    };
    return m;
  }
  if (cfg.metric == "wpsiv") {
    if (!scn.lyapunov) throw ConfigError("metric wpsiv needs a scenario Lyapunov function");
    const double beta = cfg.cost.beta;
    auto V = scn.lyapunov;
    m.fn = [psi, V, beta](const Ensemble& a, const Ensemble& b) {
      return ot_exact(a, b, CostSpec::psi_weighted(psi, V, beta)).distance;
    };
    return m;
  }
  if (cfg.metric == "ratio") {
    if (!scn.lyapunov) throw ConfigError("metric ratio needs a scenario Lyapunov function");
    const double beta = cfg.cost.beta;
    auto V = scn.lyapunov;
    m.fn = [psi, V, beta](const Ensemble& a, const Ensemble& b) {
      return ratio_quasidistance(a, b, *psi, V, beta);
    };
    return m;
  }
  if (cfg.metric == "entropy") {
    const int k = cfg.knn_k;
    m.fn = [k](const Ensemble& a, const Ensemble& b) {
      return relative_entropy_knn(a, b, k);
    };
    return m;
  }
  throw ConfigError("unknown metric " + cfg.metric);
}

/// Predicted rate for the fitted quantity, plus diagnostics.
inline std::pair<double, json> predict_rate(const ExperimentConfig& cfg, const Scenario& scn,
                                            std::shared_ptr<const TabulatedCostFunction> psi) {
  const auto& c = scn.coeffs.constants;
  const double t0 = scn.coeffs.t0;
  json details;
  double lambda = 0.0;
  if (cfg.metric == "w2" || cfg.metric == "w1") {
    if (c.K1 && c.K2) {
      const double lam2 = rate_w2(*c.K1, *c.K2, t0);
      details["lambda_w2_squared"] = lam2;
      lambda = (cfg.metric == "w2") ? lam2 : 0.5 * lam2;
      if (cfg.metric == "w1") details["w1_rate_from_w2_bound"] = true;
      if (c.gamma) {
        const double ig = integrate_period(*c.gamma, t0);
        details["integral_gamma"] = ig;
        details["rates_disagree"] = std::abs(lam2 - 2.0 * ig) < 1e-9 && ig > 0.0;
      }
    } else {
      details["note"] = "scenario declares no (K1, K2); no prediction";
    }
    return {lambda, details};
  }
  if (cfg.metric == "wpsi") {
    if (c.alpha && c.eps && psi) {
      const TimeProfile alpha = *c.alpha;
      const double c2v = psi->c2(), c1v = psi->c1();
      const double eps = *c.eps;
      const TimeProfile kappa =
          TimeProfile::function(t0, [alpha, c2v](double t) { return 2.0 * alpha(t) / c2v; });
      const TimeProfile theta = TimeProfile::constant(2.0 * eps / c1v);
      lambda = rate_wpsi(kappa, theta, *psi, t0);
      details["c1"] = c1v;
      details["c2"] = c2v;
      details["c_monotone"] = psi->c_monotone();
      details["lambda_example_display"] =
          2.0 * (integrate_period(alpha, t0) / c2v - eps * t0 / c1v);
    } else {
      details["note"] = "scenario lacks (alpha, eps) declarations; no prediction";
    }
    return {lambda, details};
  }
  if (cfg.metric == "wpsiv") {
    if (c.alpha && c.D0 && c.l && scn.lyapunov && scn.lyapunov_grad && psi) {
      RateInputs in;
      in.K0 = c.K0 ? *c.K0 : TimeProfile::constant(0.0);
      in.K1 = c.K1 ? *c.K1 : TimeProfile::constant(0.0);
      in.alpha = *c.alpha;
      in.theta = c.theta ? *c.theta : TimeProfile::constant(0.0);
      in.beta = cfg.cost.beta;
      in.l = *c.l;
      in.V = scn.lyapunov;
      in.gradV = scn.lyapunov_grad;
      in.radial = scn.lyapunov_radial;
      in.dim = scn.coeffs.dim;
      in.box_radius = 4.0 * (*c.l);
      const double D1 = psi->params().count("D1") ? psi->params().at("D1") : 0.0;
      const TimeProfile alpha = *c.alpha;
      in.u_l = TimeProfile::function(t0, [alpha, D1](double t) { return D1 * alpha(t); });
      auto res = rate_wpsiv(in, *psi, t0, 64);
      lambda = res.lambda;
      details["boundary_warning"] = res.boundary_warning;
      details["long_range_branch"] = res.long_range;
      details["short_range_branch"] = res.short_range;
    } else {
      details["note"] = "scenario lacks Lyapunov declarations; no prediction";
    }
    return {lambda, details};
  }
  details["note"] = "no rate prediction for metric " + cfg.metric;
  return {0.0, details};
}

}  // namespace detail

struct ExperimentRun {
  ErgodicityReport report;
  std::vector<Ensemble> test_snapshots;
  std::vector<Ensemble> invariant_snapshots;
};

/// Full experiment: approximate the periodic invariant measure, evolve the
/// test law period by period, measure the selected distance at equal phase,
/// fit the decay and compare against the predicted rate. The invariant copy
/// is evolved with an independent noise stream so the measured distances are
/// not artificially coupled.
inline ExperimentRun run_experiment_full(const ExperimentConfig& cfg) {
  Scenario scn = resolve_scenario(cfg.scenario_spec);
  cfg.sim.validate();
  auto psi = detail::build_cost_table(cfg.cost);
  auto metric = detail::make_metric(cfg, scn, psi);

  ExperimentRun run;
  ErgodicityReport& rep = run.report;
  rep.scenario = scn.name;
  rep.metric = cfg.metric + (metric.squared ? "-squared" : "");
  rep.burn_in = cfg.burn_in;
  rep.seed = cfg.sim.seed;
  rep.n = cfg.sim.n;
  rep.dt = cfg.sim.dt(scn.coeffs.t0);
  auto [lambda, details] = detail::predict_rate(cfg, scn, psi);
  if (metric.surrogate) details["sliced_surrogate"] = true;
  rep.lambda_predicted = lambda;
  rep.prediction_details = details;

  auto fp = periodic_fixed_point(scn, cfg.sim, cfg.fixed_point.eps, cfg.fixed_point.consecutive,
                                 cfg.fixed_point.max_periods);
  rep.fixed_point_periods = fp.periods_used;
  rep.fixed_point_converged = fp.converged;
  rep.fixed_point_trace = fp.trace;
  if (!fp.converged) {
    rep.verdict = "inconclusive";
    return run;
  }

  // The entropy estimator needs independent samples on both sides.
  const bool coupled = cfg.invariant_copy == "coupled" && cfg.metric != "entropy";
  rep.prediction_details["invariant_copy"] = coupled ? "coupled" : "independent";

  std::vector<Ensemble> inv_snaps, test_snaps;
  if (coupled) {
    // Both chains run on a dedicated step-index window of one stream: shared
    // increments give the synchronous-coupling upper bound with no overlap
    // with the warm-up noise.
    constexpr std::uint32_t kMeasurementWindow = 1u << 31;
    NoisePolicy noise(cfg.sim.seed);
    Ensemble test0 = sample_initial(scn, cfg.sim, noise);
    test0.steps_done = kMeasurementWindow;
    Ensemble inv0 = fp.ensemble;
    inv0.steps_done = kMeasurementWindow;
    test_snaps = evolve_periods(std::move(test0), scn, cfg.sim, cfg.sim.periods, noise);
    inv_snaps = evolve_periods(std::move(inv0), scn, cfg.sim, cfg.sim.periods, noise);
  } else {
    // Invariant copy continues on a decorrelated stream.
    SimConfig inv_cfg = cfg.sim;
    inv_cfg.seed = cfg.sim.seed ^ 0xa5a5a5a5deadbeefull;
    NoisePolicy inv_noise(inv_cfg.seed);
    Ensemble inv_start = fp.ensemble;
    inv_snaps = evolve_periods(std::move(inv_start), scn, inv_cfg, cfg.sim.periods, inv_noise);
    test_snaps = simulate(scn, cfg.sim);
  }

  rep.distances.resize(test_snaps.size());
  for (std::size_t i = 0; i < test_snaps.size(); ++i)
    rep.distances[i] = metric.fn(test_snaps[i], inv_snaps[i]);
  run.test_snapshots = std::move(test_snaps);
  run.invariant_snapshots = std::move(inv_snaps);

  bool degenerate = true;
  for (std::size_t i = static_cast<std::size_t>(cfg.burn_in); i < rep.distances.size(); ++i)
    if (rep.distances[i] > 1e-12) degenerate = false;

  if (cfg.metric == "entropy") {
    int drops = 0, steps = 0;
    for (std::size_t i = static_cast<std::size_t>(cfg.burn_in) + 1; i < rep.distances.size();
         ++i) {
      ++steps;
      if (rep.distances[i] <= rep.distances[i - 1]) ++drops;
    }
    rep.prediction_details["trend_nonincreasing"] = drops;
    rep.prediction_details["trend_steps"] = steps;
    std::vector<double> positive;
    for (std::size_t i = static_cast<std::size_t>(cfg.burn_in); i < rep.distances.size(); ++i)
      if (rep.distances[i] > 0) positive.push_back(rep.distances[i]);
    if (positive.size() >= 3) {
      try {
        auto fit = fit_decay(positive, 0);
        rep.fitted_rate = fit.rate;
        rep.fitted_intercept = fit.intercept;
        rep.r2 = fit.r2;
      } catch (const FitError&) {
      }
    }
    rep.verdict = (steps > 0 && drops * 10 >= steps * 8) ? "pass-trend" : "fail-trend";
    return run;
  }

  if (degenerate) {
    rep.verdict = "pass-degenerate";
    rep.fitted_rate = 0.0;
    rep.r2 = 1.0;
    return run;
  }

  auto fit = fit_decay(rep.distances, cfg.burn_in);
  rep.fitted_rate = fit.rate;
  rep.fitted_intercept = fit.intercept;
  rep.r2 = fit.r2;

  if (cfg.metric == "ratio") {
    rep.verdict = "report-only";
  } else if (rep.lambda_predicted <= 1e-9) {
    rep.verdict = "no-contraction-predicted";
  } else if (rep.fitted_rate >= rep.rate_tolerance_factor * rep.lambda_predicted &&
             rep.r2 >= rep.r2_threshold) {
    rep.verdict = "pass";
  } else {
    rep.verdict = "fail";
  }
  return run;
}

inline ErgodicityReport run_experiment(const ExperimentConfig& cfg) {
  return run_experiment_full(cfg).report;
}

/// Writes report.json, distances.csv, config.json and per-period snapshots.
inline void emit_report(const ErgodicityReport& rep, const ExperimentConfig& cfg,
                        const std::vector<Ensemble>& test_snaps,
                        const std::vector<Ensemble>& invariant_snaps) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  fs::create_directories(cfg.output_dir + "/snapshots");
  {
    std::ofstream f(cfg.output_dir + "/report.json", std::ios::binary);
    f << rep.to_json().dump(2) << "\n";
  }
  {
    std::ofstream f(cfg.output_dir + "/config.json", std::ios::binary);
    f << cfg.to_json().dump(2) << "\n";
  }
  {
    std::ofstream f(cfg.output_dir + "/distances.csv", std::ios::binary);
    std::string line = "period,distance\n";
    f << line;
    for (std::size_t i = 0; i < rep.distances.size(); ++i) {
      line = std::to_string(i);
      line += ',';
      detail::append_double(line, rep.distances[i]);
      line += '\n';
      f << line;
    }
  }
  if (!test_snaps.empty())
    write_snapshots_csv(cfg.output_dir + "/snapshots/test.csv", test_snaps);
  if (!invariant_snaps.empty())
    write_snapshots_csv(cfg.output_dir + "/snapshots/invariant.csv", invariant_snaps);
}

inline ErgodicityReport run_and_emit(const ExperimentConfig& cfg) {
  ExperimentRun run = run_experiment_full(cfg);
  emit_report(run.report, cfg, run.test_snapshots, run.invariant_snapshots);
  return run.report;
}

}  // namespace pmv
