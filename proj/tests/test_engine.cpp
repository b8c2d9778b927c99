#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "pmv/engine.hpp"
#include "pmv/transport.hpp"

using namespace pmv;

namespace {

// High-accuracy RK4 oracle for the per-coordinate moment system of the
// linear-drift scenarios: m' = -a(t) m,  v' = -2 a(t) v + sigma^2.
struct Moments {
  double m, v;
};

Moments integrate_moments(const TimeProfile& a, double sigma2, Moments y0, double t_end,
                          int steps = 200000) {
  double m = y0.m, v = y0.v, t = 0.0;
  const double h = t_end / steps;
  auto fm = [&](double tt, double mm) { return -a(tt) * mm; };
  auto fv = [&](double tt, double vv) { return -2.0 * a(tt) * vv + sigma2; };
  for (int i = 0; i < steps; ++i) {
    const double k1m = fm(t, m), k1v = fv(t, v);
    const double k2m = fm(t + h / 2, m + h / 2 * k1m), k2v = fv(t + h / 2, v + h / 2 * k1v);
    const double k3m = fm(t + h / 2, m + h / 2 * k2m), k3v = fv(t + h / 2, v + h / 2 * k2v);
    const double k4m = fm(t + h, m + h * k3m), k4v = fv(t + h, v + h * k3v);
    m += h / 6 * (k1m + 2 * k2m + 2 * k3m + k4m);
    v += h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v);
    t += h;
  }
  return {m, v};
}

double sample_mean(const Ensemble& e) { return e.mean()[0]; }

double sample_var(const Ensemble& e) {
  const double m = sample_mean(e);
  double s = 0.0;
  for (int i = 0; i < e.n; ++i) {
    const double d = e.positions[static_cast<std::size_t>(i)] - m;
    s += d * d;
  }
  return s / (e.n - 1);
}

Scenario pure_drift_ou(const TimeProfile& a) {
  return make_ou_scenario(1, a, 0.0, InitialLaw::point({1.0}), ConvexDomain::whole_space(1));
}

}  // namespace

TEST_CASE("step: no drift, no diffusion leaves positions, advances time") {
  Scenario s = make_ou_scenario(1, TimeProfile::constant(0.0), 0.0, InitialLaw::point({2.5}),
                                ConvexDomain::whole_space(1));
  SimConfig cfg;
  cfg.n = 4;
  NoisePolicy noise(1);
  Ensemble e = sample_initial(s, cfg, noise);
  auto before = e.positions;
  step(e, s.coeffs, s.domain, 0.1, noise, 0);
  CHECK(e.positions == before);
  CHECK(e.t == Catch::Approx(0.1));
  CHECK(e.steps_done == 1);
}

TEST_CASE("step: explicit Euler arithmetic for the linear drift") {
  Scenario s = pure_drift_ou(TimeProfile::constant(1.0));
  SimConfig cfg;
  cfg.n = 1;
  NoisePolicy noise(1);
  Ensemble e = sample_initial(s, cfg, noise);
  step(e, s.coeffs, s.domain, 0.1, noise, 0);
  CHECK(e.positions[0] == Catch::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("step: projection accumulates the reflection diagnostic") {
  // half line x >= 0, constant drift -10, no diffusion
  PeriodicCoefficients c;
  c.t0 = 1.0;
  c.dim = 1;
  c.noise_dim = 1;
  c.drift = [](double, std::span<const double>, const MeasureView&, std::span<const double>,
               std::span<double> out) { out[0] = -10.0; };
  c.iso_sigma = [](double) { return 0.0; };
  c.sigma = [](double, std::span<const double>, std::span<double> out) { out[0] = 0.0; };
  Scenario s;
  s.coeffs = c;
  s.domain = ConvexDomain::halfspaces(1, {{-1.0}}, {0.0});  // -x <= 0
  s.init = InitialLaw::point({0.05});
  SimConfig cfg;
  cfg.n = 1;
  NoisePolicy noise(1);
  Ensemble e = sample_initial(s, cfg, noise);
  step(e, s.coeffs, s.domain, 0.1, noise, 0);
  CHECK(e.positions[0] == Catch::Approx(0.0).margin(1e-12));
  CHECK(e.reflection[0] == Catch::Approx(0.95).epsilon(1e-12));
}

TEST_CASE("step: blow-up is a hard error naming the particle") {
  PeriodicCoefficients c;
  c.t0 = 1.0;
  c.dim = 1;
  c.noise_dim = 1;
  c.drift = [](double, std::span<const double> x, const MeasureView&, std::span<const double>,
               std::span<double> out) { out[0] = std::exp(x[0]) * x[0] * 1e300; };
  c.iso_sigma = [](double) { return 0.0; };
  c.sigma = [](double, std::span<const double>, std::span<double> out) { out[0] = 0.0; };
  Scenario s;
  s.coeffs = c;
  s.domain = ConvexDomain::whole_space(1);
  s.init = InitialLaw::point({700.0});
  SimConfig cfg;
  cfg.n = 2;
  NoisePolicy noise(1);
  Ensemble e = sample_initial(s, cfg, noise);
  CHECK_THROWS_AS(step(e, s.coeffs, s.domain, 1.0, noise, 0), SimulationError);
}

TEST_CASE("simulate: zero periods returns only the initial ensemble") {
  Scenario s = find_scenario("ou-periodic");
  SimConfig cfg;
  cfg.n = 16;
  cfg.periods = 0;
  auto snaps = simulate(s, cfg);
  REQUIRE(snaps.size() == 1);
  CHECK(snaps[0].t == 0.0);
}

TEST_CASE("simulate: snapshot moments track the moment-ODE oracle") {
  Scenario s = find_scenario("ou-periodic");  // point mass at 3, a = 1 + 0.5 sin(2 pi t)
  const TimeProfile a = *s.coeffs.constants.gamma;
  SimConfig cfg;
  cfg.n = 10000;
  cfg.steps_per_period = 1000;
  cfg.periods = 5;
  cfg.seed = 17;
  auto snaps = simulate(s, cfg);
  for (int p = 1; p <= cfg.periods; ++p) {
    const Moments ref = integrate_moments(a, 2.0, {3.0, 0.0}, static_cast<double>(p));
    const double mhat = sample_mean(snaps[static_cast<std::size_t>(p)]);
    const double vhat = sample_var(snaps[static_cast<std::size_t>(p)]);
    const double se_m = std::sqrt(ref.v / cfg.n);
    const double se_v = ref.v * std::sqrt(2.0 / (cfg.n - 1));
    // 4 CLT standard errors plus the O(dt) Euler bias allowance
    CHECK(mhat == Catch::Approx(ref.m).margin(4.0 * se_m + 2e-3));
    CHECK(vhat == Catch::Approx(ref.v).margin(4.0 * se_v + 2e-3 * ref.v));
  }
}

TEST_CASE("simulate: reflecting scenarios stay confined") {
  Scenario s = find_scenario("ou-ball-reflect");
  SimConfig cfg;
  cfg.n = 256;
  cfg.steps_per_period = 200;
  cfg.periods = 3;
  cfg.seed = 5;
  auto snaps = simulate(s, cfg);
  double total_reflection = 0.0;
  for (const auto& e : snaps) {
    for (int i = 0; i < e.n; ++i) REQUIRE(s.domain.contains(e.particle(i)));
    total_reflection = std::accumulate(e.reflection.begin(), e.reflection.end(), 0.0);
  }
  CHECK(total_reflection > 0.0);  // the boundary was actually hit
}

TEST_CASE("determinism: identical runs are bit-identical across worker counts") {
  Scenario s = find_scenario("granular-periodic");
  for (int workers : {2, 8}) {
    SimConfig a;
    a.n = 512;
    a.steps_per_period = 100;
    a.periods = 2;
    a.seed = 99;
    a.workers = 1;
    SimConfig b = a;
    b.workers = workers;
    auto sa = simulate(s, a);
    auto sb = simulate(s, b);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
      CHECK(sa[i].positions == sb[i].positions);
      CHECK(sa[i].reflection == sb[i].reflection);
    }
  }
}

TEST_CASE("coupled_simulate: shared noise, identical starts, identical paths") {
  Scenario s = find_scenario("ou-periodic");
  SimConfig cfg;
  cfg.n = 64;
  cfg.steps_per_period = 50;
  cfg.periods = 2;
  NoisePolicy noise(3);
  Ensemble e0 = sample_initial(s, cfg, noise);
  auto pairs = coupled_simulate(e0, e0, s, cfg);
  for (const auto& [a, b] : pairs) CHECK(a.positions == b.positions);
}

TEST_CASE("coupled_simulate: noiseless linear contraction matches the scalar recursion") {
  const TimeProfile a = TimeProfile::sine(1.0, 0.5, 1.0);
  Scenario s = pure_drift_ou(a);
  SimConfig cfg;
  cfg.n = 8;
  cfg.steps_per_period = 400;
  cfg.periods = 3;
  NoisePolicy noise(1);
  Ensemble ea = sample_initial(s, cfg, noise);
  Ensemble eb = ea;
  for (double& x : eb.positions) x += 1.0;
  auto pairs = coupled_simulate(ea, eb, s, cfg);

  const double dt = cfg.dt(s.coeffs.t0);
  double factor = 1.0;
  for (int k = 0; k < cfg.steps_per_period; ++k) factor *= 1.0 - a(k * dt) * dt;

  for (int p = 1; p <= cfg.periods; ++p) {
    const auto& [xa, xb] = pairs[static_cast<std::size_t>(p)];
    const auto& [pa, pb] = pairs[static_cast<std::size_t>(p) - 1];
    for (int i = 0; i < cfg.n; ++i) {
      const double now = xb.positions[static_cast<std::size_t>(i)] -
                         xa.positions[static_cast<std::size_t>(i)];
      const double before = pb.positions[static_cast<std::size_t>(i)] -
                            pa.positions[static_cast<std::size_t>(i)];
      CHECK(now == Catch::Approx(before * factor).epsilon(1e-12));
    }
    // one-period contraction never beats exp(-int a) from below
    CHECK(std::abs(factor) <= std::exp(-1.0) + 1e-12);
  }
}

TEST_CASE("coupled_simulate: granular at eps = 0 decouples to independent linear dynamics") {
  const TimeProfile a = TimeProfile::sine(1.0, 0.5, 1.0);
  Scenario g = make_granular_scenario(1, a, 0.0, InitialLaw::point({1.0}),
                                      ConvexDomain::whole_space(1));
  Scenario ou = make_ou_scenario(1, a, std::sqrt(2.0), InitialLaw::point({1.0}),
                                 ConvexDomain::whole_space(1));
  SimConfig cfg;
  cfg.n = 32;
  cfg.steps_per_period = 100;
  cfg.periods = 1;
  cfg.seed = 21;
  auto sg = simulate(g, cfg);
  auto so = simulate(ou, cfg);
  CHECK(sg.back().positions == so.back().positions);
  CHECK_THROWS_AS([&] {
    Ensemble small = sg.front();
    small.n = 16;
    small.positions.resize(16);
    small.reflection.resize(16);
    return coupled_simulate(sg.front(), small, g, cfg);
  }(), ConfigError);
}

TEST_CASE("periodic_fixed_point: frozen dynamics converge immediately") {
  Scenario s = make_ou_scenario(1, TimeProfile::constant(0.0), 0.0, InitialLaw::point({2.0}),
                                ConvexDomain::whole_space(1));
  SimConfig cfg;
  cfg.n = 32;
  cfg.steps_per_period = 10;
  auto res = periodic_fixed_point(s, cfg, 1e-9, 1);
  CHECK(res.converged);
  CHECK(res.periods_used == 1);
  CHECK(res.trace.back() < 1e-9);
}

TEST_CASE("periodic_fixed_point: linear scenario variance matches the one-period map") {
  Scenario s = find_scenario("ou-periodic");
  const TimeProfile a = *s.coeffs.constants.gamma;
  SimConfig cfg;
  cfg.n = 8192;
  cfg.steps_per_period = 500;
  cfg.seed = 11;
  const double eps_fix = 0.03;
  auto res = periodic_fixed_point(s, cfg, eps_fix, 3);
  REQUIRE(res.converged);

  // fixed point of the affine one-period variance map v -> rho v + c
  const double c = integrate_moments(a, 2.0, {0.0, 0.0}, 1.0).v;
  const double rho = integrate_moments(a, 2.0, {0.0, 1.0}, 1.0).v - c;
  const double v_star = c / (1.0 - rho);

  const double vhat = sample_var(res.ensemble);
  const double lambda = 2.0;  // -int(K1+K2) for this scenario
  const double convergence_slack =
      2.5 * std::sqrt(v_star) * eps_fix / (1.0 - std::exp(-lambda / 2.0));
  const double band = 4.0 * v_star * std::sqrt(2.0 / (cfg.n - 1)) + convergence_slack + 2e-3;
  CHECK(vhat == Catch::Approx(v_star).margin(band));
}

TEST_CASE("periodic_fixed_point: stopping rule is reflected in the trace") {
  Scenario s = find_scenario("granular-periodic");
  SimConfig cfg;
  cfg.n = 2048;
  cfg.steps_per_period = 250;
  cfg.seed = 4;
  auto res = periodic_fixed_point(s, cfg, 0.08, 2);
  REQUIRE(res.converged);
  CHECK(res.trace.back() < 0.08);
  CHECK(res.trace[res.trace.size() - 2] < 0.08);
}

TEST_CASE("relabeling initial particles relabels the trajectory (rank-keyed noise)") {
  Scenario s = find_scenario("granular-periodic");
  const int N = 64;
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::vector<double> base(N);
  for (auto& v : base) v = u(rng);

  auto ranks = [](const std::vector<double>& xs) {
    std::vector<std::uint32_t> idx(xs.size()), rk(xs.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
    for (std::uint32_t r = 0; r < idx.size(); ++r) rk[idx[r]] = r;
    return rk;
  };

  std::vector<std::uint32_t> perm(N);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);

  auto make_ens = [&](const std::vector<double>& xs) {
    Ensemble e;
    e.n = N;
    e.dim = 1;
    e.positions = xs;
    e.reflection.assign(N, 0.0);
    return e;
  };
  std::vector<double> permuted(N);
  for (int i = 0; i < N; ++i) permuted[static_cast<std::size_t>(i)] = base[perm[i]];

  Ensemble ea = make_ens(base);
  Ensemble eb = make_ens(permuted);
  NoisePolicy na(77), nb(77);
  na.set_key_map(ranks(base));
  nb.set_key_map(ranks(permuted));

  const double dt = 0.01;
  for (int k = 0; k < 50; ++k) {
    step(ea, s.coeffs, s.domain, dt, na, static_cast<std::uint32_t>(k));
    step(eb, s.coeffs, s.domain, dt, nb, static_cast<std::uint32_t>(k));
  }
  auto sa = ea.positions, sb = eb.positions;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  for (int i = 0; i < N; ++i)
    CHECK(sa[static_cast<std::size_t>(i)] ==
          Catch::Approx(sb[static_cast<std::size_t>(i)]).margin(1e-12));
  CHECK(sample_mean(ea) == Catch::Approx(sample_mean(eb)).margin(1e-12));
  CHECK(sample_var(ea) == Catch::Approx(sample_var(eb)).margin(1e-12));
}

TEST_CASE("snapshot persistence round-trips through the binary format") {
  Scenario s = find_scenario("granular-box-reflect");
  SimConfig cfg;
  cfg.n = 32;
  cfg.steps_per_period = 20;
  cfg.periods = 2;
  auto snaps = simulate(s, cfg);
  const std::string dir = std::filesystem::temp_directory_path() / "pmv_engine_test";
  std::filesystem::create_directories(dir);
  write_snapshots_binary(dir + "/s.bin", snaps);
  auto back = read_snapshots_binary(dir + "/s.bin");
  REQUIRE(back.size() == snaps.size());
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    CHECK(back[i].positions == snaps[i].positions);
    CHECK(back[i].reflection == snaps[i].reflection);
    CHECK(back[i].t == snaps[i].t);
  }
  write_snapshots_csv(dir + "/s.csv", snaps);
  std::ifstream f(dir + "/s.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "period,particle,x_1,x_2,reflection_cum");
}
