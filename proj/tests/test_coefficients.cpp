#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "pmv/coefficients.hpp"
#include "pmv/core.hpp"

using namespace pmv;

namespace {

struct ViewFixture {
  std::vector<double> flat;
  std::vector<double> mean;
  int n = 0, d = 0;

  explicit ViewFixture(const std::vector<std::vector<double>>& pts) {
    n = static_cast<int>(pts.size());
    d = static_cast<int>(pts.front().size());
    mean.assign(d, 0.0);
    for (const auto& p : pts) {
      flat.insert(flat.end(), p.begin(), p.end());
      for (int k = 0; k < d; ++k) mean[k] += p[k];
    }
    for (double& v : mean) v /= n;
  }

  MeasureView view() const { return MeasureView(flat, n, d, mean); }
};

}  // namespace

TEST_CASE("ou drift substitutes directly") {
  Scenario s = make_ou_scenario(2, TimeProfile::sine(1.0, 0.5, 1.0), std::sqrt(2.0),
                                InitialLaw::point({0.0, 0.0}), ConvexDomain::whole_space(2));
  ViewFixture fx({{0.0, 0.0}});
  auto b = eval_drift(s.coeffs, 0.0, std::vector<double>{2.0, 0.0}, fx.view());
  CHECK(b[0] == Catch::Approx(-2.0));
  CHECK(b[1] == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("mean-field drift vanishes against the interaction at the mean") {
  Scenario s = make_granular_scenario(2, TimeProfile::constant(1.0), 0.25,
                                      InitialLaw::point({0.0, 0.0}),
                                      ConvexDomain::whole_space(2));
  ViewFixture fx({{1.0, 2.0}, {3.0, -2.0}, {-1.0, 3.0}});
  const std::vector<double> mbar = fx.mean;
  auto b = eval_drift(s.coeffs, 0.3, mbar, fx.view());
  CHECK(b[0] == Catch::Approx(-mbar[0]));
  CHECK(b[1] == Catch::Approx(-mbar[1]));
}

TEST_CASE("nondissipative drift without interaction is the scaled base field") {
  Scenario s = make_nondissipative_scenario(2, TimeProfile::constant(2.0), 0.0,
                                            InitialLaw::point({0.0, 0.0}));
  ViewFixture fx({{0.5, 0.5}, {-0.5, 0.0}});
  auto b = eval_drift(s.coeffs, 0.0, std::vector<double>{3.0, 0.0}, fx.view());
  CHECK(b[0] == Catch::Approx(-6.0));
  CHECK(b[1] == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("nondissipative base drift is C1 at the unit sphere and expansive inside") {
  Scenario s = make_nondissipative_scenario(1, TimeProfile::constant(1.0), 0.0,
                                            InitialLaw::point({0.0}));
  ViewFixture fx(std::vector<std::vector<double>>{{0.0}});
  auto near0 = eval_drift(s.coeffs, 0.0, std::vector<double>{0.01}, fx.view());
  CHECK(near0[0] > 0.0);  // locally expansive at the origin
  auto inside = eval_drift(s.coeffs, 0.0, std::vector<double>{0.999}, fx.view());
  auto outside = eval_drift(s.coeffs, 0.0, std::vector<double>{1.001}, fx.view());
  CHECK(inside[0] == Catch::Approx(-0.999).margin(2e-5));
  CHECK(outside[0] == Catch::Approx(-1.001));
}

TEST_CASE("sigma evaluations") {
  Scenario g = make_granular_scenario(2, TimeProfile::sine(1.0, 0.5, 1.0), 0.1,
                                      InitialLaw::point({0.0, 0.0}),
                                      ConvexDomain::whole_space(2));
  auto sig = eval_sigma(g.coeffs, 0.37, std::vector<double>{1.0, -2.0});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(sig[static_cast<std::size_t>(i) * 2 + j] ==
            Catch::Approx(i == j ? std::sqrt(2.0) : 0.0).margin(1e-15));

  Scenario dw = make_double_well_scenario(TimeProfile::constant(4.0), 0.0,
                                          InitialLaw::point({0.0}));
  auto sig2 = eval_sigma(dw.coeffs, 1.23, std::vector<double>{0.5});
  CHECK(sig2[0] == Catch::Approx(2.0));
}

TEST_CASE("built-in evaluators are periodic on a grid") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (const auto& s : builtin_scenarios()) {
    const double t0 = s.coeffs.t0;
    const int d = s.coeffs.dim;
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 5; ++i) {
      std::vector<double> p(d);
      for (auto& v : p) v = u(rng);
      pts.push_back(p);
    }
    ViewFixture fx(pts);
    for (int i = 0; i < 64; ++i) {
      const double t = t0 * (static_cast<double>(i) + 0.123) / 64.0;
      std::vector<double> x(d);
      for (auto& v : x) v = u(rng);
      auto b0 = eval_drift(s.coeffs, t, x, fx.view());
      auto b1 = eval_drift(s.coeffs, t + t0, x, fx.view());
      auto s0 = eval_sigma(s.coeffs, t, x);
      auto s1 = eval_sigma(s.coeffs, t + t0, x);
      for (int k = 0; k < d; ++k)
        CHECK(b1[k] == Catch::Approx(b0[k]).margin(5e-14 * (1.0 + std::abs(b0[k]))));
      for (std::size_t k = 0; k < s0.size(); ++k)
        CHECK(s1[k] == Catch::Approx(s0[k]).margin(5e-14 * (1.0 + std::abs(s0[k]))));
    }
  }
}

TEST_CASE("catalog") {
  Scenario ou = find_scenario("ou-periodic");
  CHECK(ou.oracle_tag == "gaussian-moment-ode");

  Scenario g = find_scenario("granular-periodic");
  REQUIRE(g.coeffs.constants.gamma.has_value());
  const double ig = integrate_period(*g.coeffs.constants.gamma, g.coeffs.t0);
  CHECK(ig > 0.0);
  CHECK(ig == Catch::Approx(1.0).epsilon(1e-9));

  CHECK_THROWS_WITH(find_scenario("no-such-scenario"),
                    Catch::Matchers::ContainsSubstring("ou-periodic") &&
                        Catch::Matchers::ContainsSubstring("granular-periodic"));

  const auto names = {"ou-periodic",          "granular-periodic", "doublewell-periodic",
                      "nondissipative-periodic", "ou-ball-reflect",   "granular-box-reflect"};
  for (const auto* n : names) CHECK_NOTHROW(find_scenario(n));
}

TEST_CASE("granular declared constants match the contraction formulas") {
  Scenario g = find_scenario("granular-periodic");
  const auto& c = g.coeffs.constants;
  REQUIRE(c.gamma.has_value());
  REQUIRE(c.K1.has_value());
  REQUIRE(c.K2.has_value());
  REQUIRE(c.eps.has_value());
  const double eps = *c.eps;
  for (int i = 0; i <= 64; ++i) {
    const double t = g.coeffs.t0 * i / 64.0;
    const double gamma_t = (*c.gamma)(t);
    CHECK((*c.K1)(t) == Catch::Approx(-2.0 * gamma_t - eps).margin(1e-12));
    CHECK((*c.K2)(t) == Catch::Approx(eps).margin(1e-12));
    CHECK((*c.kappa1)(t) == Catch::Approx(-2.0 * (gamma_t + eps)).margin(1e-12));
    CHECK((*c.kappa2)(t) == Catch::Approx(2.0 * eps).margin(1e-12));
    // Quadratic potentials: Hess(V + W(.,z)) = (a_t + eps) I, so with the
    // declared gamma_t = a_t the convexity bound holds with equality.
    const double hessian = gamma_t + eps;
    const double bound = gamma_t + eps;
    CHECK(hessian - bound == Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("non-finite drift raises a scenario error") {
  PeriodicCoefficients bad;
  bad.t0 = 1.0;
  bad.dim = 1;
  bad.noise_dim = 1;
  bad.drift = [](double, std::span<const double>, const MeasureView&, std::span<const double>,
                 std::span<double> out) { out[0] = std::nan(""); };
  bad.sigma = [](double, std::span<const double>, std::span<double> out) { out[0] = 1.0; };
  ViewFixture fx(std::vector<std::vector<double>>{{0.0}});
  CHECK_THROWS_AS(eval_drift(bad, 0.0, std::vector<double>{1.0}, fx.view()), ScenarioError);
}

TEST_CASE("pairwise averages honor the subsample") {
  ViewFixture fx({{1.0}, {2.0}, {3.0}, {4.0}});
  std::vector<std::uint32_t> sub{0, 3};
  MeasureView v(fx.flat, fx.n, fx.d, fx.mean, sub);
  std::vector<double> out(1, 0.0);
  v.pair_average(
      std::vector<double>{0.0},
      [](std::span<const double>, std::span<const double> y, std::span<double> acc) {
        acc[0] += y[0];
      },
      out);
  CHECK(out[0] == Catch::Approx(2.5));  // mean of particles 0 and 3
}
