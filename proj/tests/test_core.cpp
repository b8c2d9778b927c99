#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pmv/core.hpp"

using namespace pmv;

TEST_CASE("time profiles are periodic") {
  const double t0 = 1.0;
  auto sine = TimeProfile::sine(1.0, 0.5, t0);
  auto table = TimeProfile::table(t0, {0.0, 1.0, 0.5, -0.25});
  for (int i = 0; i < 64; ++i) {
    const double t = 7.3 * i / 64.0;
    CHECK(sine(t + t0) == Catch::Approx(sine(t)).margin(5e-14));
    CHECK(table(t + t0) == Catch::Approx(table(t)).margin(5e-14));
  }
}

TEST_CASE("table profile interpolates linearly") {
  auto p = TimeProfile::table(2.0, {0.0, 1.0});
  CHECK(p(0.0) == Catch::Approx(0.0));
  CHECK(p(0.5) == Catch::Approx(0.5));
  CHECK(p(1.0) == Catch::Approx(1.0));
  // wraps back toward the first sample
  CHECK(p(1.5) == Catch::Approx(0.5));
}

TEST_CASE("periodic quadrature is spectrally accurate") {
  auto p = TimeProfile::sine(2.0, 0.7, 1.0);
  const double coarse = integrate_period(p, 1.0, 128);
  const double fine = integrate_period(p, 1.0, 256);
  CHECK(coarse == Catch::Approx(2.0).epsilon(1e-12));
  CHECK(std::abs(fine - coarse) < 1e-6 * std::abs(coarse));
}

TEST_CASE("least squares recovers an exact line") {
  std::vector<double> x{0, 1, 2, 3, 4}, y;
  for (double v : x) y.push_back(3.0 - 0.7 * v);
  auto fit = least_squares(x, y);
  CHECK(fit.slope == Catch::Approx(-0.7).epsilon(1e-12));
  CHECK(fit.intercept == Catch::Approx(3.0).epsilon(1e-12));
  CHECK(fit.r2 == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("profile constructors validate periods") {
  CHECK_THROWS_AS(TimeProfile::sine(0.0, 1.0, 0.0), ConfigError);
  CHECK_THROWS_AS(TimeProfile::table(1.0, {1.0}), ConfigError);
}
