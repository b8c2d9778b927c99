#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "pmv/noise.hpp"

using namespace pmv;

TEST_CASE("gaussian draws are a pure function of the key") {
  NoisePolicy a(42), b(42), c(43);
  const double z1 = a.gaussian(7, 123, StreamPurpose::Simulation, 2);
  const double z2 = b.gaussian(7, 123, StreamPurpose::Simulation, 2);
  const double z3 = c.gaussian(7, 123, StreamPurpose::Simulation, 2);
  CHECK(z1 == z2);
  CHECK(z1 != z3);
  // independent of call order
  b.gaussian(9, 5, StreamPurpose::Simulation, 0);
  CHECK(b.gaussian(7, 123, StreamPurpose::Simulation, 2) == z1);
}

TEST_CASE("streams with distinct purposes or coordinates differ") {
  NoisePolicy n(1);
  std::set<double> vals;
  vals.insert(n.gaussian(0, 0, StreamPurpose::Simulation, 0));
  vals.insert(n.gaussian(0, 0, StreamPurpose::Simulation, 1));
  vals.insert(n.gaussian(0, 0, StreamPurpose::Init, 0));
  vals.insert(n.gaussian(1, 0, StreamPurpose::Simulation, 0));
  vals.insert(n.gaussian(0, 1, StreamPurpose::Simulation, 0));
  CHECK(vals.size() == 5);
}

TEST_CASE("gaussian stream has standard moments") {
  NoisePolicy n(2024);
  const int N = 200000;
  double s1 = 0, s2 = 0, s3 = 0, s4 = 0;
  for (int i = 0; i < N; ++i) {
    const double z = n.gaussian(static_cast<std::uint32_t>(i), 0, StreamPurpose::Simulation, 0);
    s1 += z;
    s2 += z * z;
    s3 += z * z * z;
    s4 += z * z * z * z;
  }
  s1 /= N;
  s2 /= N;
  s3 /= N;
  s4 /= N;
  CHECK(std::abs(s1) < 4.0 / std::sqrt(static_cast<double>(N)));
  CHECK(s2 == Catch::Approx(1.0).margin(4.0 * std::sqrt(2.0 / N)));
  CHECK(std::abs(s3) < 4.0 * std::sqrt(15.0 / N));
  CHECK(s4 == Catch::Approx(3.0).margin(4.0 * std::sqrt(96.0 / N)));
}

TEST_CASE("uniform stream stays in (0,1] and is equidistributed") {
  NoisePolicy n(7);
  const int N = 100000;
  double mean = 0;
  for (int i = 0; i < N; ++i) {
    const double u = n.uniform(static_cast<std::uint32_t>(i), 0, StreamPurpose::Init, 0);
    REQUIRE(u > 0.0);
    REQUIRE(u <= 1.0);
    mean += u;
  }
  mean /= N;
  CHECK(mean == Catch::Approx(0.5).margin(4.0 / std::sqrt(12.0 * N)));
}

TEST_CASE("key map reattaches streams to particles") {
  NoisePolicy n(5);
  NoisePolicy mapped(5);
  mapped.set_key_map({3, 0, 1});
  CHECK(mapped.gaussian(mapped.key_for(0), 9, StreamPurpose::Simulation, 0) ==
        n.gaussian(3, 9, StreamPurpose::Simulation, 0));
  CHECK(mapped.gaussian(mapped.key_for(2), 9, StreamPurpose::Simulation, 0) ==
        n.gaussian(1, 9, StreamPurpose::Simulation, 0));
}
