#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmv {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct GeometryError : Error {
  using Error::Error;
};
struct ScenarioError : Error {
  using Error::Error;
};
struct SimulationError : Error {
  using Error::Error;
};
struct CostError : Error {
  using Error::Error;
};
struct CatalogError : Error {
  using Error::Error;
};
struct FitError : Error {
  using Error::Error;
};

constexpr double kPi = 3.14159265358979323846;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double dist2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline bool all_finite(std::span<const double> a) {
  for (double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

/// A scalar function of time with period t0.  Built-in scenarios use closed
/// forms (constant / sinusoidal); user-supplied scenarios tabulate one period
/// on a uniform grid with linear interpolation and periodic wrap.
class TimeProfile {
 public:
  enum class Kind { Constant, Sine, Table, Function };

  TimeProfile() : kind_(Kind::Constant), t0_(1.0), base_(0.0) {}

  static TimeProfile constant(double c) {
    TimeProfile p;
    p.kind_ = Kind::Constant;
    p.base_ = c;
    return p;
  }

  // base + amp * sin(2*pi*t/t0 + phase)
  static TimeProfile sine(double base, double amp, double t0, double phase = 0.0) {
    if (t0 <= 0.0) throw ConfigError("TimeProfile::sine: period must be > 0");
    TimeProfile p;
    p.kind_ = Kind::Sine;
    p.t0_ = t0;
    p.base_ = base;
    p.amp_ = amp;
    p.phase_ = phase;
    return p;
  }

  // values[i] at t = i*t0/values.size(), wrapped periodically, linear interp.
  static TimeProfile table(double t0, std::vector<double> values) {
    if (t0 <= 0.0) throw ConfigError("TimeProfile::table: period must be > 0");
    if (values.size() < 2) throw ConfigError("TimeProfile::table: need at least 2 samples");
    TimeProfile p;
    p.kind_ = Kind::Table;
    p.t0_ = t0;
    p.values_ = std::move(values);
    return p;
  }

  static TimeProfile function(double t0, std::function<double(double)> f) {
    if (t0 <= 0.0) throw ConfigError("TimeProfile::function: period must be > 0");
    TimeProfile p;
    p.kind_ = Kind::Function;
    p.t0_ = t0;
    p.fn_ = std::move(f);
    return p;
  }

  double operator()(double t) const {
    switch (kind_) {
      case Kind::Constant:
        return base_;
      case Kind::Sine: {
        const double u = phase_fraction(t);
        return base_ + amp_ * std::sin(2.0 * kPi * u + phase_);
      }
      case Kind::Table: {
        const double u = phase_fraction(t) * static_cast<double>(values_.size());
        const std::size_t i = std::min(static_cast<std::size_t>(u), values_.size() - 1);
        const double frac = u - static_cast<double>(i);
        const double v0 = values_[i];
        const double v1 = values_[(i + 1) % values_.size()];
        return v0 + frac * (v1 - v0);
      }
      case Kind::Function:
        return fn_(t);
    }
    return base_;
  }

  double period() const { return t0_; }
  Kind kind() const { return kind_; }
  double base() const { return base_; }
  double amplitude() const { return amp_; }
  const std::vector<double>& samples() const { return values_; }

 private:
  double phase_fraction(double t) const {
    double u = std::fmod(t, t0_) / t0_;
    if (u < 0.0) u += 1.0;
    return u;
  }

  Kind kind_;
  double t0_ = 1.0;
  double base_ = 0.0;
  double amp_ = 0.0;
  double phase_ = 0.0;
  std::vector<double> values_;
  std::function<double(double)> fn_;
};

/// Periodic trapezoid rule over one full period (spectrally accurate for
/// smooth periodic integrands).
inline double integrate_period(const std::function<double(double)>& f, double t0, int n = 4096) {
  if (n < 2) throw ConfigError("integrate_period: need n >= 2");
  const double h = t0 / static_cast<double>(n);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += f(h * static_cast<double>(i));
  return s * h;
}

inline double integrate_period(const TimeProfile& p, double t0, int n = 4096) {
  return integrate_period([&](double t) { return p(t); }, t0, n);
}

/// Cumulative trapezoid of samples f_i at uniform spacing h; out[0] = 0.
inline void cumulative_trapezoid(std::span<const double> f, double h, std::span<double> out) {
  out[0] = 0.0;
  for (std::size_t i = 1; i < f.size(); ++i)
    out[i] = out[i - 1] + 0.5 * h * (f[i - 1] + f[i]);
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

inline LinearFit least_squares(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw FitError("least_squares: need >= 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw FitError("least_squares: degenerate abscissae");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - (fit.intercept + fit.slope * x[i]);
    ss_res += r * r;
  }
  fit.r2 = (syy == 0.0) ? 1.0 : 1.0 - ss_res / syy;
  return fit;
}

}  // namespace pmv
