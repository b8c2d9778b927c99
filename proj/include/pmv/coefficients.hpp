#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmv/core.hpp"
#include "pmv/geometry.hpp"

namespace pmv {

/// Read-only view of a frozen particle ensemble, sufficient to evaluate
/// mean-field drifts: the ensemble mean, means of point functions, and
/// pairwise interaction averages (1/M) sum_j k(x, X_j). When a subsample is
/// attached, pairwise averages run over the subsample only (documented
/// accuracy knob); point-function means stay exact.
class MeasureView {
 public:
  MeasureView(std::span<const double> flat, int n, int d, std::span<const double> mean,
              std::span<const std::uint32_t> subsample = {})
      : flat_(flat), n_(n), d_(d), mean_(mean), subsample_(subsample) {}

  int n() const { return n_; }
  int dim() const { return d_; }

  std::span<const double> position(int j) const {
    return flat_.subspan(static_cast<std::size_t>(j) * d_, d_);
  }

  std::span<const double> mean() const { return mean_; }

  double mean_of(const std::function<double(std::span<const double>)>& f) const {
    double s = 0.0;
    for (int j = 0; j < n_; ++j) s += f(position(j));
    return s / static_cast<double>(n_);
  }

  /// Accumulates (1/M) sum_j kernel(x, X_j, acc) into out (out is zeroed first).
  void pair_average(
      std::span<const double> x,
      const std::function<void(std::span<const double>, std::span<const double>,
                               std::span<double>)>& kernel,
      std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    if (subsample_.empty()) {
      for (int j = 0; j < n_; ++j) kernel(x, position(j), out);
      for (double& v : out) v /= static_cast<double>(n_);
    } else {
      for (std::uint32_t j : subsample_) kernel(x, position(j), out);
      for (double& v : out) v /= static_cast<double>(subsample_.size());
    }
  }

 private:
  std::span<const double> flat_;
  int n_, d_;
  std::span<const double> mean_;
  std::span<const std::uint32_t> subsample_;
};

using DriftFn = std::function<void(double t, std::span<const double> x, const MeasureView& mu,
                                   std::span<const double> ctx, std::span<double> out)>;
using PrepareFn = std::function<std::vector<double>(double t, const MeasureView& mu)>;
using SigmaFn = std::function<void(double t, std::span<const double> x,
                                   std::span<double> out /* d x m row-major */)>;

/// Declared analytic constants attached to a scenario. The toolkit never
/// differentiates user drifts; whoever defines a scenario states the
/// regularity/dissipativity constants and the rate formulas consume them.
/// Dissipative scenarios use (K1, K2); Lyapunov scenarios reuse (K0, K1) as
/// the Lyapunov drift bounds, matching the usual overloaded naming.
struct DeclaredConstants {
  std::optional<TimeProfile> K0, K1, K2;
  std::optional<TimeProfile> kappa1, kappa2;
  std::optional<TimeProfile> lambda;  // bound on |(sigma sigma^T)^{-1}|
  std::optional<TimeProfile> theta;   // measure-coupling strength
  std::optional<TimeProfile> gamma;   // convexity / curvature profile
  std::optional<TimeProfile> alpha;   // ellipticity scale
  std::optional<TimeProfile> A;       // sup norm of sigma
  std::optional<TimeProfile> u_l;     // short-range cost-ODE rate
  std::optional<double> theta1, theta2, R;  // partial-dissipativity shape
  std::optional<double> D0, l, beta, p;     // Lyapunov-route shape
  std::optional<double> eps;                // interaction strength
  std::optional<double> theta0_lyap, theta1_lyap;  // Lyapunov bound scales
};

struct PeriodicCoefficients {
  double t0 = 1.0;
  int dim = 1;
  int noise_dim = 1;
  DriftFn drift;
  PrepareFn prepare;  // optional once-per-step shared context
  SigmaFn sigma;
  std::function<double(double)> iso_sigma;  // set when sigma(t,x) = s(t) * I
  DeclaredConstants constants;
};

struct InitialLaw {
  enum class Kind { Point, Gaussian, UniformInDomain };
  Kind kind = Kind::Point;
  std::vector<double> mean;
  double stddev = 1.0;

  static InitialLaw point(std::vector<double> at) {
    InitialLaw l;
    l.kind = Kind::Point;
    l.mean = std::move(at);
    return l;
  }
  static InitialLaw gaussian(std::vector<double> mean, double stddev) {
    InitialLaw l;
    l.kind = Kind::Gaussian;
    l.mean = std::move(mean);
    l.stddev = stddev;
    return l;
  }
  static InitialLaw uniform_in_domain() {
    InitialLaw l;
    l.kind = Kind::UniformInDomain;
    return l;
  }
};

struct Scenario {
  std::string name;
  std::string description;
  PeriodicCoefficients coeffs;
  ConvexDomain domain;
  InitialLaw init;
  std::string oracle_tag = "none";
  // Lyapunov data for weighted metrics and rate reports.
  std::function<double(std::span<const double>)> lyapunov;
  std::function<void(std::span<const double>, std::span<double>)> lyapunov_grad;
  bool lyapunov_radial = false;
};

inline std::vector<double> eval_drift(const PeriodicCoefficients& coeffs, double t,
                                      std::span<const double> x, const MeasureView& mu) {
  if (static_cast<int>(x.size()) != coeffs.dim)
    throw ScenarioError("eval_drift: point dimension mismatch");
  if (t < 0.0) throw ScenarioError("eval_drift: t must be >= 0");
  std::vector<double> ctx;
  if (coeffs.prepare) ctx = coeffs.prepare(t, mu);
  std::vector<double> out(coeffs.dim, 0.0);
  coeffs.drift(t, x, mu, ctx, out);
  if (!all_finite(out))
    throw ScenarioError("eval_drift: non-finite drift at t=" + std::to_string(t) +
                        ", |x|=" + std::to_string(norm2(x)));
  return out;
}

inline std::vector<double> eval_sigma(const PeriodicCoefficients& coeffs, double t,
                                      std::span<const double> x) {
  if (static_cast<int>(x.size()) != coeffs.dim)
    throw ScenarioError("eval_sigma: point dimension mismatch");
  std::vector<double> out(static_cast<std::size_t>(coeffs.dim) * coeffs.noise_dim, 0.0);
  coeffs.sigma(t, x, out);
  if (!all_finite(out))
    throw ScenarioError("eval_sigma: non-finite diffusion at t=" + std::to_string(t));
  return out;
}

namespace detail {

inline SigmaFn isotropic_sigma(int dim, std::function<double(double)> scale) {
  return [dim, scale = std::move(scale)](double t, std::span<const double>,
                                         std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    const double s = scale(t);
    for (int i = 0; i < dim; ++i) out[static_cast<std::size_t>(i) * dim + i] = s;
  };
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Built-in scenario factories
// ---------------------------------------------------------------------------

/// Linear drift b_t(x) = -a(t) x with sigma = sigma0 * I. No interaction, so
/// the per-coordinate moments follow m' = -a m, v' = -2 a v + sigma0^2 and a
/// Gaussian moment-ODE oracle is available.
inline Scenario make_ou_scenario(int dim, TimeProfile a, double sigma0, InitialLaw init,
                                 ConvexDomain domain) {
  const double t0 = a.period();
  Scenario s;
  s.name = "ou";
  s.description = "periodic Ornstein-Uhlenbeck: b = -a(t) x, sigma = const";
  s.coeffs.t0 = t0;
  s.coeffs.dim = dim;
  s.coeffs.noise_dim = dim;
  s.coeffs.drift = [a, dim](double t, std::span<const double> x, const MeasureView&,
                            std::span<const double>, std::span<double> out) {
    const double at = a(t);
    for (int i = 0; i < dim; ++i) out[i] = -at * x[i];
  };
  s.coeffs.iso_sigma = [sigma0](double) { return sigma0; };
  s.coeffs.sigma = detail::isotropic_sigma(dim, s.coeffs.iso_sigma);
  auto& c = s.coeffs.constants;
  c.K1 = TimeProfile::function(t0, [a](double t) { return -2.0 * a(t); });
  c.K2 = TimeProfile::constant(0.0);
  c.kappa1 = TimeProfile::constant(0.0);
  c.kappa2 = TimeProfile::constant(0.0);
  c.lambda = TimeProfile::constant(1.0 / (sigma0 * sigma0));
  c.A = TimeProfile::constant(sigma0);
  c.gamma = a;
  c.alpha = TimeProfile::constant(sigma0 * sigma0 / 2.0);
  s.domain = std::move(domain);
  s.init = std::move(init);
  s.oracle_tag = s.domain.is_whole_space() ? "gaussian-moment-ode" : "none";
  return s;
}

/// Mean-field quadratic-potential dynamics: confining V_t(x) = a(t)|x|^2/2,
/// interaction W_t(x,y) = eps |x-y|^2/2, so b_t(x, mu) = -a(t) x - eps (x - mean(mu))
/// and sigma = sqrt(2) I. The interaction only needs the ensemble mean, which
/// the frozen view caches.
inline Scenario make_granular_scenario(int dim, TimeProfile a, double eps, InitialLaw init,
                                       ConvexDomain domain) {
  const double t0 = a.period();
  Scenario s;
  s.name = "granular";
  s.description = "mean-field quadratic potentials: b = -a(t)x - eps(x - mean)";
  s.coeffs.t0 = t0;
  s.coeffs.dim = dim;
  s.coeffs.noise_dim = dim;
  s.coeffs.drift = [a, eps, dim](double t, std::span<const double> x, const MeasureView& mu,
                                 std::span<const double>, std::span<double> out) {
    const double at = a(t);
    std::span<const double> m = mu.mean();
    for (int i = 0; i < dim; ++i) out[i] = -at * x[i] - eps * (x[i] - m[i]);
  };
  const double sigma0 = std::sqrt(2.0);
  s.coeffs.iso_sigma = [sigma0](double) { return sigma0; };
  s.coeffs.sigma = detail::isotropic_sigma(dim, s.coeffs.iso_sigma);
  auto& c = s.coeffs.constants;
  c.gamma = a;
  c.eps = eps;
  c.K1 = TimeProfile::function(t0, [a, eps](double t) { return -2.0 * a(t) - eps; });
  c.K2 = TimeProfile::constant(eps);
  c.kappa1 = TimeProfile::function(t0, [a, eps](double t) { return -2.0 * (a(t) + eps); });
  c.kappa2 = TimeProfile::constant(2.0 * eps);
  c.lambda = TimeProfile::constant(0.5);
  c.A = TimeProfile::constant(sigma0);
  c.alpha = TimeProfile::constant(1.0);
  s.domain = std::move(domain);
  s.init = std::move(init);
  s.oracle_tag = "none";
  return s;
}

/// Double-well confining potential V_t(x) = alpha(t) (|x|^4/4 - |x|^2/2) plus
/// the quadratic interaction eps|x-y|^2/2, sigma = sqrt(alpha(t)) I. Only
/// partially dissipative: the Hessian is bounded below by -theta1 alpha near
/// the origin and by +theta2 alpha outside radius R/2, with
/// (theta1, theta2, R) = (1, 2, 2) for this quartic shape.
inline Scenario make_double_well_scenario(TimeProfile alpha, double eps, InitialLaw init) {
  const double t0 = alpha.period();
  const int dim = 1;
  Scenario s;
  s.name = "doublewell";
  s.description = "partially dissipative double-well: b = -alpha(t)(x^3 - x) - eps(x - mean)";
  s.coeffs.t0 = t0;
  s.coeffs.dim = dim;
  s.coeffs.noise_dim = dim;
  s.coeffs.drift = [alpha, eps](double t, std::span<const double> x, const MeasureView& mu,
                                std::span<const double>, std::span<double> out) {
    const double at = alpha(t);
    const double m = mu.mean()[0];
    out[0] = -at * (x[0] * x[0] * x[0] - x[0]) - eps * (x[0] - m);
  };
  s.coeffs.iso_sigma = [alpha](double t) { return std::sqrt(alpha(t)); };
  s.coeffs.sigma = detail::isotropic_sigma(dim, s.coeffs.iso_sigma);
  auto& c = s.coeffs.constants;
  c.alpha = alpha;
  c.eps = eps;
  c.theta1 = 1.0;
  c.theta2 = 2.0;
  c.R = 2.0;
  c.A = TimeProfile::function(t0, [alpha](double t) { return std::sqrt(alpha(t)); });
  s.domain = ConvexDomain::whole_space(dim);
  s.init = std::move(init);
  s.oracle_tag = "none";
  return s;
}

namespace detail {

// C^1 radial drift equal to -|x|^{p-1} x outside the unit ball (p = 1) and a
// locally expansive quintic profile inside: g(rho) = rho - 4 rho^3 + 2 rho^5,
// i.e. b0(x) = (1 - 4|x|^2 + 2|x|^4) x for |x| <= 1.
inline void nondissipative_base_drift(std::span<const double> x, std::span<double> out) {
  double r2 = 0.0;
  for (double v : x) r2 += v * v;
  const double factor = (r2 >= 1.0) ? -1.0 : (1.0 - 4.0 * r2 + 2.0 * r2 * r2);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
}

}  // namespace detail

/// Fully non-dissipative dynamics with a normalized bounded interaction:
///   b_t(x, mu) = alpha(t) b0(x) + mean_mu[grad1 W_t(x, .)] / (1 + mu(V)),
///   W_t(x,y) = (eps alpha(t)/2) sqrt(1 + |x-y|^2),  sigma = sqrt(alpha(t)) I,
/// with Lyapunov weight V(x) = exp(sqrt(1 + |x|^2)) (a C^2 mollification of
/// exp(|x|) near the origin). Declared Lyapunov bounds (theta0, theta1) and
/// the short-range constants (D0, l, beta) are scenario metadata.
inline Scenario make_nondissipative_scenario(int dim, TimeProfile alpha, double eps,
                                             InitialLaw init) {
  const double t0 = alpha.period();
  Scenario s;
  s.name = "nondissipative";
  s.description = "fully non-dissipative drift with normalized bounded interaction";
  s.coeffs.t0 = t0;
  s.coeffs.dim = dim;
  s.coeffs.noise_dim = dim;

  auto V = [](std::span<const double> x) {
    double r2 = 0.0;
    for (double v : x) r2 += v * v;
    return std::exp(std::sqrt(1.0 + r2));
  };
  auto gradV = [](std::span<const double> x, std::span<double> out) {
    double r2 = 0.0;
    for (double v : x) r2 += v * v;
    const double srt = std::sqrt(1.0 + r2);
    const double scale = std::exp(srt) / srt;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = scale * x[i];
  };

  s.coeffs.prepare = [V](double, const MeasureView& mu) {
    return std::vector<double>{mu.mean_of(V)};
  };
  s.coeffs.drift = [alpha, eps, dim](double t, std::span<const double> x, const MeasureView& mu,
                                     std::span<const double> ctx, std::span<double> out) {
    const double at = alpha(t);
    detail::nondissipative_base_drift(x, out);
    for (int i = 0; i < dim; ++i) out[i] *= at;
    const double mu_v = ctx.empty() ? 0.0 : ctx[0];
    std::vector<double> inter(dim, 0.0);
    const double w_scale = 0.5 * eps * at;
    mu.pair_average(
        x,
        [w_scale](std::span<const double> xi, std::span<const double> yj,
                  std::span<double> acc) {
          double d2 = 0.0;
          for (std::size_t i = 0; i < xi.size(); ++i) {
            const double d = xi[i] - yj[i];
            d2 += d * d;
          }
          const double inv = w_scale / std::sqrt(1.0 + d2);
          for (std::size_t i = 0; i < xi.size(); ++i) acc[i] += inv * (xi[i] - yj[i]);
        },
        inter);
    for (int i = 0; i < dim; ++i) out[i] += inter[i] / (1.0 + mu_v);
  };
  s.coeffs.iso_sigma = [alpha](double t) { return std::sqrt(alpha(t)); };
  s.coeffs.sigma = detail::isotropic_sigma(dim, s.coeffs.iso_sigma);

  auto& c = s.coeffs.constants;
  c.alpha = alpha;
  c.eps = eps;
  c.p = 1.0;
  // |grad b0| <= 2.6 on the unit ball for the quintic profile; the
  // interaction contributes at most eps/2 per unit of alpha.
  c.D0 = 2.6 + 0.5 * eps;
  c.l = 7.0;
  c.beta = 0.1;
  c.theta0_lyap = 12.0;
  c.theta1_lyap = 0.5;
  c.theta = TimeProfile::function(
      t0, [alpha, eps](double t) { return eps * alpha(t) * 10.0; });  // eps/beta scaling
  c.A = TimeProfile::function(t0, [alpha](double t) { return std::sqrt(alpha(t)); });
  c.K0 = TimeProfile::function(t0, [alpha](double t) { return 12.0 * alpha(t); });
  c.K1 = TimeProfile::function(t0, [alpha](double t) { return 0.5 * alpha(t); });

  s.domain = ConvexDomain::whole_space(dim);
  s.init = std::move(init);
  s.oracle_tag = "none";
  s.lyapunov = V;
  s.lyapunov_grad = gradV;
  s.lyapunov_radial = true;
  return s;
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

inline std::vector<Scenario> builtin_scenarios() {
  std::vector<Scenario> out;

  {
    Scenario s = make_ou_scenario(1, TimeProfile::sine(1.0, 0.5, 1.0), std::sqrt(2.0),
                                  InitialLaw::point({3.0}), ConvexDomain::whole_space(1));
    s.name = "ou-periodic";
    out.push_back(std::move(s));
  }
  {
    Scenario s = make_granular_scenario(1, TimeProfile::sine(1.0, 0.5, 1.0), 0.1,
                                        InitialLaw::gaussian({3.0}, 0.5),
                                        ConvexDomain::whole_space(1));
    s.name = "granular-periodic";
    out.push_back(std::move(s));
  }
  {
    Scenario s = make_double_well_scenario(TimeProfile::sine(1.0, 0.5, 1.0), 0.05,
                                           InitialLaw::gaussian({2.0}, 0.5));
    s.name = "doublewell-periodic";
    out.push_back(std::move(s));
  }
  {
    Scenario s = make_nondissipative_scenario(1, TimeProfile::sine(1.0, 0.5, 1.0), 0.1,
                                              InitialLaw::point({2.0}));
    s.name = "nondissipative-periodic";
    out.push_back(std::move(s));
  }
  {
    Scenario s = make_ou_scenario(2, TimeProfile::sine(0.4, 0.2, 1.0), std::sqrt(2.0),
                                  InitialLaw::point({0.9, 0.0}),
                                  ConvexDomain::ball({0.0, 0.0}, 1.0));
    s.name = "ou-ball-reflect";
    s.description += " (reflected on the unit ball)";
    out.push_back(std::move(s));
  }
  {
    Scenario s = make_granular_scenario(2, TimeProfile::sine(1.0, 0.5, 1.0), 0.1,
                                        InitialLaw::uniform_in_domain(),
                                        ConvexDomain::box({-1.0, -1.0}, {1.0, 1.0}));
    s.name = "granular-box-reflect";
    s.description += " (reflected on a box)";
    out.push_back(std::move(s));
  }
  return out;
}

inline Scenario find_scenario(const std::string& name) {
  auto all = builtin_scenarios();
  for (auto& s : all)
    if (s.name == name) return s;
  std::string msg = "unknown scenario '" + name + "'; valid names:";
  for (const auto& s : all) msg += " " + s.name;
  throw CatalogError(msg);
}

}  // namespace pmv
