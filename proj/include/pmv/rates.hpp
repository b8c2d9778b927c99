#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmv/cost_function.hpp"
#include "pmv/core.hpp"

namespace pmv {

// ---------------------------------------------------------------------------
// Piecewise dissipativity shape gamma(r) = theta1 (r ∧ R) - theta2 (r - R)^+
// and its antiderivative. gamma is positive near the origin (repulsion
// allowed) and eventually linearly negative, so exp(G) has a Gaussian tail.
// ---------------------------------------------------------------------------

inline double dissipativity_shape(double theta1, double theta2, double R, double r) {
  return theta1 * std::min(r, R) - theta2 * std::max(r - R, 0.0);
}

inline double dissipativity_antiderivative(double theta1, double theta2, double R, double r) {
  if (r <= R) return 0.5 * theta1 * r * r;
  const double s = r - R;
  return 0.5 * theta1 * R * R + theta1 * R * s - 0.5 * theta2 * s * s;
}

namespace detail {
inline double grid_point_of(std::size_t j, double step) {
  return step * static_cast<double>(j);
}
}  // namespace detail

/// Concave cost function for the partially dissipative regime:
///   psi(r) = int_0^r exp(-G(s)) [ int_s^inf t exp(G(t)) dt ] ds,
/// with G the antiderivative of the shape above. The improper inner integral
/// is truncated where exp(G) has fallen a factor max(tol, 1e-15) below its
/// value on the requested range (Gaussian tail dominance), and is evaluated
/// by a backward Simpson recurrence on psi' directly, which keeps every
/// exponential increment local and overflow-free. psi'' is tabulated from
/// second-order differences of psi', so the tabulated ODE residual is a real
/// quadrature check rather than an identity.
inline TabulatedCostFunction build_psi_example31(double theta1, double theta2, double R,
                                                 double tol = 1e-12, double r_max = 25.0) {
  if (theta1 <= 0.0 || theta2 <= 0.0 || R <= 0.0)
    throw CostError("psi builder: shape parameters must be > 0");
  if (tol <= 0.0) throw CostError("psi builder: tol must be > 0");
  if (r_max <= R) throw CostError("psi builder: r_max must exceed R");

  auto gamma = [&](double r) { return dissipativity_shape(theta1, theta2, R, r); };
  auto G = [&](double r) { return dissipativity_antiderivative(theta1, theta2, R, r); };

  const double r_peak = R + theta1 * R / theta2;
  if (G(r_peak) > 600.0)
    throw CostError("psi builder: exp(G) overflows for these parameters; rescale");

  // Truncation radius: far enough past both the peak and the requested range
  // that the discarded tail is below the tolerance relative to retained mass.
  const double drop = std::max(30.0, -std::log(std::min(tol, 1e-15)));
  double r_ext = std::max({r_max, r_peak + 1.0 / theta2 + 1.0});
  const double g_ref = std::min(G(r_max), G(r_peak));
  while (G(r_ext) > g_ref - drop) {
    r_ext += std::max(0.25, 1.0 / theta2);
    if (r_ext > r_max + 1e6) throw CostError("psi builder: truncation search failed");
  }

  // psi'(r) = exp(-G(r)) I(r) obeys the backward one-step recurrence
  //   psi'(r_j) = e^{G_{j+1}-G_j} psi'(r_{j+1}) + Simpson(t e^{G(t)-G_j}, [r_j, r_{j+1}])
  // seeded with the Watson-lemma tail psi'(r_ext) = r_ext / (-gamma(r_ext)).
  auto tabulate_dpsi = [&](double step, std::size_t count) {
    std::vector<double> dp(count);
    dp[count - 1] = r_ext / (-gamma(r_ext));
    for (std::size_t j = count - 1; j-- > 0;) {
      const double r0 = step * static_cast<double>(j);
      const double r1 = r0 + step;
      const double rm = r0 + 0.5 * step;
      const double g0 = G(r0);
      const double e1 = std::exp(G(r1) - g0);
      const double em = std::exp(G(rm) - g0);
      dp[j] = e1 * dp[j + 1] + (step / 6.0) * (r0 + 4.0 * rm * em + r1 * e1);
    }
    return dp;
  };

  // Coarse pass to size the fine grid from the curvature scale.
  {
    const std::size_t coarse_n = 512;
    const double coarse_h = r_ext / static_cast<double>(coarse_n);
    auto coarse = tabulate_dpsi(coarse_h, coarse_n + 1);
    double d3_bound = 1.0;
    for (std::size_t j = 0; j <= coarse_n; ++j) {
      const double r = coarse_h * static_cast<double>(j);
      const double d2 = -gamma(r) * coarse[j] - r;
      // |psi'''| <= |gamma'| psi' + |gamma| |psi''| + 1
      const double d3 =
          std::max(theta1, theta2) * coarse[j] + std::abs(gamma(r)) * std::abs(d2) + 1.0;
      d3_bound = std::max(d3_bound, d3);
    }
    const double target = 9e-7 / d3_bound;  // residual budget for the FD psi''
    double delta = std::sqrt(std::max(target, 1e-18));
    delta = std::min(delta, 1e-3);
    delta = std::max(delta, r_ext / 4e6);
    const auto exposed = static_cast<std::size_t>(std::ceil(r_ext / delta));
    r_ext = delta * static_cast<double>(exposed);  // land the grid on r_ext exactly

    // Fine pass on a half-step internal grid so psi integrates psi' with
    // Simpson pairs.
    const std::size_t internal_n = 2 * exposed;
    auto dp_fine = tabulate_dpsi(delta / 2.0, internal_n + 1);

    std::vector<double> psi(exposed + 1, 0.0), dpsi(exposed + 1), ddpsi(exposed + 1);
    for (std::size_t j = 0; j <= exposed; ++j) dpsi[j] = dp_fine[2 * j];
    for (std::size_t j = 0; j < exposed; ++j)
      psi[j + 1] = psi[j] + (delta / 6.0) *
                                (dp_fine[2 * j] + 4.0 * dp_fine[2 * j + 1] + dp_fine[2 * j + 2]);
    for (std::size_t j = 1; j < exposed; ++j)
      ddpsi[j] = (dpsi[j + 1] - dpsi[j - 1]) / (2.0 * delta);
    ddpsi[0] = (-3.0 * dpsi[0] + 4.0 * dpsi[1] - dpsi[2]) / (2.0 * delta);
    ddpsi[exposed] =
        (3.0 * dpsi[exposed] - 4.0 * dpsi[exposed - 1] + dpsi[exposed - 2]) / (2.0 * delta);
    // psi''' jumps at the shape kink r = R; the nodes hugging it need
    // one-sided stencils so the difference never straddles the jump
    const auto kink = static_cast<std::size_t>(R / delta);
    for (std::size_t j : {kink, kink + 1}) {
      if (j < 2 || j + 2 > exposed) continue;
      if (detail::grid_point_of(j, delta) <= R)
        ddpsi[j] = (3.0 * dpsi[j] - 4.0 * dpsi[j - 1] + dpsi[j - 2]) / (2.0 * delta);
      else
        ddpsi[j] = (-3.0 * dpsi[j] + 4.0 * dpsi[j + 1] - dpsi[j + 2]) / (2.0 * delta);
    }

    return TabulatedCostFunction::from_samples(
        delta, std::move(psi), std::move(dpsi), std::move(ddpsi), "example31",
        {{"theta1", theta1},
         {"theta2", theta2},
         {"R", R},
         {"tol", tol},
         {"r_max", r_max},
         // inf over all r >= 0 is the r -> inf limit 1/theta2, approached
         // from above; floor the tabulated c1 with it.
         {"c1_limit", 1.0 / theta2}});
  }
}

// ---------------------------------------------------------------------------
// First mixed eigenpair of 2 d^2/dr^2 + D0 d/dr on [0, l], Dirichlet at 0 and
// Neumann at l: the smallest D1 > 0 with 2 psi'' + D0 psi' = -D1 psi,
// psi(0) = 0, psi'(l) = 0 and psi' > 0 on [0, l).
// ---------------------------------------------------------------------------

struct EigenPsiResult {
  double D1 = 0.0;
  TabulatedCostFunction psi;
};

namespace detail {

inline double bisect(const std::function<double(double)>& f, double lo, double hi,
                     const char* what) {
  double flo = f(lo), fhi = f(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0.0) == (fhi > 0.0))
    throw Error(std::string("eigenproblem: no sign change bracketing ") + what + " on [" +
                std::to_string(lo) + ", " + std::to_string(hi) + "]");
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if (fm == 0.0) return mid;
    if ((fm > 0.0) == (flo > 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

inline EigenPsiResult build_psi_eigen(double D0, double l, std::size_t grid_nodes = 8192) {
  if (l <= 0.0) throw CostError("eigen psi: l must be > 0");
  if (D0 < 0.0) throw CostError("eigen psi: D0 must be >= 0");

  enum class Regime { Oscillatory, Critical, Hyperbolic } regime;
  double omega = 0.0, kappa = 0.0;
  if (D0 == 0.0) {
    regime = Regime::Oscillatory;
    omega = 0.5 * kPi / l;
  } else {
    const double t = l * D0;
    if (std::abs(t - 4.0) <= 1e-9) {
      regime = Regime::Critical;
    } else if (t < 4.0) {
      regime = Regime::Oscillatory;
      // first root of tan(x) = 4x/(l D0) in (0, pi/2), singularity-free form
      auto f = [&](double x) { return 4.0 * x * std::cos(x) - t * std::sin(x); };
      const double x = detail::bisect(f, 1e-12, 0.5 * kPi * (1.0 - 1e-15), "tan branch");
      omega = x / l;
    } else {
      regime = Regime::Hyperbolic;
      // root of tanh(kappa l) = 4 kappa / D0 in (0, D0/4)
      auto g = [&](double k) { return D0 * std::tanh(k * l) - 4.0 * k; };
      kappa = detail::bisect(g, 1e-14 * D0, 0.25 * D0 * (1.0 - 1e-15), "tanh branch");
    }
  }

  double D1 = 0.0;
  std::function<void(double, double&, double&, double&)> eval;
  switch (regime) {
    case Regime::Oscillatory:
      D1 = (16.0 * omega * omega + D0 * D0) / 8.0;
      eval = [D0, omega](double r, double& p, double& dp, double& ddp) {
        const double E = std::exp(-0.25 * D0 * r);
        const double s = std::sin(omega * r), c = std::cos(omega * r);
        p = E * s;
        dp = E * (omega * c - 0.25 * D0 * s);
        ddp = E * ((D0 * D0 / 16.0 - omega * omega) * s - 0.5 * D0 * omega * c);
      };
      break;
    case Regime::Critical:
      D1 = D0 * D0 / 8.0;
      eval = [D0](double r, double& p, double& dp, double& ddp) {
        const double E = std::exp(-0.25 * D0 * r);
        p = r * E;
        dp = E * (1.0 - 0.25 * D0 * r);
        ddp = E * (-0.5 * D0 + D0 * D0 * r / 16.0);
      };
      break;
    case Regime::Hyperbolic:
      D1 = (D0 * D0 - 16.0 * kappa * kappa) / 8.0;
      eval = [D0, kappa](double r, double& p, double& dp, double& ddp) {
        const double E = std::exp(-0.25 * D0 * r);
        const double s = std::sinh(kappa * r), c = std::cosh(kappa * r);
        p = E * s;
        dp = E * (kappa * c - 0.25 * D0 * s);
        ddp = E * ((D0 * D0 / 16.0 + kappa * kappa) * s - 0.5 * D0 * kappa * c);
      };
      break;
  }
  if (!(D1 > 0.0)) throw Error("eigenproblem: nonpositive eigenvalue " + std::to_string(D1));

  const double delta = l / static_cast<double>(grid_nodes);
  std::vector<double> psi(grid_nodes + 1), dpsi(grid_nodes + 1), ddpsi(grid_nodes + 1);
  for (std::size_t j = 0; j <= grid_nodes; ++j)
    eval(delta * static_cast<double>(j), psi[j], dpsi[j], ddpsi[j]);
  psi[0] = 0.0;
  dpsi[grid_nodes] = std::max(dpsi[grid_nodes], 0.0);

  EigenPsiResult out;
  out.D1 = D1;
  out.psi = TabulatedCostFunction::from_samples(delta, std::move(psi), std::move(dpsi),
                                                std::move(ddpsi), "eigen",
                                                {{"D0", D0}, {"l", l}, {"D1", D1}},
                                                /*flatten_l=*/l);
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form contraction rates
// ---------------------------------------------------------------------------

/// lambda = -int_0^{t0} (K1 + K2); positive lambda means the squared W2
/// distance contracts by exp(-lambda) per period.
inline double rate_w2(const TimeProfile& K1, const TimeProfile& K2, double t0,
                      int nodes = 4096) {
  return -integrate_period([&](double t) { return K1(t) + K2(t); }, t0, nodes);
}

/// Entropy-from-W2 regularization constant over a window:
///   phi = lambda_bar (k1/(1 - e^{-k1}) + (window k2^2 / 2) e^{2 window k1 + 2 k2}),
/// with the removable singularity at k1 = 0 evaluated as the limit 1.
inline double entropy_constant_phi(double lambda_bar, double k1_bar, double k2_bar,
                                   double window) {
  if (window <= 0.0) throw ConfigError("entropy_constant_phi: window must be > 0");
  double head;
  if (std::abs(k1_bar) < 1e-8) {
    head = 1.0 + 0.5 * k1_bar + k1_bar * k1_bar / 12.0;
  } else {
    head = k1_bar / (-std::expm1(-k1_bar));
  }
  const double tail =
      0.5 * window * k2_bar * k2_bar * std::exp(2.0 * window * k1_bar + 2.0 * k2_bar);
  return lambda_bar * (head + tail);
}

/// lambda = int_0^{t0} (kappa_s - theta_s |psi'|_inf) ds for the psi-cost
/// contraction.
inline double rate_wpsi(const TimeProfile& kappa, const TimeProfile& theta,
                        const TabulatedCostFunction& psi, double t0, int nodes = 4096) {
  const double c2 = psi.c2();
  return integrate_period([&](double t) { return kappa(t) - theta(t) * c2; }, t0, nodes);
}

// ---------------------------------------------------------------------------
// Numerical extrema for the Lyapunov-route constants
// ---------------------------------------------------------------------------

struct ExtremeResult {
  double value = 0.0;
  bool boundary_warning = false;
  std::array<double, 3> argument{0.0, 0.0, 0.0};
};

namespace detail {

struct Grid2Spec {
  double lo_x, hi_x, lo_y, hi_y;
};

template <typename Obj, typename Feasible>
ExtremeResult optimize2(const Obj& f, const Feasible& ok, Grid2Spec box, bool maximize,
                        int coarse = 65, int refine_rounds = 36) {
  const double sign = maximize ? -1.0 : 1.0;
  double best = std::numeric_limits<double>::infinity();
  double bx = box.lo_x, by = box.lo_y;
  auto scan = [&](double lx, double hx, double ly, double hy, int nx, int ny) {
    for (int i = 0; i <= nx; ++i) {
      const double x = lx + (hx - lx) * static_cast<double>(i) / nx;
      for (int j = 0; j <= ny; ++j) {
        const double y = ly + (hy - ly) * static_cast<double>(j) / ny;
        if (!ok(x, y)) continue;
        const double v = sign * f(x, y);
        if (v < best) {
          best = v;
          bx = x;
          by = y;
        }
      }
    }
  };
  scan(box.lo_x, box.hi_x, box.lo_y, box.hi_y, coarse, coarse);
  double wx = (box.hi_x - box.lo_x) / coarse;
  double wy = (box.hi_y - box.lo_y) / coarse;
  for (int round = 0; round < refine_rounds; ++round) {
    scan(std::max(box.lo_x, bx - wx), std::min(box.hi_x, bx + wx), std::max(box.lo_y, by - wy),
         std::min(box.hi_y, by + wy), 8, 8);
    wx *= 0.5;
    wy *= 0.5;
  }
  ExtremeResult res;
  res.value = sign * best;
  res.argument = {bx, by, 0.0};
  const double edge_x = (box.hi_x - box.lo_x) / coarse;
  const double edge_y = (box.hi_y - box.lo_y) / coarse;
  res.boundary_warning = (bx >= box.hi_x - edge_x) || (by >= box.hi_y - edge_y) ||
                         (bx <= box.lo_x + edge_x && box.lo_x != 0.0) ||
                         (by <= box.lo_y + edge_y && box.lo_y != 0.0);
  return res;
}

inline std::vector<double> embed_axis(double u, int dim, int axis) {
  std::vector<double> x(static_cast<std::size_t>(dim), 0.0);
  x[static_cast<std::size_t>(axis) % dim] = u;
  return x;
}

}  // namespace detail

/// kappa_{l,beta} = inf over |x-y| >= l of
///   (K1 V(x) + K1 V(y) - 2 K0) / (1/beta + V(x) + V(y)).
/// Radial V reduces to two radii (u, v) with u + v >= l realizable on a line
/// through the origin; general 1-D uses signed coordinates. A refined grid
/// plus an explicit sweep of the active constraint u+v = l (resp. |x-y| = l)
/// locates constrained minima; a warning flags minima on the search box edge.
inline ExtremeResult kappa_l_beta(double K0, double K1,
                                  const std::function<double(std::span<const double>)>& V,
                                  double l, double beta, double box_radius, bool radial,
                                  int dim) {
  if (beta <= 0.0) throw ConfigError("kappa_l_beta: beta must be > 0");
  if (l <= 0.0) throw ConfigError("kappa_l_beta: l must be > 0");
  if (box_radius <= l / 2.0) throw ConfigError("kappa_l_beta: search box too small");
  const double inv_beta = 1.0 / beta;

  ExtremeResult res;
  if (radial || dim == 1) {
    auto objective = [&](double u, double v) {
      const double Vx = V(detail::embed_axis(radial ? u : u, dim, 0));
      const double Vy = V(detail::embed_axis(radial ? -v : v, dim, 0));
      return (K1 * Vx + K1 * Vy - 2.0 * K0) / (inv_beta + Vx + Vy);
    };
    if (radial) {
      auto feasible = [&](double u, double v) { return u >= 0 && v >= 0 && u + v >= l; };
      res = detail::optimize2(objective, feasible, {0.0, box_radius, 0.0, box_radius},
                              /*maximize=*/false);
      // active-constraint sweep u + v = l
      for (int i = 0; i <= 4096; ++i) {
        const double u = std::max(0.0, l - box_radius) +
                         (std::min(box_radius, l) - std::max(0.0, l - box_radius)) *
                             static_cast<double>(i) / 4096.0;
        const double v = l - u;
        if (v < 0 || v > box_radius) continue;
        const double val = objective(u, v);
        if (val < res.value) {
          res.value = val;
          res.argument = {u, v, 0.0};
        }
      }
    } else {
      auto feasible = [&](double x, double y) { return std::abs(x - y) >= l; };
      res = detail::optimize2(objective, feasible,
                              {-box_radius, box_radius, -box_radius, box_radius},
                              /*maximize=*/false);
      for (int side = 0; side < 2; ++side) {
        for (int i = 0; i <= 4096; ++i) {
          const double x =
              -box_radius + 2.0 * box_radius * static_cast<double>(i) / 4096.0;
          const double y = side ? x - l : x + l;
          if (y < -box_radius || y > box_radius) continue;
          const double val = objective(x, y);
          if (val < res.value) {
            res.value = val;
            res.argument = {x, y, 0.0};
          }
        }
      }
    }
    return res;
  }
  throw ConfigError("kappa_l_beta: non-radial V supported in dimension 1 only");
}

using GradFn = std::function<void(std::span<const double>, std::span<double>)>;
using MatFn = std::function<std::vector<double>(std::span<const double>)>;  // d x d row-major

/// alpha_{l,beta} = c_psi * sup over 0 < |x-y| < l of
///   alpha_t |gradV(x)-gradV(y)| / (|x-y| (1/beta + V(x) + V(y)))
///   + |(sdev(x)-sdev(y)) [ (sdev^T gradV)(x) + (sdev^T gradV)(y) ]|
///       / (|x-y| (1/beta + V(x) + V(y))).
/// sigma deviation sdev may be null (identically zero).
inline ExtremeResult alpha_l_beta(double alpha_t,
                                  const std::function<double(std::span<const double>)>& V,
                                  const GradFn& gradV, const MatFn& sigma_dev, double c_psi,
                                  double l, double beta, double box_radius, bool radial,
                                  int dim) {
  if (beta <= 0.0) throw ConfigError("alpha_l_beta: beta must be > 0");
  if (l <= 0.0) throw ConfigError("alpha_l_beta: l must be > 0");
  const double inv_beta = 1.0 / beta;
  const double sep_min = 1e-7 * std::max(1.0, l);

  auto quotient = [&](const std::vector<double>& x, const std::vector<double>& y) {
    const double r = dist2(x, y);
    if (r < sep_min || r > l) return -std::numeric_limits<double>::infinity();
    const double Vx = V(x), Vy = V(y);
    std::vector<double> gx(x.size()), gy(y.size());
    gradV(x, gx);
    gradV(y, gy);
    const double denom = r * (inv_beta + Vx + Vy);
    double num = alpha_t * dist2(gx, gy);
    if (sigma_dev) {
      const auto sx = sigma_dev(x);
      const auto sy = sigma_dev(y);
      const int d = static_cast<int>(x.size());
      std::vector<double> wx(static_cast<std::size_t>(d), 0.0),
          wy(static_cast<std::size_t>(d), 0.0), diff(static_cast<std::size_t>(d), 0.0);
      // w = sdev^T gradV
      for (int r_i = 0; r_i < d; ++r_i)
        for (int c_i = 0; c_i < d; ++c_i) {
          wx[static_cast<std::size_t>(c_i)] +=
              sx[static_cast<std::size_t>(r_i) * d + c_i] * gx[static_cast<std::size_t>(r_i)];
          wy[static_cast<std::size_t>(c_i)] +=
              sy[static_cast<std::size_t>(r_i) * d + c_i] * gy[static_cast<std::size_t>(r_i)];
        }
      for (int i = 0; i < d; ++i) wx[static_cast<std::size_t>(i)] += wy[static_cast<std::size_t>(i)];
      for (int r_i = 0; r_i < d; ++r_i) {
        double acc = 0.0;
        for (int c_i = 0; c_i < d; ++c_i)
          acc += (sx[static_cast<std::size_t>(r_i) * d + c_i] -
                  sy[static_cast<std::size_t>(r_i) * d + c_i]) *
                 wx[static_cast<std::size_t>(c_i)];
        diff[static_cast<std::size_t>(r_i)] = acc;
      }
      num += norm2(diff);
    }
    return num / denom;
  };

  ExtremeResult res;
  res.value = 0.0;
  if (dim == 1 || !radial) {
    if (dim != 1 && !radial)
      throw ConfigError("alpha_l_beta: non-radial V supported in dimension 1 only");
    auto obj = [&](double x, double y) {
      return quotient(std::vector<double>{x}, std::vector<double>{y});
    };
    auto feasible = [&](double x, double y) {
      const double r = std::abs(x - y);
      return r >= sep_min && r <= l;
    };
    res = detail::optimize2(obj, feasible, {-box_radius, box_radius, -box_radius, box_radius},
                            /*maximize=*/true);
  } else {
    // radial reduction: x = u e1, y = v (cos phi, sin phi, 0, ...)
    double best = -std::numeric_limits<double>::infinity();
    std::array<double, 3> arg{0, 0, 0};
    auto eval = [&](double u, double v, double phi) {
      std::vector<double> x(static_cast<std::size_t>(dim), 0.0),
          y(static_cast<std::size_t>(dim), 0.0);
      x[0] = u;
      y[0] = v * std::cos(phi);
      y[1] = v * std::sin(phi);
      return quotient(x, y);
    };
    const int nu = 48, nphi = 24;
    for (int i = 0; i <= nu; ++i)
      for (int j = 0; j <= nu; ++j)
        for (int k = 0; k <= nphi; ++k) {
          const double u = box_radius * static_cast<double>(i) / nu;
          const double v = box_radius * static_cast<double>(j) / nu;
          const double phi = kPi * static_cast<double>(k) / nphi;
          const double q = eval(u, v, phi);
          if (q > best) {
            best = q;
            arg = {u, v, phi};
          }
        }
    double wu = box_radius / nu, wphi = kPi / nphi;
    for (int round = 0; round < 30; ++round) {
      for (int i = -4; i <= 4; ++i)
        for (int j = -4; j <= 4; ++j)
          for (int k = -4; k <= 4; ++k) {
            const double u = std::clamp(arg[0] + wu * i / 4.0, 0.0, box_radius);
            const double v = std::clamp(arg[1] + wu * j / 4.0, 0.0, box_radius);
            const double phi = std::clamp(arg[2] + wphi * k / 4.0, 0.0, kPi);
            const double q = eval(u, v, phi);
            if (q > best) {
              best = q;
              arg = {u, v, phi};
            }
          }
      wu *= 0.5;
      wphi *= 0.5;
    }
    res.value = best;
    res.argument = arg;
    res.boundary_warning = arg[0] >= box_radius * (1.0 - 1.0 / nu) ||
                           arg[1] >= box_radius * (1.0 - 1.0 / nu);
  }
  if (!std::isfinite(res.value)) res.value = 0.0;  // empty feasible set
  res.value *= c_psi;
  return res;
}

// ---------------------------------------------------------------------------
// Combined Lyapunov-route rate
// ---------------------------------------------------------------------------

struct RateInputs {
  TimeProfile K0 = TimeProfile::constant(0.0);  // Lyapunov: L V <= K0 - K1 V
  TimeProfile K1 = TimeProfile::constant(0.0);
  TimeProfile alpha = TimeProfile::constant(1.0);
  TimeProfile theta = TimeProfile::constant(0.0);
  TimeProfile u_l = TimeProfile::constant(0.0);
  TimeProfile gamma = TimeProfile::constant(0.0);
  TimeProfile A = TimeProfile::constant(0.0);
  TimeProfile lambda = TimeProfile::constant(0.0);
  double beta = 1.0;
  double l = 1.0;
  std::function<double(std::span<const double>)> V;
  GradFn gradV;
  MatFn sigma_dev;  // null for sigma sigma^T = alpha I exactly
  bool radial = true;
  int dim = 1;
  double box_radius = 20.0;
};

struct WpsivRateResult {
  double lambda = 0.0;
  std::vector<double> t;
  std::vector<double> long_range;   // kappa_{l,beta}(t)
  std::vector<double> short_range;  // u_l(t) - 2 K0(t) beta - alpha_{l,beta}(t)
  std::vector<double> lambda_t;     // min of the branches
  bool boundary_warning = false;
};

/// lambda = int_0^{t0} ( min{kappa_{l,beta}(s), u_l(s) - 2 K0(s) beta
///                        - alpha_{l,beta}(s)} - theta_s ) ds,
/// with both branches reported separately for diagnosis.
inline WpsivRateResult rate_wpsiv(const RateInputs& in, const TabulatedCostFunction& psi,
                                  double t0, int nodes = 128) {
  if (!in.V || !in.gradV) throw ConfigError("rate_wpsiv: V and gradV are required");
  WpsivRateResult out;
  out.t.resize(static_cast<std::size_t>(nodes));
  out.long_range.resize(static_cast<std::size_t>(nodes));
  out.short_range.resize(static_cast<std::size_t>(nodes));
  out.lambda_t.resize(static_cast<std::size_t>(nodes));
  double acc = 0.0;
  const double h = t0 / static_cast<double>(nodes);
  for (int i = 0; i < nodes; ++i) {
    const double t = h * static_cast<double>(i);
    auto kap = kappa_l_beta(in.K0(t), in.K1(t), in.V, in.l, in.beta, in.box_radius, in.radial,
                            in.dim);
    auto alp = alpha_l_beta(in.alpha(t), in.V, in.gradV, in.sigma_dev, psi.c_psi(), in.l,
                            in.beta, in.box_radius, in.radial, in.dim);
    out.boundary_warning = out.boundary_warning || kap.boundary_warning || alp.boundary_warning;
    const double short_branch = in.u_l(t) - 2.0 * in.K0(t) * in.beta - alp.value;
    out.t[static_cast<std::size_t>(i)] = t;
    out.long_range[static_cast<std::size_t>(i)] = kap.value;
    out.short_range[static_cast<std::size_t>(i)] = short_branch;
    const double lam_t = std::min(kap.value, short_branch);
    out.lambda_t[static_cast<std::size_t>(i)] = lam_t;
    acc += lam_t - in.theta(t);
  }
  out.lambda = acc * h;
  return out;
}

/// Log-Sobolev propagation constant over [s, r]:
///   c(s, r) = c_start A(r)^2 lambda_bar^2 e^{-2 int_s^r gamma}
///           + 4 A(r)^2 int_s^r e^{-2 int_tau^r gamma} dtau.
/// Reported alongside entropy experiments; never a hard gate.
inline double entropy_decay_constant(const TimeProfile& gamma, const TimeProfile& A,
                                     double lambda_bar, double c_start, double s, double r,
                                     int nodes = 16384) {
  if (r <= s) throw ConfigError("entropy_decay_constant: need r > s");
  const double h = (r - s) / static_cast<double>(nodes);
  std::vector<double> g(static_cast<std::size_t>(nodes) + 1);
  for (int i = 0; i <= nodes; ++i) g[static_cast<std::size_t>(i)] = gamma(s + h * i);
  std::vector<double> G(g.size());
  cumulative_trapezoid(g, h, G);
  const double G_end = G.back();
  double inner = 0.0;
  for (int i = 0; i <= nodes; ++i) {
    const double w = (i == 0 || i == nodes) ? 0.5 : 1.0;
    inner += w * std::exp(-2.0 * (G_end - G[static_cast<std::size_t>(i)]));
  }
  inner *= h;
  const double Ar = A(r);
  return c_start * Ar * Ar * lambda_bar * lambda_bar * std::exp(-2.0 * G_end) +
         4.0 * Ar * Ar * inner;
}

}  // namespace pmv
