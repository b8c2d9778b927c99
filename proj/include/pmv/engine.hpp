#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pmv/coefficients.hpp"
#include "pmv/core.hpp"
#include "pmv/geometry.hpp"
#include "pmv/noise.hpp"

namespace pmv {

/// N-particle empirical measure at a time point. reflection[i] accumulates
/// the projection displacements of particle i (discrete analogue of the
/// boundary local time; diagnostic only).
struct Ensemble {
  int n = 0;
  int dim = 0;
  double t = 0.0;
  std::uint32_t steps_done = 0;  // absolute step counter, drives noise keys
  std::vector<double> positions;  // n x dim row-major
  std::vector<double> reflection;

  std::span<double> particle(int i) {
    return std::span<double>(positions).subspan(static_cast<std::size_t>(i) * dim, dim);
  }
  std::span<const double> particle(int i) const {
    return std::span<const double>(positions).subspan(static_cast<std::size_t>(i) * dim, dim);
  }

  std::vector<double> mean() const {
    std::vector<double> m(dim, 0.0);
    for (int i = 0; i < n; ++i) {
      auto p = particle(i);
      for (int k = 0; k < dim; ++k) m[k] += p[k];
    }
    for (double& v : m) v /= static_cast<double>(n);
    return m;
  }
};

struct SimConfig {
  int n = 4096;
  int steps_per_period = 1000;
  int periods = 12;
  std::uint64_t seed = 0;
  int workers = 1;
  int subsample = 0;  // 0 = exact pairwise interactions
  std::optional<ConvexDomain> domain_override;

  double dt(double t0) const { return t0 / static_cast<double>(steps_per_period); }

  void validate() const {
    if (n < 1) throw ConfigError("sim config: n must be >= 1");
    if (steps_per_period < 1) throw ConfigError("sim config: steps_per_period must be >= 1");
    if (periods < 0) throw ConfigError("sim config: periods must be >= 0");
    if (workers < 1) throw ConfigError("sim config: workers must be >= 1");
    if (subsample < 0) throw ConfigError("sim config: subsample must be >= 0");
  }
};

namespace detail {

/// Splits [0, n) into contiguous chunks, one per worker. Results do not
/// depend on the worker count: every write is particle-disjoint.
template <typename Fn>
void parallel_for(int n, int workers, const Fn& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  const int chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    const int lo = w * chunk, hi = std::min(n, (w + 1) * chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (int i = 0; i < std::min(chunk, n); ++i) fn(i);
  for (auto& th : pool) th.join();
}

inline std::vector<std::uint32_t> draw_subsample(int m, int n, std::uint32_t step,
                                                 const NoisePolicy& noise) {
  std::vector<std::uint32_t> idx(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    const double u = noise.uniform(static_cast<std::uint32_t>(j), step,
                                   StreamPurpose::Subsample, 0);
    idx[j] = std::min<std::uint32_t>(static_cast<std::uint32_t>(u * n), n - 1);
  }
  return idx;
}

}  // namespace detail

/// One projected Euler-Maruyama step:
///   X_i <- Proj_D( X_i + b_t(X_i, mu_hat) dt + sigma_t(X_i) sqrt(dt) xi_{i,k} )
/// where mu_hat is the pre-step empirical measure (one frozen view for all
/// particles). Non-finite positions abort hard; silent clipping would corrupt
/// rate measurements downstream.
inline void step(Ensemble& ens, const PeriodicCoefficients& coeffs, const ConvexDomain& domain,
                 double dt, const NoisePolicy& noise, std::uint32_t step_index, int workers = 1,
                 int subsample = 0) {
  const int n = ens.n, d = ens.dim;
  const int m = coeffs.noise_dim;
  const double t = ens.t;
  const double sqrt_dt = std::sqrt(dt);

  std::vector<double> mean = ens.mean();
  std::vector<std::uint32_t> sub;
  if (subsample > 0 && subsample < n)
    sub = detail::draw_subsample(subsample, n, step_index, noise);
  const MeasureView view(ens.positions, n, d, mean, sub);

  std::vector<double> ctx;
  if (coeffs.prepare) ctx = coeffs.prepare(t, view);

  const bool iso = static_cast<bool>(coeffs.iso_sigma);
  const double iso_scale = iso ? coeffs.iso_sigma(t) : 0.0;

  std::vector<double> next(ens.positions.size());
  std::vector<int> bad(static_cast<std::size_t>(n), 0);

  detail::parallel_for(n, workers, [&](int i) {
    auto xi = ens.particle(i);
    std::span<double> out(next.data() + static_cast<std::size_t>(i) * d, d);
    coeffs.drift(t, xi, view, ctx, out);
    const std::uint32_t key = noise.key_for(static_cast<std::uint32_t>(i));
    if (iso) {
      for (int k = 0; k < d; ++k) {
        const double z = noise.gaussian(key, step_index, StreamPurpose::Simulation,
                                        static_cast<std::uint16_t>(k));
        out[k] = xi[k] + out[k] * dt + iso_scale * sqrt_dt * z;
      }
    } else {
      std::vector<double> sig(static_cast<std::size_t>(d) * m);
      coeffs.sigma(t, xi, sig);
      std::vector<double> z(static_cast<std::size_t>(m));
      for (int k = 0; k < m; ++k)
        z[k] = noise.gaussian(key, step_index, StreamPurpose::Simulation,
                              static_cast<std::uint16_t>(k));
      for (int r = 0; r < d; ++r) {
        double acc = 0.0;
        for (int k = 0; k < m; ++k) acc += sig[static_cast<std::size_t>(r) * m + k] * z[k];
        out[r] = xi[r] + out[r] * dt + sqrt_dt * acc;
      }
    }
    if (!all_finite(out)) {
      bad[static_cast<std::size_t>(i)] = 1;
      return;
    }
    if (!domain.is_whole_space()) ens.reflection[static_cast<std::size_t>(i)] += domain.project_inplace(out);
  });

  for (int i = 0; i < n; ++i)
    if (bad[static_cast<std::size_t>(i)])
      throw SimulationError("blow-up: non-finite position, particle " + std::to_string(i) +
                            ", step " + std::to_string(step_index) + ", t=" + std::to_string(t));

  ens.positions.swap(next);
  ens.t = t + dt;
  ens.steps_done = step_index + 1;
}

inline Ensemble sample_initial(const Scenario& scn, const SimConfig& cfg,
                               const NoisePolicy& noise) {
  const int d = scn.coeffs.dim;
  const ConvexDomain& dom = cfg.domain_override ? *cfg.domain_override : scn.domain;
  Ensemble ens;
  ens.n = cfg.n;
  ens.dim = d;
  ens.t = 0.0;
  ens.steps_done = 0;
  ens.positions.assign(static_cast<std::size_t>(cfg.n) * d, 0.0);
  ens.reflection.assign(static_cast<std::size_t>(cfg.n), 0.0);

  for (int i = 0; i < cfg.n; ++i) {
    auto p = ens.particle(i);
    const auto key = noise.key_for(static_cast<std::uint32_t>(i));
    switch (scn.init.kind) {
      case InitialLaw::Kind::Point:
        if (static_cast<int>(scn.init.mean.size()) != d)
          throw ScenarioError("initial law: point dimension mismatch");
        std::copy(scn.init.mean.begin(), scn.init.mean.end(), p.begin());
        break;
      case InitialLaw::Kind::Gaussian: {
        if (static_cast<int>(scn.init.mean.size()) != d)
          throw ScenarioError("initial law: mean dimension mismatch");
        for (int k = 0; k < d; ++k)
          p[k] = scn.init.mean[k] +
                 scn.init.stddev * noise.gaussian(key, 0, StreamPurpose::Init,
                                                  static_cast<std::uint16_t>(k));
        break;
      }
      case InitialLaw::Kind::UniformInDomain: {
        if (dom.kind() == ConvexDomain::Kind::Box) {
          for (int k = 0; k < d; ++k) {
            const double u = noise.uniform(key, 0, StreamPurpose::Init,
                                           static_cast<std::uint16_t>(k));
            p[k] = dom.box_lower()[k] + u * (dom.box_upper()[k] - dom.box_lower()[k]);
          }
        } else if (dom.kind() == ConvexDomain::Kind::Ball) {
          // direction from Gaussians, radius from u^(1/d)
          double r2 = 0.0;
          for (int k = 0; k < d; ++k) {
            p[k] = noise.gaussian(key, 0, StreamPurpose::Init,
                                  static_cast<std::uint16_t>(k));
            r2 += p[k] * p[k];
          }
          const double u = noise.uniform(key, 0, StreamPurpose::Init,
                                         static_cast<std::uint16_t>(d));
          const double radius =
              dom.ball_radius() * std::pow(u, 1.0 / static_cast<double>(d));
          const double scale = (r2 > 0.0) ? radius / std::sqrt(r2) : 0.0;
          for (int k = 0; k < d; ++k)
            p[k] = dom.ball_center()[k] + scale * p[k];
        } else {
          throw ScenarioError("uniform initial law needs a ball or box domain");
        }
        break;
      }
    }
    // Initial law must be supported in the closed domain.
    if (!dom.is_whole_space()) dom.project_inplace(p);
  }
  return ens;
}

/// Advances `periods` whole periods, returning snapshots [start, after period
/// 1, ..., after period `periods`]. The step counter continues across calls,
/// so chained evolutions stay on one deterministic noise stream.
inline std::vector<Ensemble> evolve_periods(Ensemble ens, const Scenario& scn,
                                            const SimConfig& cfg, int periods,
                                            const NoisePolicy& noise) {
  cfg.validate();
  const ConvexDomain& dom = cfg.domain_override ? *cfg.domain_override : scn.domain;
  const double dt = cfg.dt(scn.coeffs.t0);
  std::vector<Ensemble> snaps;
  snaps.reserve(static_cast<std::size_t>(periods) + 1);
  snaps.push_back(ens);
  for (int p = 0; p < periods; ++p) {
    for (int k = 0; k < cfg.steps_per_period; ++k)
      step(ens, scn.coeffs, dom, dt, noise, ens.steps_done, cfg.workers, cfg.subsample);
    snaps.push_back(ens);
  }
  return snaps;
}

/// Per-period snapshots of the particle system started from the scenario's
/// initial law; deterministic given (scenario, config, seed).
inline std::vector<Ensemble> simulate(const Scenario& scn, const SimConfig& cfg) {
  cfg.validate();
  NoisePolicy noise(cfg.seed);
  Ensemble ens = sample_initial(scn, cfg, noise);
  return evolve_periods(std::move(ens), scn, cfg, cfg.periods, noise);
}

/// Two copies driven by identical noise keys (synchronous coupling); returns
/// per-period snapshot pairs.
inline std::vector<std::pair<Ensemble, Ensemble>> coupled_simulate(Ensemble a, Ensemble b,
                                                                   const Scenario& scn,
                                                                   const SimConfig& cfg) {
  cfg.validate();
  if (a.n != b.n || a.dim != b.dim)
    throw ConfigError("coupled_simulate: ensembles must share N and dimension");
  NoisePolicy noise(cfg.seed);
  const ConvexDomain& dom = cfg.domain_override ? *cfg.domain_override : scn.domain;
  const double dt = cfg.dt(scn.coeffs.t0);
  std::vector<std::pair<Ensemble, Ensemble>> out;
  out.reserve(static_cast<std::size_t>(cfg.periods) + 1);
  out.emplace_back(a, b);
  for (int p = 0; p < cfg.periods; ++p) {
    for (int k = 0; k < cfg.steps_per_period; ++k) {
      const std::uint32_t idx = a.steps_done;
      step(a, scn.coeffs, dom, dt, noise, idx, cfg.workers, cfg.subsample);
      step(b, scn.coeffs, dom, dt, noise, idx, cfg.workers, cfg.subsample);
    }
    out.emplace_back(a, b);
  }
  return out;
}

using EnsembleDistanceFn = std::function<double(const Ensemble&, const Ensemble&)>;

struct FixedPointResult {
  Ensemble ensemble;
  int periods_used = 0;
  bool converged = false;
  std::vector<double> trace;  // successive one-period displacements
};

/// Iterates the one-period map until the displacement between successive
/// period snapshots stays below eps_fix for m_consec consecutive periods.
/// On hitting the period cap, returns converged=false with the full trace.
inline FixedPointResult periodic_fixed_point(const Scenario& scn, const SimConfig& cfg,
                                             double eps_fix, int m_consec,
                                             const EnsembleDistanceFn& distance,
                                             int max_periods = 256) {
  cfg.validate();
  if (eps_fix <= 0.0) throw ConfigError("periodic_fixed_point: eps_fix must be > 0");
  if (m_consec < 1) throw ConfigError("periodic_fixed_point: m_consec must be >= 1");
  NoisePolicy noise(cfg.seed);
  const ConvexDomain& dom = cfg.domain_override ? *cfg.domain_override : scn.domain;
  const double dt = cfg.dt(scn.coeffs.t0);

  FixedPointResult res;
  Ensemble cur = sample_initial(scn, cfg, noise);
  int streak = 0;
  for (int p = 0; p < max_periods; ++p) {
    Ensemble prev = cur;
    for (int k = 0; k < cfg.steps_per_period; ++k)
      step(cur, scn.coeffs, dom, dt, noise, cur.steps_done, cfg.workers, cfg.subsample);
    const double d = distance(prev, cur);
    res.trace.push_back(d);
    streak = (d < eps_fix) ? streak + 1 : 0;
    if (streak >= m_consec) {
      res.ensemble = std::move(cur);
      res.periods_used = p + 1;
      res.converged = true;
      return res;
    }
  }
  res.ensemble = std::move(cur);
  res.periods_used = max_periods;
  res.converged = false;
  return res;
}

// ---------------------------------------------------------------------------
// Snapshot persistence
// ---------------------------------------------------------------------------

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

}  // namespace detail

/// CSV rows (period, particle, x_1..x_d, reflection_cum); numbers use
/// shortest round-trip formatting, so identical ensembles give identical
/// bytes. RFC-4180: numeric fields never need quoting.
inline void write_snapshots_csv(const std::string& path, const std::vector<Ensemble>& snaps) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path + " for writing");
  std::string line = "period,particle";
  const int d = snaps.empty() ? 0 : snaps.front().dim;
  for (int k = 1; k <= d; ++k) line += ",x_" + std::to_string(k);
  line += ",reflection_cum\n";
  f << line;
  for (std::size_t p = 0; p < snaps.size(); ++p) {
    const Ensemble& e = snaps[p];
    for (int i = 0; i < e.n; ++i) {
      line.clear();
      line += std::to_string(p);
      line += ',';
      line += std::to_string(i);
      auto xi = e.particle(i);
      for (int k = 0; k < d; ++k) {
        line += ',';
        detail::append_double(line, xi[k]);
      }
      line += ',';
      detail::append_double(line, e.reflection[static_cast<std::size_t>(i)]);
      line += '\n';
      f << line;
    }
  }
}

/// Binary layout (all little-endian):
///   magic "PMVSNAP1" (8 bytes), u32 dim, u32 reserved=0, u64 n, u64 snapshots;
///   per snapshot: f64 time, then n*dim position f64 row-major, then n
///   reflection f64.
inline void write_snapshots_binary(const std::string& path,
                                   const std::vector<Ensemble>& snaps) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path + " for writing");
  const char magic[8] = {'P', 'M', 'V', 'S', 'N', 'A', 'P', '1'};
  f.write(magic, 8);
  const std::uint32_t dim = snaps.empty() ? 0u : static_cast<std::uint32_t>(snaps.front().dim);
  const std::uint32_t reserved = 0;
  const std::uint64_t n = snaps.empty() ? 0u : static_cast<std::uint64_t>(snaps.front().n);
  const std::uint64_t count = snaps.size();
  f.write(reinterpret_cast<const char*>(&dim), 4);
  f.write(reinterpret_cast<const char*>(&reserved), 4);
  f.write(reinterpret_cast<const char*>(&n), 8);
  f.write(reinterpret_cast<const char*>(&count), 8);
  for (const Ensemble& e : snaps) {
    f.write(reinterpret_cast<const char*>(&e.t), 8);
    f.write(reinterpret_cast<const char*>(e.positions.data()),
            static_cast<std::streamsize>(e.positions.size() * sizeof(double)));
    f.write(reinterpret_cast<const char*>(e.reflection.data()),
            static_cast<std::streamsize>(e.reflection.size() * sizeof(double)));
  }
}

inline std::vector<Ensemble> read_snapshots_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 8) != "PMVSNAP1") throw ConfigError(path + ": bad snapshot magic");
  std::uint32_t dim = 0, reserved = 0;
  std::uint64_t n = 0, count = 0;
  f.read(reinterpret_cast<char*>(&dim), 4);
  f.read(reinterpret_cast<char*>(&reserved), 4);
  f.read(reinterpret_cast<char*>(&n), 8);
  f.read(reinterpret_cast<char*>(&count), 8);
  std::vector<Ensemble> out(count);
  for (auto& e : out) {
    e.n = static_cast<int>(n);
    e.dim = static_cast<int>(dim);
    f.read(reinterpret_cast<char*>(&e.t), 8);
    e.positions.resize(n * dim);
    e.reflection.resize(n);
    f.read(reinterpret_cast<char*>(e.positions.data()),
           static_cast<std::streamsize>(e.positions.size() * sizeof(double)));
    f.read(reinterpret_cast<char*>(e.reflection.data()),
           static_cast<std::streamsize>(e.reflection.size() * sizeof(double)));
    if (!f) throw ConfigError(path + ": truncated snapshot file");
  }
  return out;
}

}  // namespace pmv
