#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <queue>
#include <span>
#include <vector>

#include "pmv/cost_function.hpp"
#include "pmv/core.hpp"
#include "pmv/engine.hpp"
#include "pmv/noise.hpp"

namespace pmv {

/// Ground cost between matched particles. Power costs give W1/W2; a
/// tabulated radial psi gives W_psi; the weighted variant multiplies by
/// 1 + beta V(x) + beta V(y).
struct CostSpec {
  enum class Kind { W1, W2, Psi, PsiWeighted };
  Kind kind = Kind::W2;
  std::shared_ptr<const TabulatedCostFunction> psi;
  std::function<double(std::span<const double>)> V;
  double beta = 0.0;

  static CostSpec w1() { return CostSpec{Kind::W1, nullptr, nullptr, 0.0}; }
  static CostSpec w2() { return CostSpec{Kind::W2, nullptr, nullptr, 0.0}; }
  static CostSpec psi_cost(std::shared_ptr<const TabulatedCostFunction> table) {
    return CostSpec{Kind::Psi, std::move(table), nullptr, 0.0};
  }
  static CostSpec psi_weighted(std::shared_ptr<const TabulatedCostFunction> table,
                               std::function<double(std::span<const double>)> V, double beta) {
    if (beta <= 0.0) throw CostError("weighted cost: beta must be > 0");
    return CostSpec{Kind::PsiWeighted, std::move(table), std::move(V), beta};
  }
};

struct TransportPlanResult {
  double distance = 0.0;
  std::vector<int> assignment;  // row i of A matched to assignment[i] of B
  int iterations = 0;
  bool optimal = false;
};

namespace detail {

/// Exact dense assignment by shortest augmenting paths with potentials
/// (Jonker-Volgenant style, O(n^3)). No epsilon scaling: comparisons are
/// exact, so the optimum is exact up to fp summation of the chosen entries.
struct AssignmentSolve {
  std::vector<int> row_to_col;
  double total = 0.0;
  int augmentations = 0;
};

inline AssignmentSolve solve_assignment(const std::vector<double>& cost, int n) {
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(n) + 1, 0);  // col -> row (1-based)
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  std::vector<double> minv(static_cast<std::size_t>(n) + 1);
  std::vector<char> used(static_cast<std::size_t>(n) + 1);
  int augment_steps = 0;

  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = match[static_cast<std::size_t>(j0)];
      double delta = kInf;
      int j1 = -1;
      const double* row = cost.data() + static_cast<std::size_t>(i0 - 1) * n;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = row[j - 1] - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
      ++augment_steps;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }

  AssignmentSolve out;
  out.row_to_col.assign(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) out.row_to_col[static_cast<std::size_t>(match[j]) - 1] = j - 1;
  for (int i = 0; i < n; ++i)
    out.total += cost[static_cast<std::size_t>(i) * n + out.row_to_col[static_cast<std::size_t>(i)]];
  out.augmentations = augment_steps;
  return out;
}

inline void check_pair(const Ensemble& a, const Ensemble& b) {
  if (a.n != b.n)
    throw CostError("transport: particle counts differ (" + std::to_string(a.n) + " vs " +
                    std::to_string(b.n) + "); resample upstream");
  if (a.dim != b.dim) throw CostError("transport: dimension mismatch");
}

inline std::vector<double> weight_values(const Ensemble& e, const CostSpec& cost,
                                         const char* side) {
  std::vector<double> w(static_cast<std::size_t>(e.n));
  for (int i = 0; i < e.n; ++i) {
    w[static_cast<std::size_t>(i)] = cost.V(e.particle(i));
    if (!std::isfinite(w[static_cast<std::size_t>(i)]))
      throw CostError(std::string("weighted cost: V overflow at ") + side + " particle " +
                      std::to_string(i));
  }
  return w;
}

inline std::vector<int> argsort_1d(const Ensemble& e) {
  std::vector<int> idx(static_cast<std::size_t>(e.n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](int a, int b) { return e.positions[static_cast<std::size_t>(a)] <
                                       e.positions[static_cast<std::size_t>(b)]; });
  return idx;
}

}  // namespace detail

/// Exact optimal transport between equal-size empirical measures; the optimal
/// coupling is a permutation. 1-D power costs use the monotone (sorted)
/// matching, which is optimal for convex |x-y|^p; everything else goes
/// through the assignment solver.
inline TransportPlanResult ot_exact(const Ensemble& A, const Ensemble& B,
                                    const CostSpec& cost) {
  detail::check_pair(A, B);
  const int n = A.n;
  TransportPlanResult res;
  res.assignment.assign(static_cast<std::size_t>(n), -1);

  const bool power = cost.kind == CostSpec::Kind::W1 || cost.kind == CostSpec::Kind::W2;
  if (A.dim == 1 && power) {
    const auto ia = detail::argsort_1d(A);
    const auto ib = detail::argsort_1d(B);
    double total = 0.0;
    for (int k = 0; k < n; ++k) {
      const double d = std::abs(A.positions[static_cast<std::size_t>(ia[k])] -
                                B.positions[static_cast<std::size_t>(ib[k])]);
      total += (cost.kind == CostSpec::Kind::W2) ? d * d : d;
      res.assignment[static_cast<std::size_t>(ia[k])] = ib[k];
    }
    const double mean = total / static_cast<double>(n);
    res.distance = (cost.kind == CostSpec::Kind::W2) ? std::sqrt(mean) : mean;
    res.optimal = true;
    return res;
  }

  if (n > 8192) throw CostError("ot_exact: N > 8192; use the sliced surrogate");
  if ((cost.kind == CostSpec::Kind::Psi || cost.kind == CostSpec::Kind::PsiWeighted) &&
      !cost.psi)
    throw CostError("ot_exact: psi cost requires a tabulated cost function");

  std::vector<double> wa, wb;
  if (cost.kind == CostSpec::Kind::PsiWeighted) {
    wa = detail::weight_values(A, cost, "A");
    wb = detail::weight_values(B, cost, "B");
  }

  std::vector<double> c(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    auto xi = A.particle(i);
    for (int j = 0; j < n; ++j) {
      const double r = dist2(xi, B.particle(j));
      double e = 0.0;
      switch (cost.kind) {
        case CostSpec::Kind::W1:
          e = r;
          break;
        case CostSpec::Kind::W2:
          e = r * r;
          break;
        case CostSpec::Kind::Psi:
          e = cost.psi->psi(r);
          break;
        case CostSpec::Kind::PsiWeighted:
          e = cost.psi->psi(r) * (1.0 + cost.beta * (wa[static_cast<std::size_t>(i)] +
                                                     wb[static_cast<std::size_t>(j)]));
          break;
      }
      c[static_cast<std::size_t>(i) * n + j] = e;
    }
  }

  auto solve = detail::solve_assignment(c, n);
  res.assignment = std::move(solve.row_to_col);
  res.iterations = solve.augmentations;
  res.optimal = true;
  const double mean = solve.total / static_cast<double>(n);
  res.distance = (cost.kind == CostSpec::Kind::W2) ? std::sqrt(mean) : mean;
  return res;
}

/// Sliced W_p: average of the p-th power of the closed-form 1-D distance over
/// n_proj random unit directions (deterministic given the noise seed);
/// returns the p-th root. In d = 1 this equals the exact 1-D W_p.
inline double ot_sliced(const Ensemble& A, const Ensemble& B, int p, int n_proj,
                        const NoisePolicy& noise) {
  detail::check_pair(A, B);
  if (p != 1 && p != 2) throw CostError("ot_sliced: p must be 1 or 2");
  if (n_proj < 1) throw CostError("ot_sliced: need n_proj >= 1");
  const int d = A.dim;
  const int n = A.n;

  std::vector<double> dir(static_cast<std::size_t>(d));
  std::vector<double> pa(static_cast<std::size_t>(n)), pb(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (int j = 0; j < n_proj; ++j) {
    double nrm = 0.0;
    std::uint32_t block = 0;
    do {
      for (int k = 0; k < d; ++k) {
        dir[static_cast<std::size_t>(k)] =
            noise.gaussian(static_cast<std::uint32_t>(j), 0, StreamPurpose::Projection,
                           static_cast<std::uint16_t>(k), block);
      }
      nrm = norm2(dir);
      ++block;
    } while (nrm == 0.0);
    for (double& v : dir) v /= nrm;

    for (int i = 0; i < n; ++i) {
      pa[static_cast<std::size_t>(i)] = dot(A.particle(i), dir);
      pb[static_cast<std::size_t>(i)] = dot(B.particle(i), dir);
    }
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      const double diff = std::abs(pa[static_cast<std::size_t>(i)] -
                                   pb[static_cast<std::size_t>(i)]);
      s += (p == 2) ? diff * diff : diff;
    }
    acc += s / static_cast<double>(n);
  }
  acc /= static_cast<double>(n_proj);
  return (p == 2) ? std::sqrt(acc) : acc;
}

struct RatioResult {
  double value = 0.0;
  int dinkelbach_iterations = 0;
  bool converged = false;
};

/// Quasi-distance inf over couplings of (sum psi w) / (sum psi' w) with
/// w = 1 + beta V(x) + beta V(y). The infimum over the coupling polytope is
/// attained at a vertex (a permutation), so Dinkelbach's parametric iteration
/// with an exact assignment solve per step computes the exact infimum.
inline RatioResult ratio_quasidistance_full(const Ensemble& A, const Ensemble& B,
                                            const TabulatedCostFunction& psi,
                                            const std::function<double(std::span<const double>)>& V,
                                            double beta, double tol = 1e-10) {
  detail::check_pair(A, B);
  if (beta < 0.0) throw CostError("ratio_quasidistance: beta must be >= 0");
  const int n = A.n;
  if (n > 4096) throw CostError("ratio_quasidistance: N > 4096");

  CostSpec wspec = CostSpec::psi_weighted(
      std::shared_ptr<const TabulatedCostFunction>(&psi, [](const TabulatedCostFunction*) {}),
      V, beta > 0 ? beta : 1e-300);
  std::vector<double> wa = detail::weight_values(A, wspec, "A");
  std::vector<double> wb = detail::weight_values(B, wspec, "B");

  const std::size_t nn = static_cast<std::size_t>(n) * n;
  std::vector<double> num(nn), den(nn);
  for (int i = 0; i < n; ++i) {
    auto xi = A.particle(i);
    for (int j = 0; j < n; ++j) {
      const double r = dist2(xi, B.particle(j));
      const double w = 1.0 + beta * (wa[static_cast<std::size_t>(i)] +
                                     wb[static_cast<std::size_t>(j)]);
      const double dp = psi.dpsi(r);
      if (dp <= 0.0 && r < psi.flatten_radius())
        throw CostError("ratio_quasidistance: psi' <= 0 at r=" + std::to_string(r));
      num[static_cast<std::size_t>(i) * n + j] = psi.psi(r) * w / static_cast<double>(n);
      den[static_cast<std::size_t>(i) * n + j] = dp * w / static_cast<double>(n);
    }
  }

  auto plan_sums = [&](const std::vector<int>& perm) {
    double sn = 0.0, sd = 0.0;
    for (int i = 0; i < n; ++i) {
      sn += num[static_cast<std::size_t>(i) * n + perm[static_cast<std::size_t>(i)]];
      sd += den[static_cast<std::size_t>(i) * n + perm[static_cast<std::size_t>(i)]];
    }
    return std::pair<double, double>(sn, sd);
  };

  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  auto [sn0, sd0] = plan_sums(perm);
  double q = (sd0 > 0.0) ? sn0 / sd0 : 1e12;
  if (sn0 == 0.0) return {0.0, 0, true};  // identical supports match for free

  RatioResult out;
  std::vector<double> param(nn);
  for (int it = 0; it < 100; ++it) {
    for (std::size_t e = 0; e < nn; ++e) param[e] = num[e] - q * den[e];
    auto solve = detail::solve_assignment(param, n);
    double f = 0.0;
    for (int i = 0; i < n; ++i)
      f += param[static_cast<std::size_t>(i) * n + solve.row_to_col[static_cast<std::size_t>(i)]];
    out.dinkelbach_iterations = it + 1;
    auto [sn, sd] = plan_sums(solve.row_to_col);
    if (std::abs(f) <= tol) {
      out.value = q;
      out.converged = true;
      return out;
    }
    if (sd <= 0.0) {
      out.value = std::numeric_limits<double>::infinity();
      return out;
    }
    q = sn / sd;
  }
  out.value = q;
  return out;
}

inline double ratio_quasidistance(const Ensemble& A, const Ensemble& B,
                                  const TabulatedCostFunction& psi,
                                  const std::function<double(std::span<const double>)>& V,
                                  double beta) {
  return ratio_quasidistance_full(A, B, psi, V, beta).value;
}

// ---------------------------------------------------------------------------
// k-NN relative entropy estimation
// ---------------------------------------------------------------------------

namespace detail {

class KdTree {
 public:
  KdTree(const double* pts, int n, int d) : pts_(pts), n_(n), d_(d) {
    idx_.resize(static_cast<std::size_t>(n));
    std::iota(idx_.begin(), idx_.end(), 0);
    nodes_.reserve(static_cast<std::size_t>(2 * n) / kLeaf + 2);
    root_ = build(0, n, 0);
  }

  /// Distance to the k-th nearest neighbor of q, optionally excluding one
  /// source index (for self-queries).
  double kth_distance(const double* q, int k, int exclude = -1) const {
    std::priority_queue<double> heap;  // max-heap of the k best distances
    search(root_, q, k, exclude, heap);
    if (static_cast<int>(heap.size()) < k)
      throw CostError("knn: not enough neighbors");
    return heap.top();
  }

 private:
  static constexpr int kLeaf = 16;

  struct Node {
    int lo, hi;          // index range for leaves
    int axis = -1;
    double split = 0.0;
    int left = -1, right = -1;
  };

  int build(int lo, int hi, int depth) {
    Node nd;
    nd.lo = lo;
    nd.hi = hi;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(nd);
    if (hi - lo <= kLeaf) return id;
    const int axis = depth % d_;
    const int mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                     [&](int a, int b) { return coord(a, axis) < coord(b, axis); });
    nodes_[static_cast<std::size_t>(id)].axis = axis;
    nodes_[static_cast<std::size_t>(id)].split = coord(idx_[static_cast<std::size_t>(mid)], axis);
    const int left = build(lo, mid, depth + 1);
    const int right = build(mid, hi, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
  }

  double coord(int i, int axis) const {
    return pts_[static_cast<std::size_t>(i) * d_ + axis];
  }

  void search(int id, const double* q, int k, int exclude,
              std::priority_queue<double>& heap) const {
    const Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (nd.axis < 0) {
      for (int e = nd.lo; e < nd.hi; ++e) {
        const int i = idx_[static_cast<std::size_t>(e)];
        if (i == exclude) continue;
        double s = 0.0;
        for (int a = 0; a < d_; ++a) {
          const double diff = q[a] - coord(i, a);
          s += diff * diff;
        }
        const double dist = std::sqrt(s);
        if (static_cast<int>(heap.size()) < k) {
          heap.push(dist);
        } else if (dist < heap.top()) {
          heap.pop();
          heap.push(dist);
        }
      }
      return;
    }
    const double delta = q[nd.axis] - nd.split;
    const int near = (delta <= 0.0) ? nd.left : nd.right;
    const int far = (delta <= 0.0) ? nd.right : nd.left;
    search(near, q, k, exclude, heap);
    if (static_cast<int>(heap.size()) < k || std::abs(delta) <= heap.top())
      search(far, q, k, exclude, heap);
  }

  const double* pts_;
  int n_, d_;
  std::vector<int> idx_;
  std::vector<Node> nodes_;
  int root_ = 0;
};

inline double knn_divergence_once(const std::vector<double>& a, int na,
                                  const std::vector<double>& b, int nb, int d, int k,
                                  bool& zero_radius) {
  KdTree ta(a.data(), na, d);
  KdTree tb(b.data(), nb, d);
  zero_radius = false;
  double acc = 0.0;
  for (int i = 0; i < na; ++i) {
    const double* q = a.data() + static_cast<std::size_t>(i) * d;
    const double rho = ta.kth_distance(q, k, i);
    const double nu = tb.kth_distance(q, k);
    if (rho <= 0.0 || nu <= 0.0) {
      zero_radius = true;
      return 0.0;
    }
    acc += std::log(nu / rho);
  }
  return static_cast<double>(d) / static_cast<double>(na) * acc +
         std::log(static_cast<double>(nb) / static_cast<double>(na - 1));
}

}  // namespace detail

/// k-NN estimator of the relative entropy H(law(A) | law(B)) from samples of
/// continuous laws. Consistent but biased at finite N; treat it as a
/// diagnostic, not a tight gate. Coincident points get one deterministic
/// 1e-12 jitter retry before erroring out.
inline double relative_entropy_knn(std::span<const double> a_flat, int na,
                                   std::span<const double> b_flat, int nb, int d, int k) {
  if (k < 1) throw CostError("relative_entropy_knn: k must be >= 1");
  if (na < k + 1 || nb < k + 1)
    throw CostError("relative_entropy_knn: need at least k+1 samples on each side");
  std::vector<double> a(a_flat.begin(), a_flat.end());
  std::vector<double> b(b_flat.begin(), b_flat.end());

  bool zero = false;
  double est = detail::knn_divergence_once(a, na, b, nb, d, k, zero);
  if (!zero) return est;

  NoisePolicy jitter(0x9e3779b97f4a7c15ull);
  for (int i = 0; i < na; ++i)
    for (int c = 0; c < d; ++c)
      a[static_cast<std::size_t>(i) * d + c] +=
          1e-12 * (jitter.uniform(static_cast<std::uint32_t>(i), 0, StreamPurpose::Jitter,
                                  static_cast<std::uint16_t>(c)) -
                   0.5);
  for (int i = 0; i < nb; ++i)
    for (int c = 0; c < d; ++c)
      b[static_cast<std::size_t>(i) * d + c] +=
          1e-12 * (jitter.uniform(static_cast<std::uint32_t>(i), 1, StreamPurpose::Jitter,
                                  static_cast<std::uint16_t>(c)) -
                   0.5);
  est = detail::knn_divergence_once(a, na, b, nb, d, k, zero);
  if (zero)
    throw CostError("relative_entropy_knn: zero k-NN radius persists after jitter");
  return est;
}

inline double relative_entropy_knn(const Ensemble& A, const Ensemble& B, int k) {
  if (A.dim != B.dim) throw CostError("relative_entropy_knn: dimension mismatch");
  return relative_entropy_knn(A.positions, A.n, B.positions, B.n, A.dim, k);
}

/// Debug dump of the full ground-cost matrix (small instances only).
inline void dump_cost_matrix_csv(const Ensemble& A, const Ensemble& B, const CostSpec& cost,
                                 const std::string& path) {
  detail::check_pair(A, B);
  if (A.n > 512) throw CostError("cost matrix dump capped at N <= 512");
  std::vector<double> wa, wb;
  if (cost.kind == CostSpec::Kind::PsiWeighted) {
    wa = detail::weight_values(A, cost, "A");
    wb = detail::weight_values(B, cost, "B");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path + " for writing");
  for (int i = 0; i < A.n; ++i) {
    std::string line;
    for (int j = 0; j < B.n; ++j) {
      const double r = dist2(A.particle(i), B.particle(j));
      double e = 0.0;
      switch (cost.kind) {
        case CostSpec::Kind::W1:
          e = r;
          break;
        case CostSpec::Kind::W2:
          e = r * r;
          break;
        case CostSpec::Kind::Psi:
          e = cost.psi->psi(r);
          break;
        case CostSpec::Kind::PsiWeighted:
          e = cost.psi->psi(r) * (1.0 + cost.beta * (wa[static_cast<std::size_t>(i)] +
                                                     wb[static_cast<std::size_t>(j)]));
          break;
      }
      if (j) line += ',';
      detail::append_double(line, e);
    }
    line += '\n';
    f << line;
  }
}

/// Stopping metric for fixed-point iteration: exact where cheap, sliced
/// beyond the documented exact-solve cap.
inline double default_stopping_distance(const Ensemble& a, const Ensemble& b,
                                        std::uint64_t seed = 0x5eedu) {
  if (a.dim == 1) return ot_exact(a, b, CostSpec::w2()).distance;
  if (a.n <= 1024) return ot_exact(a, b, CostSpec::w2()).distance;
  NoisePolicy noise(seed);
  return ot_sliced(a, b, 2, 64, noise);
}

inline FixedPointResult periodic_fixed_point(const Scenario& scn, const SimConfig& cfg,
                                             double eps_fix, int m_consec,
                                             int max_periods = 256) {
  return periodic_fixed_point(
      scn, cfg, eps_fix, m_consec,
      [](const Ensemble& a, const Ensemble& b) { return default_stopping_distance(a, b); },
      max_periods);
}

}  // namespace pmv
