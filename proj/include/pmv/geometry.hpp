#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pmv/core.hpp"

namespace pmv {

/// Convex domain with membership, metric projection and inward unit normals.
/// Variants: whole space, ball, axis-aligned box, intersection of half-spaces
/// { x : <a_k, x> <= c_k } with unit normals a_k.
class ConvexDomain {
 public:
  enum class Kind { WholeSpace, Ball, Box, Halfspaces };

  ConvexDomain() : kind_(Kind::WholeSpace), dim_(1) {}

  static ConvexDomain whole_space(int dim) {
    ConvexDomain d;
    d.kind_ = Kind::WholeSpace;
    d.dim_ = dim;
    return d;
  }

  static ConvexDomain ball(std::vector<double> center, double radius) {
    if (radius <= 0.0) throw GeometryError("ball: radius must be > 0");
    ConvexDomain d;
    d.kind_ = Kind::Ball;
    d.dim_ = static_cast<int>(center.size());
    d.center_ = std::move(center);
    d.radius_ = radius;
    return d;
  }

  static ConvexDomain box(std::vector<double> lower, std::vector<double> upper) {
    if (lower.size() != upper.size()) throw GeometryError("box: bound size mismatch");
    for (std::size_t i = 0; i < lower.size(); ++i)
      if (!(lower[i] < upper[i])) throw GeometryError("box: need lower < upper componentwise");
    ConvexDomain d;
    d.kind_ = Kind::Box;
    d.dim_ = static_cast<int>(lower.size());
    d.lower_ = std::move(lower);
    d.upper_ = std::move(upper);
    return d;
  }

  // Normals are normalized here; offsets are rescaled to match.
  static ConvexDomain halfspaces(int dim, std::vector<std::vector<double>> normals,
                                 std::vector<double> offsets) {
    if (normals.size() != offsets.size() || normals.empty())
      throw GeometryError("halfspaces: need one offset per normal");
    ConvexDomain d;
    d.kind_ = Kind::Halfspaces;
    d.dim_ = dim;
    for (std::size_t k = 0; k < normals.size(); ++k) {
      if (static_cast<int>(normals[k].size()) != dim)
        throw GeometryError("halfspaces: normal dimension mismatch");
      const double nn = norm2(normals[k]);
      if (nn <= 0.0) throw GeometryError("halfspaces: zero normal");
      for (double& v : normals[k]) v /= nn;
      d.offsets_.push_back(offsets[k] / nn);
      d.normals_.push_back(std::move(normals[k]));
    }
    return d;
  }

  Kind kind() const { return kind_; }
  int dim() const { return dim_; }
  bool is_whole_space() const { return kind_ == Kind::WholeSpace; }
  const std::vector<double>& ball_center() const { return center_; }
  double ball_radius() const { return radius_; }
  const std::vector<double>& box_lower() const { return lower_; }
  const std::vector<double>& box_upper() const { return upper_; }
  const std::vector<std::vector<double>>& hs_normals() const { return normals_; }
  const std::vector<double>& hs_offsets() const { return offsets_; }

  bool contains(std::span<const double> x) const {
    check_dim(x);
    switch (kind_) {
      case Kind::WholeSpace:
        return true;
      case Kind::Ball:
        return dist2(x, center_) <= radius_;
      case Kind::Box:
        for (int i = 0; i < dim_; ++i)
          if (x[i] < lower_[i] || x[i] > upper_[i]) return false;
        return true;
      case Kind::Halfspaces:
        for (std::size_t k = 0; k < normals_.size(); ++k)
          if (dot(normals_[k], x) > offsets_[k]) return false;
        return true;
    }
    return true;
  }

  /// Projects x onto the closure in place; returns |x - proj(x)|.
  double project_inplace(std::span<double> x) const {
    check_dim(x);
    switch (kind_) {
      case Kind::WholeSpace:
        return 0.0;
      case Kind::Ball: {
        double r2 = 0.0;
        for (int i = 0; i < dim_; ++i) {
          const double d = x[i] - center_[i];
          r2 += d * d;
        }
        const double r = std::sqrt(r2);
        if (r <= radius_) return 0.0;
        const double scale = radius_ / r;
        for (int i = 0; i < dim_; ++i) x[i] = center_[i] + scale * (x[i] - center_[i]);
        // membership must survive the exact closed-set comparison; pull in by
        // ulps until it does
        for (int guard = 0; guard < 64 && dist2(x, center_) > radius_; ++guard)
          for (int i = 0; i < dim_; ++i)
            x[i] = center_[i] + (1.0 - 2.3e-16) * (x[i] - center_[i]);
        return r - radius_;
      }
      case Kind::Box: {
        double disp2 = 0.0;
        for (int i = 0; i < dim_; ++i) {
          const double clamped = std::min(std::max(x[i], lower_[i]), upper_[i]);
          const double d = x[i] - clamped;
          disp2 += d * d;
          x[i] = clamped;
        }
        return std::sqrt(disp2);
      }
      case Kind::Halfspaces:
        return project_halfspaces(x);
    }
    return 0.0;
  }

  struct Projection {
    std::vector<double> point;
    double displacement = 0.0;
  };

  Projection project(std::span<const double> x) const {
    Projection p;
    p.point.assign(x.begin(), x.end());
    p.displacement = project_inplace(p.point);
    return p;
  }

  /// Inward unit normal at a point within boundary_tol of the boundary.
  /// At a box corner (or multi-active half-space corner) returns the
  /// normalized sum of the active face normals.
  std::vector<double> inward_normal(std::span<const double> x,
                                    double boundary_tol = 1e-9) const {
    check_dim(x);
    std::vector<double> n(dim_, 0.0);
    switch (kind_) {
      case Kind::WholeSpace:
        throw GeometryError("inward_normal: whole space has no boundary");
      case Kind::Ball: {
        const double r = dist2(x, center_);
        if (std::abs(r - radius_) > boundary_tol)
          throw GeometryError("inward_normal: point not on ball boundary");
        if (r == 0.0) throw GeometryError("inward_normal: degenerate point at ball center");
        for (int i = 0; i < dim_; ++i) n[i] = (center_[i] - x[i]) / r;
        return n;
      }
      case Kind::Box: {
        bool any = false;
        for (int i = 0; i < dim_; ++i) {
          if (std::abs(x[i] - lower_[i]) <= boundary_tol) {
            n[i] += 1.0;
            any = true;
          }
          if (std::abs(x[i] - upper_[i]) <= boundary_tol) {
            n[i] -= 1.0;
            any = true;
          }
        }
        if (!any || !contains_within(x, boundary_tol))
          throw GeometryError("inward_normal: point not on box boundary");
        const double nn = norm2(n);
        for (double& v : n) v /= nn;
        return n;
      }
      case Kind::Halfspaces: {
        bool any = false;
        for (std::size_t k = 0; k < normals_.size(); ++k) {
          if (std::abs(dot(normals_[k], x) - offsets_[k]) <= boundary_tol) {
            for (int i = 0; i < dim_; ++i) n[i] -= normals_[k][i];
            any = true;
          }
        }
        if (!any || !contains_within(x, boundary_tol))
          throw GeometryError("inward_normal: point not on boundary");
        const double nn = norm2(n);
        if (nn == 0.0) throw GeometryError("inward_normal: active normals cancel");
        for (double& v : n) v /= nn;
        return n;
      }
    }
    return n;
  }

  std::string describe() const {
    switch (kind_) {
      case Kind::WholeSpace:
        return "whole space (d=" + std::to_string(dim_) + ")";
      case Kind::Ball:
        return "ball (d=" + std::to_string(dim_) + ", r=" + std::to_string(radius_) + ")";
      case Kind::Box:
        return "box (d=" + std::to_string(dim_) + ")";
      case Kind::Halfspaces:
        return "halfspace intersection (d=" + std::to_string(dim_) + ", k=" +
               std::to_string(normals_.size()) + ")";
    }
    return "?";
  }

 private:
  void check_dim(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != dim_)
      throw GeometryError("domain: dimension mismatch (" + std::to_string(x.size()) + " vs " +
                          std::to_string(dim_) + ")");
  }

  bool contains_within(std::span<const double> x, double tol) const {
    Projection p = project(x);
    return p.displacement <= tol;
  }

  // Dykstra's alternating projection onto the half-space intersection.
  // Converges to the metric projection for convex pieces; half-space
  // projections are closed-form.
  double project_halfspaces(std::span<double> x) const {
    const std::size_t K = normals_.size();
    std::vector<double> x0(x.begin(), x.end());
    bool inside = true;
    for (std::size_t k = 0; k < K; ++k)
      if (dot(normals_[k], x) > offsets_[k]) inside = false;
    if (inside) return 0.0;

    std::vector<std::vector<double>> corr(K, std::vector<double>(dim_, 0.0));
    std::vector<double> prev(dim_);
    const int max_sweeps = 20000;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
      std::copy(x.begin(), x.end(), prev.begin());
      for (std::size_t k = 0; k < K; ++k) {
        for (int i = 0; i < dim_; ++i) x[i] += corr[k][i];
        const double excess = dot(normals_[k], x) - offsets_[k];
        const double step = std::max(excess, 0.0);
        for (int i = 0; i < dim_; ++i) {
          const double projected = x[i] - step * normals_[k][i];
          corr[k][i] = x[i] - projected;
          x[i] = projected;
        }
      }
      double change = 0.0, scale = 1.0;
      for (int i = 0; i < dim_; ++i) {
        change = std::max(change, std::abs(x[i] - prev[i]));
        scale = std::max(scale, std::abs(x[i]));
      }
      if (change <= 1e-15 * scale) {
        double feas = 0.0;
        for (std::size_t k = 0; k < K; ++k)
          feas = std::max(feas, dot(normals_[k], x) - offsets_[k]);
        if (feas <= 1e-10 * scale) {
          enforce_halfspace_membership(x);
          return dist2(x, x0);
        }
      }
    }
    throw GeometryError("project: Dykstra iteration did not converge");
  }

  // Dykstra converges to the projection up to its stopping tolerance; the
  // leftover constraint violations are ulp-scale and must be squeezed out so
  // the exact closed-set membership test holds on returned points.
  void enforce_halfspace_membership(std::span<double> x) const {
    for (int pass = 0; pass < 256; ++pass) {
      double worst = 0.0;
      std::size_t arg = 0;
      for (std::size_t k = 0; k < normals_.size(); ++k) {
        const double excess = dot(normals_[k], x) - offsets_[k];
        if (excess > worst) {
          worst = excess;
          arg = k;
        }
      }
      if (worst <= 0.0) return;
      const double overshoot =
          worst + 4.0 * 2.3e-16 * (std::abs(offsets_[arg]) + norm2(x) + 1.0);
      for (int i = 0; i < dim_; ++i) x[i] -= overshoot * normals_[arg][i];
    }
    throw GeometryError("project: could not certify membership after cleanup");
  }

  Kind kind_;
  int dim_;
  std::vector<double> center_;
  double radius_ = 0.0;
  std::vector<double> lower_, upper_;
  std::vector<std::vector<double>> normals_;
  std::vector<double> offsets_;
};

}  // namespace pmv
