#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "pmv/core.hpp"

namespace pmv {

/// Radial cost function psi on [0, inf) tabulated on a uniform grid, with
/// derivative tables and the summary constants the contraction-rate formulas
/// consume:
///   c1 = inf psi', c2 = sup psi', c_psi = sup r psi'(r)/psi(r),
///   c_monotone = sup_{t >= s} psi'(t)/psi'(s).
/// Families with a flatten radius l satisfy psi(r) = psi(r ∧ l) beyond the
/// grid (psi' = 0 there); others extrapolate linearly with the last slope.
/// c1/c2 also account for the chord slopes of the interpolant, so
/// c1 * r <= psi(r) <= c2 * r holds exactly for evaluated values.
class TabulatedCostFunction {
 public:
  TabulatedCostFunction() = default;

  static TabulatedCostFunction from_samples(double grid_step, std::vector<double> psi,
                                            std::vector<double> dpsi,
                                            std::vector<double> ddpsi, std::string tag,
                                            std::map<std::string, double> params = {},
                                            double flatten_l =
                                                std::numeric_limits<double>::infinity()) {
    TabulatedCostFunction f;
    f.h_ = grid_step;
    f.psi_ = std::move(psi);
    f.dpsi_ = std::move(dpsi);
    f.ddpsi_ = std::move(ddpsi);
    f.tag_ = std::move(tag);
    f.params_ = std::move(params);
    f.flatten_l_ = flatten_l;
    f.validate();
    f.compute_constants();
    return f;
  }

  double grid_step() const { return h_; }
  std::size_t size() const { return psi_.size(); }
  double grid_point(std::size_t i) const { return h_ * static_cast<double>(i); }
  double grid_max() const { return grid_point(size() - 1); }
  const std::vector<double>& psi_values() const { return psi_; }
  const std::vector<double>& dpsi_values() const { return dpsi_; }
  const std::vector<double>& ddpsi_values() const { return ddpsi_; }
  const std::string& tag() const { return tag_; }
  const std::map<std::string, double>& params() const { return params_; }
  double flatten_radius() const { return flatten_l_; }
  bool has_flatten() const { return std::isfinite(flatten_l_); }

  double c1() const { return c1_; }
  double c2() const { return c2_; }
  double c_psi() const { return c_psi_; }
  double c_monotone() const { return c_monotone_; }

  double psi(double r) const { return eval(psi_, r, /*beyond=*/tail_psi(r)); }

  double dpsi(double r) const {
    if (r >= flatten_l_) return 0.0;
    return eval(dpsi_, r, dpsi_.back());
  }

  double ddpsi(double r) const {
    if (r >= flatten_l_) return 0.0;
    return eval(ddpsi_, r, 0.0);
  }

 private:
  double tail_psi(double r) const {
    if (r >= flatten_l_) return psi_.back();
    return psi_.back() + dpsi_.back() * (r - grid_max());
  }

  double eval(const std::vector<double>& table, double r, double beyond) const {
    if (r < 0.0) throw CostError("cost function: negative radius");
    if (r >= flatten_l_) return (&table == &psi_) ? psi_.back() : 0.0;
    const double u = r / h_;
    const auto i = static_cast<std::size_t>(u);
    if (i + 1 >= table.size()) return beyond;
    const double frac = u - static_cast<double>(i);
    return table[i] + frac * (table[i + 1] - table[i]);
  }

  void validate() const {
    if (psi_.size() < 2 || psi_.size() != dpsi_.size() || psi_.size() != ddpsi_.size())
      throw CostError("cost function: inconsistent tables");
    if (h_ <= 0.0) throw CostError("cost function: grid step must be > 0");
    if (psi_.front() != 0.0) throw CostError("cost function: psi(0) must be 0");
    for (std::size_t i = 1; i < psi_.size(); ++i)
      if (psi_[i] + 1e-15 < psi_[i - 1])
        throw CostError("cost function: psi must be nondecreasing");
  }

  void compute_constants() {
    c1_ = std::numeric_limits<double>::infinity();
    c2_ = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < dpsi_.size(); ++i) {
      const double r = grid_point(i);
      if (r >= flatten_l_) break;
      c1_ = std::min(c1_, dpsi_[i]);
      c2_ = std::max(c2_, dpsi_[i]);
    }
    for (std::size_t i = 0; i + 1 < psi_.size(); ++i) {
      if (grid_point(i + 1) > flatten_l_) break;
      const double chord = (psi_[i + 1] - psi_[i]) / h_;
      c1_ = std::min(c1_, chord);
      c2_ = std::max(c2_, chord);
    }
    // families whose true inf psi' sits beyond the tabulated range declare it
    if (auto it = params_.find("c1_limit"); it != params_.end())
      c1_ = std::min(c1_, it->second);
    c_psi_ = 0.0;
    for (std::size_t i = 1; i < psi_.size(); ++i) {
      if (psi_[i] <= 0.0) continue;
      c_psi_ = std::max(c_psi_, grid_point(i) * dpsi_[i] / psi_[i]);
    }
    // sup over t >= s of psi'(t)/psi'(s), from the running minimum.
    c_monotone_ = 0.0;
    double run_min = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < dpsi_.size(); ++i) {
      run_min = std::min(run_min, dpsi_[i]);
      if (run_min > 0.0) c_monotone_ = std::max(c_monotone_, dpsi_[i] / run_min);
    }
  }

  double h_ = 1.0;
  std::vector<double> psi_, dpsi_, ddpsi_;
  std::string tag_ = "custom";
  std::map<std::string, double> params_;
  double flatten_l_ = std::numeric_limits<double>::infinity();
  double c1_ = 0.0, c2_ = 0.0, c_psi_ = 0.0, c_monotone_ = 0.0;
};

}  // namespace pmv
