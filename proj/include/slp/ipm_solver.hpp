#pragma once

// Classical log-barrier interior-point baseline for the robust SLP power
// minimization problem: sequential minimization of ||w||^2 + upsilon*B(w)
// over a geometrically decreasing barrier weight. The inner minimizer is
// gradient descent with a Barzilai-Borwein trial step and Armijo
// backtracking; dimension is 2M so nothing heavier is warranted.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "slp/barrier_prox.hpp"
#include "slp/ci_geometry.hpp"

namespace slp {

struct SolverOptions {
  double upsilon0 = 1.0;
  double shrink = 0.2;      // barrier decrease factor, in (0,1)
  double inner_tol = 1e-8;  // gradient-norm tolerance
  int max_outer = 12;
  int max_inner = 500;
};

struct InfeasibleError : std::runtime_error {
  double max_margin;
  explicit InfeasibleError(double margin)
      : std::runtime_error("no feasible point found (max margin " +
                           std::to_string(margin) + ")"),
        max_margin(margin) {}
};

struct SolveResult {
  PrecoderVec w2;
  double power = 0.0;
  int iterations = 0;  // total inner iterations
  std::vector<double> stage_powers;
  double final_upsilon = 0.0;
  double certificate = 0.0;  // upsilon * ||grad|| at exit
};

struct CertifyReport {
  double power = 0.0;
  double max_margin = 0.0;
  bool feasible = false;
  std::vector<std::pair<double, double>> user_margins;  // (g1, g2) per user
};

inline CertifyReport certify(const std::vector<CiInstance>& instances,
                             const RVec& w2) {
  CertifyReport rep;
  rep.power = w2.squaredNorm();
  rep.max_margin = -std::numeric_limits<double>::infinity();
  for (const CiInstance& inst : instances) {
    const auto [g1, g2] = constraint_margins(inst, w2);
    rep.user_margins.emplace_back(g1, g2);
    rep.max_margin = std::max(rep.max_margin, std::max(g1, g2));
  }
  rep.feasible = rep.max_margin < 0.0;
  return rep;
}

namespace detail {

inline double worst_margin(const std::vector<CiInstance>& instances,
                           const RVec& w) {
  double worst = -std::numeric_limits<double>::infinity();
  for (const CiInstance& inst : instances) {
    const auto [g1, g2] = constraint_margins(inst, w);
    worst = std::max(worst, std::max(g1, g2));
  }
  return worst;
}

// doubling scan along a fixed direction; margins are affine in the scale,
// so one extra doubling past the first feasible scale lands comfortably in
// the interior rather than hugging the boundary
inline bool scale_until_feasible(const std::vector<CiInstance>& instances,
                                 const RVec& d, double t0, RVec& out,
                                 double& best_margin) {
  double t = t0;
  for (int it = 0; it < 60; ++it) {
    const RVec w = t * d;
    const double worst = worst_margin(instances, w);
    if (worst < -1e-6) {
      const RVec deeper = 2.0 * t * d;
      out = worst_margin(instances, deeper) < worst ? deeper : w;
      return true;
    }
    best_margin = std::min(best_margin, worst);
    t *= 2.0;
  }
  return false;
}

}  // namespace detail

// Scales the matched-filter direction sum_i psi_i by successive doubling
// until all 2K margins are strictly below -1e-6. When that direction is
// blocked by cross-user interference, falls back to the vertex direction
// (the least-squares solution of u_li' d = -1 over all margin normals)
// before reporting infeasibility.
inline PrecoderVec find_feasible_start(
    const std::vector<CiInstance>& instances) {
  if (instances.empty())
    throw std::invalid_argument("find_feasible_start: no instances");
  const int n = instances.front().dim();
  double a_max = 0.0;
  for (const CiInstance& inst : instances)
    a_max = std::max(a_max, inst.threshold());
  double best_margin = std::numeric_limits<double>::infinity();
  RVec out;

  RVec d = RVec::Zero(n);
  for (const CiInstance& inst : instances) d += inst.psi;
  if (d.norm() > 1e-12) {
    const double t0 = a_max / (1.0 + d.squaredNorm());
    if (detail::scale_until_feasible(instances, d, t0, out, best_margin))
      return PrecoderVec(out);
  }

  const int rows = 2 * static_cast<int>(instances.size());
  RMat u(rows, n);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    u.row(2 * i) = instances[i].u1.transpose();
    u.row(2 * i + 1) = instances[i].u2.transpose();
  }
  const RVec d_vertex =
      u.colPivHouseholderQr().solve(-RVec::Ones(rows));
  if (d_vertex.allFinite() && d_vertex.norm() > 1e-12) {
    const double t0 = a_max / (1.0 + d_vertex.squaredNorm());
    if (detail::scale_until_feasible(instances, d_vertex, t0, out,
                                     best_margin))
      return PrecoderVec(out);
  }
  throw InfeasibleError(best_margin);
}

namespace detail {

inline double barrier_objective(const std::vector<CiInstance>& instances,
                                const RVec& w, double upsilon) {
  const double b = barrier_value(instances, w);
  if (!std::isfinite(b)) return std::numeric_limits<double>::infinity();
  return w.squaredNorm() + upsilon * b;
}

inline RVec barrier_gradient(const std::vector<CiInstance>& instances,
                             const RVec& w, double upsilon) {
  RVec g = 2.0 * w;
  const double wn = w.norm();
  for (const CiInstance& inst : instances) {
    const auto [g1, g2] = constraint_margins(inst, w);
    const double qs = inst.q_norm_scale();
    RVec norm_grad = RVec::Zero(w.size());
    if (wn > 1e-300) norm_grad = (inst.delta * qs / wn) * w;
    g += upsilon * ((inst.u1 + norm_grad) / (-g1) +
                    (inst.u2 + norm_grad) / (-g2));
  }
  return g;
}

inline RMat barrier_hessian(const std::vector<CiInstance>& instances,
                            const RVec& w, double upsilon) {
  const int n = static_cast<int>(w.size());
  RMat h = 2.0 * RMat::Identity(n, n);
  const double wn = w.norm();
  for (const CiInstance& inst : instances) {
    const auto [g1, g2] = constraint_margins(inst, w);
    const double dq = inst.delta * inst.q_norm_scale();
    RVec norm_grad = RVec::Zero(n);
    RMat norm_hess = RMat::Zero(n, n);
    if (wn > 1e-300 && dq > 0.0) {
      const RVec wu = w / wn;
      norm_grad = dq * wu;
      norm_hess = (dq / wn) * (RMat::Identity(n, n) - wu * wu.transpose());
    }
    const RVec dg1 = inst.u1 + norm_grad;
    const RVec dg2 = inst.u2 + norm_grad;
    h += upsilon * ((dg1 * dg1.transpose()) / (g1 * g1) + norm_hess / (-g1));
    h += upsilon * ((dg2 * dg2.transpose()) / (g2 * g2) + norm_hess / (-g2));
  }
  return h;
}

// Damped Newton on the barrier objective from a strictly feasible start
// (Armijo backtracking, c = 1e-4, halving). The objective is convex, so the
// Newton system is PSD; a small Levenberg shift covers the near-singular
// case. Returns the iteration count and puts upsilon*||grad|| into
// certificate.
inline int minimize_stage(const std::vector<CiInstance>& instances, RVec& w,
                          double upsilon, const SolverOptions& opts,
                          double& certificate) {
  double f = barrier_objective(instances, w, upsilon);
  RVec g = barrier_gradient(instances, w, upsilon);
  int it = 0;
  for (; it < opts.max_inner; ++it) {
    const double gn = g.norm();
    certificate = upsilon * gn;
    if (gn <= opts.inner_tol) break;
    RMat h = barrier_hessian(instances, w, upsilon);
    h.diagonal().array() += 1e-12 * h.trace();
    RVec d = Eigen::LDLT<RMat>(h).solve(-g);
    double gd = g.dot(d);
    if (!d.allFinite() || gd >= 0.0) {
      d = -g;  // safeguard: fall back to the gradient direction
      gd = -gn * gn;
    }
    // Newton decrement at float resolution: nothing left to gain
    if (-gd <= 1e-18 * (1.0 + std::abs(f))) break;
    double t = 1.0;
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt) {
      const RVec w_try = w + t * d;
      const double f_try = barrier_objective(instances, w_try, upsilon);
      if (f_try <= f + 1e-4 * t * gd) {
        w = w_try;
        f = f_try;
        g = barrier_gradient(instances, w, upsilon);
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;  // float-limited: no acceptable step exists
  }
  certificate = upsilon * g.norm();
  return it;
}

}  // namespace detail

// Barrier schedule: upsilon_t = upsilon0 * shrink^t for t = 1..max_outer
// (final weight ~ 4e-10 at the defaults), warm-started between stages.
inline SolveResult solve_slp(const std::vector<CiInstance>& instances,
                             const SolverOptions& opts = {}) {
  SolveResult res;
  PrecoderVec start = find_feasible_start(instances);
  RVec w = start.w2;
  double upsilon = opts.upsilon0;
  for (int t = 1; t <= opts.max_outer; ++t) {
    upsilon *= opts.shrink;
    res.iterations +=
        detail::minimize_stage(instances, w, upsilon, opts, res.certificate);
    res.stage_powers.push_back(w.squaredNorm());
  }
  // interior pullback: margins are affine along the ray through w, so a
  // relative scale of order 1e-10 pins every margin at or below the floor
  // without a measurable power change
  const double floor = std::max(1e-9, upsilon) * 1.0000001;
  double t_need = 1.0;
  for (const CiInstance& inst : instances) {
    const auto [g1, g2] = constraint_margins(inst, w);
    const double a = inst.threshold();
    for (double g : {g1, g2})
      if (g > -floor && g < a)
        t_need = std::max(t_need, 1.0 + (g + floor) / (a - g));
  }
  if (t_need > 1.0) w *= t_need;
  res.w2 = PrecoderVec(w);
  res.power = w.squaredNorm();
  res.final_upsilon = upsilon;
  return res;
}

// Convenience: build per-user instances for one slot and solve.
inline SolveResult solve_slp(const CMat& h, const SymbolFrame& frame,
                             double gamma_db, double delta, double phi,
                             const SolverOptions& opts = {}) {
  return solve_slp(build_slot_instances(h, frame, gamma_db, delta, phi), opts);
}

}  // namespace slp
