#pragma once

// Log-barrier values, the closed-form proximity operator of the combined
// constraint barrier, its cubic characteristic equation, and the analytic
// Jacobians consumed by the unfolded network blocks.
//
// The combined constraint bounds the precoder inside the ball
// ||w2||^2 < c0 with c0 = 2 G n0 tan^2(phi). The proximity operator of
// gu * B with B(w) = -ln(c0 - ||w||^2) is the radial scaling
//   prox(w0) = sigma * w0,  sigma = (c0 - chi^2) / (c0 - chi^2 + 2 gu),
// where chi = ||prox(w0)|| is the unique root in [0, sqrt(c0)) of
//   chi^3 - r0 chi^2 - (c0 + 2 gu) chi + r0 c0 = 0,   r0 = ||w0||.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "slp/ci_geometry.hpp"

namespace slp {

struct BarrierParams {
  double gamma = 0.1;    // step size, > 0
  double upsilon = 1.0;  // barrier weight, > 0
  double lambda = 0.0;   // multiplier of the linear objective term
};

// -sum ln(-g) over the two margins; +inf when not strictly feasible.
inline double barrier_value(const CiInstance& inst, const RVec& w2) {
  const auto [g1, g2] = constraint_margins(inst, w2);
  if (g1 >= 0.0 || g2 >= 0.0)
    return std::numeric_limits<double>::infinity();
  return -std::log(-g1) - std::log(-g2);
}

inline double barrier_value(const std::vector<CiInstance>& instances,
                            const RVec& w2) {
  double b = 0.0;
  for (const CiInstance& inst : instances) {
    b += barrier_value(inst, w2);
    if (!std::isfinite(b)) return std::numeric_limits<double>::infinity();
  }
  return b;
}

inline double prox_ball_radius_sq(const CiInstance& inst) {
  return 2.0 * inst.gamma_lin * inst.n0 * inst.tan_phi * inst.tan_phi;
}

namespace detail {

// Stationarity cubic in normalized form m = chi / sqrt(c0):
//   m^3 - rho m^2 - (1 + ghat) m + rho = 0,
// rho = r0/sqrt(c0), ghat = 2 gu / c0; root wanted in [0, 1).
inline double cubic_normalized(double m, double rho, double ghat) {
  return ((m - rho) * m - (1.0 + ghat)) * m + rho;
}

inline double solve_chi_bisection(double c0, double r0, double gu) {
  const double s = std::sqrt(c0);
  const double rho = r0 / s;
  const double ghat = 2.0 * gu / c0;
  double lo = 0.0, hi = 1.0;
  // f(0) = rho >= 0, f(1) = -ghat < 0
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (cubic_normalized(mid, rho, ghat) >= 0.0)
      lo = mid;
    else
      hi = mid;
    if (hi - lo < 1e-16) break;
  }
  return s * 0.5 * (lo + hi);
}

// Cardano (trigonometric branch for three real roots) + Newton polish.
inline double solve_chi_closed_form(double c0, double r0, double gu) {
  const double s = std::sqrt(c0);
  const double rho = r0 / s;
  const double ghat = 2.0 * gu / c0;
  if (rho == 0.0) return 0.0;

  // depressed cubic t^3 + p t + q, m = t + rho/3
  const double b = -rho;
  const double c = -(1.0 + ghat);
  const double d = rho;
  const double p = c - b * b / 3.0;
  const double q = (2.0 * b * b * b - 9.0 * b * c) / 27.0 + d;
  const double disc = 0.25 * q * q + p * p * p / 27.0;

  double m = std::numeric_limits<double>::quiet_NaN();
  if (disc > 0.0) {
    const double sq = std::sqrt(disc);
    m = std::cbrt(-0.5 * q + sq) + std::cbrt(-0.5 * q - sq) - b / 3.0;
  } else {
    const double r = std::sqrt(-p / 3.0);
    double arg = 3.0 * q / (2.0 * p * r);
    arg = std::clamp(arg, -1.0, 1.0);
    const double th = std::acos(arg) / 3.0;
    for (int k = 0; k < 3; ++k) {
      const double cand =
          2.0 * r * std::cos(th - 2.0 * M_PI * k / 3.0) - b / 3.0;
      if (cand >= -1e-12 && cand < 1.0) {
        m = cand;
        break;
      }
    }
  }
  if (!std::isfinite(m) || m < -1e-9 || m >= 1.0)
    return solve_chi_bisection(c0, r0, gu);

  // Newton polish in the normalized variable
  for (int it = 0; it < 3; ++it) {
    const double f = cubic_normalized(m, rho, ghat);
    const double fp = 3.0 * m * m - 2.0 * rho * m - (1.0 + ghat);
    if (fp == 0.0) break;
    m -= f / fp;
  }
  m = std::clamp(m, 0.0, 1.0 - 1e-15);
  if (std::abs(cubic_normalized(m, rho, ghat)) >
      1e-9 * (1.0 + rho + ghat))
    return solve_chi_bisection(c0, r0, gu);
  return s * m;
}

struct ProxScale {
  double chi = 0.0;    // norm of the prox output
  double sigma = 1.0;  // radial scale factor in (0, 1]
};

inline ProxScale prox_scale(double c0, double r0, double gu) {
  ProxScale ps;
  if (gu <= 0.0) {
    ps.chi = r0;
    ps.sigma = 1.0;
    return ps;
  }
  ps.chi = solve_chi_closed_form(c0, r0, gu);
  const double n = c0 - ps.chi * ps.chi;
  ps.sigma = n / (n + 2.0 * gu);
  return ps;
}

}  // namespace detail

// Root of the stationarity cubic in [0, sqrt(c0)).
inline double solve_chi(const CiInstance& inst, const RVec& w2, double gamma,
                        double upsilon) {
  const double c0 = prox_ball_radius_sq(inst);
  const double gu = gamma * upsilon;
  const double chi = detail::prox_scale(c0, w2.norm(), gu).chi;
  if (!(chi >= 0.0) || chi * chi >= c0)
    throw std::runtime_error("solve_chi: no root in the feasible interval");
  return chi;
}

// prox_{gamma upsilon B}(w2): radial shrink toward the origin; identity in
// the limit gamma*upsilon -> 0.
inline RVec prox_barrier(const CiInstance& inst, const RVec& w2, double gamma,
                         double upsilon) {
  const double c0 = prox_ball_radius_sq(inst);
  const auto ps = detail::prox_scale(c0, w2.norm(), gamma * upsilon);
  return ps.sigma * w2;
}

inline PrecoderVec prox_barrier(const CiInstance& inst, const PrecoderVec& w,
                                double gamma, double upsilon) {
  return PrecoderVec(prox_barrier(inst, w.w2, gamma, upsilon));
}

struct ProxJacobians {
  RMat j_w;        // d prox / d w2, symmetric 2M x 2M
  RVec d_upsilon;  // d prox / d upsilon
  RVec d_gamma;    // d prox / d gamma
};

// Scalar pieces of the prox derivative; shared by the Jacobian assembly and
// the unfolded backward pass (which never forms the full matrix).
struct ProxDerivs {
  double sigma = 1.0;       // radial scale
  double sigma_r_over_r = 0.0;  // sigma'(r0)/r0 (rank-one coefficient)
  double dsigma_du = 0.0;   // d sigma / d upsilon at fixed gamma
};

namespace detail {

inline ProxDerivs prox_derivs(double c0, double r0, double gamma,
                              double upsilon) {
  ProxDerivs pd;
  const double gu = gamma * upsilon;
  if (gu <= 0.0) return pd;  // identity map
  const ProxScale ps = prox_scale(c0, r0, gu);
  const double chi = ps.chi;
  pd.sigma = ps.sigma;
  const double n = c0 - chi * chi;
  const double dd = n + 2.0 * gu;
  const double c_chi = 3.0 * chi * chi - 2.0 * r0 * chi - (c0 + 2.0 * gu);
  // c_chi < 0 at the selected root (transversal crossing)
  const double chi_u = 2.0 * gamma * chi / c_chi;
  pd.dsigma_du = (-2.0 * chi * chi_u * 2.0 * gu - 2.0 * gamma * n) / (dd * dd);
  if (r0 > 1e-8) {
    const double chi_r = (chi * chi - c0) / c_chi;
    pd.sigma_r_over_r = (chi_r * r0 - chi) / (r0 * r0 * r0);
  }
  return pd;
}

}  // namespace detail

// Analytic derivatives of the prox with respect to its input, the barrier
// weight and the step size. d_gamma/d_upsilon = upsilon/gamma (shared
// structure of the two scalar derivatives).
inline ProxJacobians prox_jacobians(const CiInstance& inst, const RVec& w2,
                                    double gamma, double upsilon) {
  if (!(gamma > 0.0) || !(upsilon > 0.0))
    throw std::invalid_argument("prox_jacobians: gamma, upsilon must be > 0");
  RVec w = w2;
  // near-boundary guard: nudge inward before differentiating
  if (combined_margin(inst, w) > -1e-9) w *= (1.0 - 1e-6);
  const double c0 = prox_ball_radius_sq(inst);
  const int n = static_cast<int>(w.size());
  const auto pd = detail::prox_derivs(c0, w.norm(), gamma, upsilon);
  ProxJacobians jac;
  jac.j_w = pd.sigma * RMat::Identity(n, n) +
            pd.sigma_r_over_r * (w * w.transpose());
  jac.d_upsilon = pd.dsigma_du * w;
  jac.d_gamma = (upsilon / gamma) * jac.d_upsilon;
  return jac;
}

// One unfolded update: w+ = prox_{gamma upsilon B}(w - gamma grad f),
// f(w, lambda) = ||w||^2 + lambda 1'w, so grad f = 2 w + lambda 1.
inline RVec update_step(const CiInstance& inst, const RVec& w2,
                        const BarrierParams& p) {
  const RVec v = (1.0 - 2.0 * p.gamma) * w2 -
                 (p.gamma * p.lambda) * RVec::Ones(w2.size());
  return prox_barrier(inst, v, p.gamma, p.upsilon);
}

inline PrecoderVec update_step(const CiInstance& inst, const PrecoderVec& w,
                               const BarrierParams& p) {
  return PrecoderVec(update_step(inst, w.w2, p));
}

}  // namespace slp
