#pragma once

// Real-valued constructive-interference constraint system for one user of a
// symbol slot: the skew-orthogonal form Theta, the constraint operators
// Q1/Q2, robust margins, the combined quadratic margin and the CI-region
// predicate on the complex plane.
//
// Conventions. With Psi = [Re(hhat); Im(hhat)] and w2 = [wR; wI], the
// complex precoder reconstruction is w = wR - j*wI. Then
//   Psi' w2        = Re{hhat^T w}
//   Psi' Theta w2  = Im{hhat^T w}
// and the two (rotated-frame) detection-sector constraints
//   +-Im{hhat^T w} - (Re{hhat^T w} - sqrt(G n0)) tan(phi) <= 0
// become, with a = sqrt(G n0) tan(phi),
//   g1 =  Psi' Q1 w2 + delta ||Q1 w2|| + a <= 0
//   g2 = -Psi' Q2 w2 + delta ||Q2 w2|| + a <= 0
// where Q1 = Theta - tan(phi) I and Q2 = Theta + tan(phi) I. The sign on the
// g2 linear term is the one that makes the pair equal to the sector
// constraint (the norm term is sign-blind).

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "slp/channel_model.hpp"

namespace slp {

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

// Real-stacked precoding vector w2 = [wR; wI] plus its complex view.
struct PrecoderVec {
  RVec w2;

  PrecoderVec() = default;
  explicit PrecoderVec(RVec v) : w2(std::move(v)) {}

  int antennas() const { return static_cast<int>(w2.size()) / 2; }
  double power() const { return w2.squaredNorm(); }

  // w = wR - j*wI; the stacking the real constraint system operates on.
  CVec complex_view() const {
    const int M = antennas();
    CVec w(M);
    for (int m = 0; m < M; ++m) w[m] = Cplx(w2[m], -w2[M + m]);
    return w;
  }

  static PrecoderVec from_complex(const CVec& w) {
    const int M = static_cast<int>(w.size());
    RVec v(2 * M);
    for (int m = 0; m < M; ++m) {
      v[m] = w[m].real();
      v[M + m] = -w[m].imag();
    }
    return PrecoderVec(std::move(v));
  }
};

// Constraint system for one user. Immutable after construction.
struct CiInstance {
  RVec psi;      // stacked rotated channel, R^{2M}
  RMat theta;    // [[0,-I],[I,0]]
  RMat q1;       // Theta - tan(phi) I
  RMat q2;       // Theta + tan(phi) I
  RMat g;        // Q1'Q1 + Q2'Q2 = 2(1+tan^2 phi) I
  double gamma_lin = 1.0;  // linear SINR target
  double n0 = 1.0;         // noise power
  double phi = M_PI / 4;   // CI half-angle
  double delta = 0.0;      // CSI error bound (on ||e||_2)
  double tan_phi = 1.0;

  // cached margin normals: u1 = Q1' psi, u2 = -Q2' psi
  RVec u1, u2;

  int dim() const { return static_cast<int>(psi.size()); }
  double threshold() const { return std::sqrt(gamma_lin * n0) * tan_phi; }
  // norm scale: ||Q1 w|| = ||Q2 w|| = sqrt(1+tan^2) ||w||
  double q_norm_scale() const { return std::sqrt(1.0 + tan_phi * tan_phi); }
};

inline RMat skew_form(int M) {
  RMat t = RMat::Zero(2 * M, 2 * M);
  for (int m = 0; m < M; ++m) {
    t(m, M + m) = -1.0;
    t(M + m, m) = 1.0;
  }
  return t;
}

inline CiInstance build_instance(const CVec& hhat, double gamma_db,
                                 double delta, double phi) {
  if (!(phi > 0.0 && phi < M_PI / 2))
    throw std::invalid_argument("build_instance: phi must lie in (0, pi/2)");
  if (delta < 0.0)
    throw std::invalid_argument("build_instance: delta must be >= 0");
  if (!std::isfinite(gamma_db))
    throw std::invalid_argument("build_instance: gamma_db must be finite");
  const int M = static_cast<int>(hhat.size());
  CiInstance inst;
  inst.psi = real_stack(hhat);
  inst.phi = phi;
  inst.tan_phi = std::tan(phi);
  inst.delta = delta;
  inst.gamma_lin = db_to_linear(gamma_db);
  inst.n0 = 1.0;
  inst.theta = skew_form(M);
  inst.q1 = inst.theta - inst.tan_phi * RMat::Identity(2 * M, 2 * M);
  inst.q2 = inst.theta + inst.tan_phi * RMat::Identity(2 * M, 2 * M);
  inst.g = inst.q1.transpose() * inst.q1 + inst.q2.transpose() * inst.q2;
  inst.u1 = inst.q1.transpose() * inst.psi;
  inst.u2 = -(inst.q2.transpose() * inst.psi);
  return inst;
}

// Left-hand sides of the two robust constraints; feasible iff both <= 0.
inline std::pair<double, double> constraint_margins(const CiInstance& inst,
                                                    const RVec& w2) {
  if (w2.size() != inst.psi.size())
    throw std::invalid_argument("constraint_margins: dimension mismatch");
  const double qn = inst.delta * inst.q_norm_scale() * w2.norm();
  const double a = inst.threshold();
  const double g1 = inst.u1.dot(w2) + qn + a;
  const double g2 = inst.u2.dot(w2) + qn + a;
  return {g1, g2};
}

inline std::pair<double, double> constraint_margins(const CiInstance& inst,
                                                    const PrecoderVec& w) {
  return constraint_margins(inst, w.w2);
}

// Scalar combined form of the two constraints,
//   (delta^2 - psi'psi) * 2(1+tan^2) ||w2||^2
//     + 4 psi'w2 tan(phi) sqrt(G n0) - 2 G n0 tan^2(phi),
// required <= 0. This is the quadratic the proximity operator is built on.
inline double combined_margin(const CiInstance& inst, const RVec& w2) {
  const double t2 = inst.tan_phi * inst.tan_phi;
  const double quad = (inst.delta * inst.delta - inst.psi.squaredNorm()) *
                      2.0 * (1.0 + t2) * w2.squaredNorm();
  const double lin = 4.0 * inst.psi.dot(w2) * inst.tan_phi *
                     std::sqrt(inst.gamma_lin * inst.n0);
  return quad + lin - 2.0 * inst.gamma_lin * inst.n0 * t2;
}

inline double combined_margin(const CiInstance& inst, const PrecoderVec& w) {
  return combined_margin(inst, w.w2);
}

// True iff the noiseless received point hhat^T w lies inside the detection
// sector: |Im{y}| - (Re{y} - sqrt(G n0)) tan(phi) <= 0.
inline bool ci_region_check(const CVec& hhat, const CVec& w, double gamma_lin,
                            double n0, double phi) {
  const Cplx y = hhat.transpose() * w;
  const double margin =
      std::abs(y.imag()) -
      (y.real() - std::sqrt(gamma_lin * n0)) * std::tan(phi);
  return margin <= 0.0;
}

// Shared-channel convenience: per-user instances for one symbol slot.
inline std::vector<CiInstance> build_slot_instances(const CMat& h,
                                                    const SymbolFrame& frame,
                                                    double gamma_db,
                                                    double delta, double phi) {
  const int K = static_cast<int>(h.rows());
  std::vector<CiInstance> out;
  out.reserve(K);
  for (int i = 0; i < K; ++i) {
    const CVec hhat = build_rotated_channel(h.row(i).transpose(), frame, i);
    out.push_back(build_instance(hhat, gamma_db, delta, phi));
  }
  return out;
}

}  // namespace slp
