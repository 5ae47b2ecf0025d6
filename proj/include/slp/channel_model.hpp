#pragma once

// Rayleigh channel generation, bounded CSI error sampling, QPSK symbol
// frames and the rotated real-valued channel representation used by the
// constructive-interference machinery.

#include <Eigen/Dense>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "slp/rng.hpp"

namespace slp {

using Cplx = std::complex<double>;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;
using RVec = Eigen::VectorXd;
using RMat = Eigen::MatrixXd;

// K x M complex channel matrices, unit average power per coefficient.
struct ChannelSet {
  int M = 0;
  int K = 0;
  std::uint64_t seed = 0;
  std::vector<CMat> samples;

  std::size_t size() const { return samples.size(); }
};

// Bounded CSI error realization for one user: ||e||_2 <= bound.
struct CsiError {
  CVec e;
  double bound = 0.0;
};

// Unit-modulus QPSK symbols and their phases, one entry per user.
struct SymbolFrame {
  CVec d;
  std::vector<double> phases;
};

inline ChannelSet generate_channels(int M, int K, std::size_t N,
                                    std::uint64_t seed) {
  if (M < 1 || K < 1)
    throw std::invalid_argument("generate_channels: M and K must be >= 1");
  ChannelSet set;
  set.M = M;
  set.K = K;
  set.seed = seed;
  set.samples.reserve(N);
  for (std::size_t n = 0; n < N; ++n) {
    Rng rng(mix_seed(seed, n));
    CMat h(K, M);
    const double scale = std::sqrt(0.5);  // E|h|^2 = 1
    for (int k = 0; k < K; ++k)
      for (int m = 0; m < M; ++m)
        h(k, m) = Cplx(scale * rng.gaussian(), scale * rng.gaussian());
    set.samples.push_back(std::move(h));
  }
  return set;
}

// Uniform draw from the closed l2-ball of radius `bound` in C^M
// (radius r = bound * u^(1/(2M)), direction uniform on the sphere).
inline CsiError sample_csi_error(int M, double bound, std::uint64_t seed) {
  if (bound < 0.0)
    throw std::invalid_argument("sample_csi_error: bound must be >= 0");
  if (M < 1) throw std::invalid_argument("sample_csi_error: M must be >= 1");
  CsiError err;
  err.bound = bound;
  err.e = CVec::Zero(M);
  if (bound == 0.0) return err;
  Rng rng(seed);
  RVec dir(2 * M);
  double nrm2 = 0.0;
  do {
    for (int i = 0; i < 2 * M; ++i) dir[i] = rng.gaussian();
    nrm2 = dir.squaredNorm();
  } while (nrm2 < 1e-300);
  const double radius =
      bound * std::pow(rng.uniform_pos(), 1.0 / static_cast<double>(2 * M));
  dir *= radius / std::sqrt(nrm2);
  for (int m = 0; m < M; ++m) err.e[m] = Cplx(dir[m], dir[M + m]);
  return err;
}

// Gray-mapped QPSK phases {pi/4 + k*pi/2}.
inline SymbolFrame random_qpsk_frame(int K, Rng& rng) {
  SymbolFrame f;
  f.d = CVec(K);
  f.phases.resize(K);
  static const double kPhases[4] = {M_PI / 4, 3 * M_PI / 4, 5 * M_PI / 4,
                                    7 * M_PI / 4};
  for (int k = 0; k < K; ++k) {
    const double p = kPhases[rng.index(4)];
    f.phases[k] = p;
    f.d[k] = Cplx(std::cos(p), std::sin(p));
  }
  return f;
}

// hhat_i = h_i * sum_k exp(j(phi_k - phi_i)): the channel rotated into user
// i's symbol frame, so the symbol-of-interest direction is the real axis.
inline CVec build_rotated_channel(const CVec& h_row, const SymbolFrame& frame,
                                  int user) {
  const int K = static_cast<int>(frame.d.size());
  if (user < 0 || user >= K)
    throw std::invalid_argument("build_rotated_channel: user out of range");
  for (int k = 0; k < K; ++k) {
    if (std::abs(std::abs(frame.d[k]) - 1.0) > 1e-9)
      throw std::invalid_argument(
          "build_rotated_channel: symbols must be unit modulus");
  }
  Cplx s(0.0, 0.0);
  for (int k = 0; k < K; ++k) {
    const double dphi = frame.phases[k] - frame.phases[user];
    s += Cplx(std::cos(dphi), std::sin(dphi));
  }
  return h_row * s;
}

// Psi = [Re(hhat); Im(hhat)] in R^{2M}; preserves the Euclidean norm.
inline RVec real_stack(const CVec& hhat) {
  const int M = static_cast<int>(hhat.size());
  RVec psi(2 * M);
  for (int m = 0; m < M; ++m) {
    psi[m] = hhat[m].real();
    psi[M + m] = hhat[m].imag();
  }
  return psi;
}

// ---------------------------------------------------------------------------
// Dataset file: little-endian binary
//   header { magic "SLPD", version u32, M u32, K u32, N u64, seed u64 }
//   then N*K*M complex64 pairs (re, im) row-major.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_bytes(std::FILE* f, const void* p, std::size_t n) {
  if (std::fwrite(p, 1, n, f) != n)
    throw std::runtime_error("dataset write failed");
}

inline void get_bytes(std::FILE* f, void* p, std::size_t n) {
  if (std::fread(p, 1, n, f) != n)
    throw std::runtime_error("dataset read failed: truncated file");
}

}  // namespace detail

inline void write_dataset(const std::string& path, const ChannelSet& set) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const char magic[4] = {'S', 'L', 'P', 'D'};
  const std::uint32_t version = 1;
  const std::uint32_t m32 = static_cast<std::uint32_t>(set.M);
  const std::uint32_t k32 = static_cast<std::uint32_t>(set.K);
  const std::uint64_t n64 = set.samples.size();
  detail::put_bytes(f, magic, 4);
  detail::put_bytes(f, &version, 4);
  detail::put_bytes(f, &m32, 4);
  detail::put_bytes(f, &k32, 4);
  detail::put_bytes(f, &n64, 8);
  detail::put_bytes(f, &set.seed, 8);
  for (const CMat& h : set.samples) {
    for (int k = 0; k < set.K; ++k)
      for (int m = 0; m < set.M; ++m) {
        const float re = static_cast<float>(h(k, m).real());
        const float im = static_cast<float>(h(k, m).imag());
        detail::put_bytes(f, &re, 4);
        detail::put_bytes(f, &im, 4);
      }
  }
  std::fclose(f);
}

inline ChannelSet read_dataset(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[4];
  detail::get_bytes(f, magic, 4);
  if (std::memcmp(magic, "SLPD", 4) != 0) {
    std::fclose(f);
    throw std::runtime_error(path + ": bad dataset magic");
  }
  std::uint32_t version = 0, m32 = 0, k32 = 0;
  std::uint64_t n64 = 0, seed = 0;
  detail::get_bytes(f, &version, 4);
  detail::get_bytes(f, &m32, 4);
  detail::get_bytes(f, &k32, 4);
  detail::get_bytes(f, &n64, 8);
  detail::get_bytes(f, &seed, 8);
  if (version != 1) {
    std::fclose(f);
    throw std::runtime_error(path + ": unsupported dataset version");
  }
  ChannelSet set;
  set.M = static_cast<int>(m32);
  set.K = static_cast<int>(k32);
  set.seed = seed;
  set.samples.reserve(n64);
  for (std::uint64_t n = 0; n < n64; ++n) {
    CMat h(set.K, set.M);
    for (int k = 0; k < set.K; ++k)
      for (int m = 0; m < set.M; ++m) {
        float re = 0.f, im = 0.f;
        detail::get_bytes(f, &re, 4);
        detail::get_bytes(f, &im, 4);
        h(k, m) = Cplx(re, im);
      }
    set.samples.push_back(std::move(h));
  }
  std::fclose(f);
  return set;
}

}  // namespace slp
