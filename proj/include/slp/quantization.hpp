#pragma once

// Binary and ternary weight quantizers with a per-tensor scale, bit-packed
// matrix-vector kernels for inference, the straight-through gradient mask
// and the inference-memory accounting.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace slp {

enum class Precision : std::uint8_t { fp32 = 0, binary = 1, ternary = 2 };

// Bit-packed quantized tensor. Rows are the leading dimension of the
// original shape (output channels / output features); bits are packed
// little-endian within 64-bit words, each row padded to its own words.
struct QuantTensor {
  Precision prec = Precision::binary;
  std::vector<int> shape;
  int rows = 0;
  int cols = 0;
  double beta = 0.0;  // per-tensor scale, > 0
  double rho = 0.0;   // ternary threshold (ternary only)
  std::size_t words_per_row = 0;
  std::vector<std::uint64_t> sign_bits;  // bit=1 -> +1, bit=0 -> -1
  std::vector<std::uint64_t> nz_bits;    // ternary only: bit=1 -> nonzero

  std::size_t count() const {
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }
  int bits_per_weight() const { return prec == Precision::ternary ? 2 : 1; }

  bool sign_at(int r, int c) const {
    return (sign_bits[r * words_per_row + c / 64] >> (c % 64)) & 1u;
  }
  bool nz_at(int r, int c) const {
    if (prec != Precision::ternary) return true;
    return (nz_bits[r * words_per_row + c / 64] >> (c % 64)) & 1u;
  }
  double value_at(int r, int c) const {
    if (!nz_at(r, c)) return 0.0;
    return sign_at(r, c) ? beta : -beta;
  }
};

namespace qdetail {

inline void set_bit(std::vector<std::uint64_t>& bits, std::size_t wpr, int r,
                    int c) {
  bits[r * wpr + c / 64] |= (std::uint64_t{1} << (c % 64));
}

inline std::pair<int, int> rows_cols(const std::vector<int>& shape) {
  if (shape.empty()) throw std::invalid_argument("quantize: empty shape");
  int rows = shape[0];
  long long cols = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) cols *= shape[i];
  if (shape.size() == 1) {
    rows = 1;
    cols = shape[0];
  }
  return {rows, static_cast<int>(cols)};
}

// Extended-precision accumulation keeps the scale computation exact when
// every magnitude is identical, which makes quantize(unpack(quantize(.)))
// reproduce beta bit-for-bit.
inline double mean_abs(const double* w, std::size_t n) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(w[i]);
  return static_cast<double>(s / static_cast<long double>(n));
}

}  // namespace qdetail

// sign(w) with sign(0) = +1 and beta = mean |w| (the l2-optimal pair).
inline QuantTensor binarize(const double* w, const std::vector<int>& shape) {
  auto [rows, cols] = qdetail::rows_cols(shape);
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  if (n == 0) throw std::invalid_argument("binarize: empty tensor");
  QuantTensor q;
  q.prec = Precision::binary;
  q.shape = shape;
  q.rows = rows;
  q.cols = cols;
  q.words_per_row = (cols + 63) / 64;
  q.sign_bits.assign(rows * q.words_per_row, 0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      if (w[static_cast<std::size_t>(r) * cols + c] >= 0.0)
        qdetail::set_bit(q.sign_bits, q.words_per_row, r, c);
  q.beta = qdetail::mean_abs(w, n);
  return q;
}

// Ternary thresholding: rho = 0.7 * mean|w|, beta = mean|w| over the
// above-threshold set. Falls back to binarize when that set is empty.
inline QuantTensor ternarize(const double* w, const std::vector<int>& shape) {
  auto [rows, cols] = qdetail::rows_cols(shape);
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  if (n == 0) throw std::invalid_argument("ternarize: empty tensor");
  const double rho = 0.7 * qdetail::mean_abs(w, n);
  long double sel_sum = 0.0L;
  std::size_t sel_count = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (std::abs(w[i]) > rho) {
      sel_sum += std::abs(w[i]);
      ++sel_count;
    }
  if (sel_count == 0) {
    QuantTensor q = binarize(w, shape);
    q.prec = Precision::ternary;
    q.rho = rho;
    q.nz_bits.assign(q.rows * q.words_per_row, ~std::uint64_t{0});
    return q;
  }
  QuantTensor q;
  q.prec = Precision::ternary;
  q.shape = shape;
  q.rows = rows;
  q.cols = cols;
  q.rho = rho;
  q.beta = static_cast<double>(sel_sum / static_cast<long double>(sel_count));
  q.words_per_row = (cols + 63) / 64;
  q.sign_bits.assign(rows * q.words_per_row, 0);
  q.nz_bits.assign(rows * q.words_per_row, 0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double x = w[static_cast<std::size_t>(r) * cols + c];
      if (x > rho) {
        qdetail::set_bit(q.sign_bits, q.words_per_row, r, c);
        qdetail::set_bit(q.nz_bits, q.words_per_row, r, c);
      } else if (x < -rho) {
        qdetail::set_bit(q.nz_bits, q.words_per_row, r, c);
      }
    }
  return q;
}

inline QuantTensor quantize(const double* w, const std::vector<int>& shape,
                            Precision prec) {
  switch (prec) {
    case Precision::binary:
      return binarize(w, shape);
    case Precision::ternary:
      return ternarize(w, shape);
    default:
      throw std::invalid_argument("quantize: fp32 is not a quantized mode");
  }
}

// Quantized values back as a dense array (beta * {-1,0,+1}).
inline std::vector<double> unpack(const QuantTensor& q) {
  std::vector<double> out(q.count());
  for (int r = 0; r < q.rows; ++r)
    for (int c = 0; c < q.cols; ++c)
      out[static_cast<std::size_t>(r) * q.cols + c] = q.value_at(r, c);
  return out;
}

// Scratch shared across the rows of one matvec: sign bits and magnitudes of
// the input vector.
struct PackedInput {
  std::vector<std::uint64_t> sign_bits;
  std::vector<double> mag;
  double total_mag = 0.0;

  void load(const double* x, int n) {
    const std::size_t words = (n + 63) / 64;
    sign_bits.assign(words, 0);
    mag.resize(n);
    total_mag = 0.0;
    for (int j = 0; j < n; ++j) {
      const double a = std::abs(x[j]);
      mag[j] = a;
      total_mag += a;
      if (x[j] >= 0.0)
        sign_bits[j / 64] |= (std::uint64_t{1} << (j % 64));
    }
  }
};

// y = beta * (W_q x) computed on the packed representation. The binary path
// XNORs the weight sign plane against the input sign plane and accumulates
// input magnitudes over the agreeing coordinates; with T = sum|x| the row
// sum is 2*agree - T. The ternary path masks by the nonzero plane.
inline void packed_matvec(const QuantTensor& q, const PackedInput& px,
                          const double* x, int n, double* y) {
  if (n != q.cols) throw std::invalid_argument("packed_matvec: shape mismatch");
  (void)x;
  const std::size_t wpr = q.words_per_row;
  const int n_words = static_cast<int>((q.cols + 63) / 64);
  for (int r = 0; r < q.rows; ++r) {
    const std::uint64_t* wrow = &q.sign_bits[r * wpr];
    if (q.prec == Precision::binary) {
      double agree = 0.0;
      for (int wd = 0; wd < n_words; ++wd) {
        std::uint64_t m = ~(wrow[wd] ^ px.sign_bits[wd]);
        if (wd == n_words - 1 && (q.cols % 64) != 0)
          m &= (std::uint64_t{1} << (q.cols % 64)) - 1;
        const int base = wd * 64;
        while (m) {
          const int j = std::countr_zero(m);
          agree += px.mag[base + j];
          m &= m - 1;
        }
      }
      y[r] = q.beta * (2.0 * agree - px.total_mag);
    } else {
      const std::uint64_t* nzrow = &q.nz_bits[r * wpr];
      double agree = 0.0, active = 0.0;
      for (int wd = 0; wd < n_words; ++wd) {
        std::uint64_t nz = nzrow[wd];
        if (wd == n_words - 1 && (q.cols % 64) != 0)
          nz &= (std::uint64_t{1} << (q.cols % 64)) - 1;
        const std::uint64_t ag = ~(wrow[wd] ^ px.sign_bits[wd]);
        const int base = wd * 64;
        std::uint64_t m = nz;
        while (m) {
          const int j = std::countr_zero(m);
          const double a = px.mag[base + j];
          active += a;
          if ((ag >> j) & 1u) agree += a;
          m &= m - 1;
        }
      }
      y[r] = q.beta * (2.0 * agree - active);
    }
  }
}

inline std::vector<double> packed_matvec(const QuantTensor& q,
                                         const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != q.cols)
    throw std::invalid_argument("packed_matvec: shape mismatch");
  PackedInput px;
  px.load(x.data(), q.cols);
  std::vector<double> y(q.rows);
  packed_matvec(q, px, x.data(), q.cols, y.data());
  return y;
}

// Straight-through estimator: upstream gradient passes where the latent
// full-precision weight lies in the clip region |w| <= 1.
inline void ste_backward(const double* grad_out, const double* w_fp,
                         std::size_t n, double* grad_w) {
  for (std::size_t i = 0; i < n; ++i)
    grad_w[i] = (std::abs(w_fp[i]) <= 1.0) ? grad_out[i] : 0.0;
}

struct MemoryReport {
  std::size_t fp_params = 0;
  std::size_t binary_params = 0;  // quantized parameter count
  int bits_per_quant = 1;         // 1 binary, 2 ternary
  double megabytes = 0.0;
  double ratio_vs_fp32 = 1.0;
};

// (32 * fp + bits * quantized) / 8 / 2^20, per the inference accounting.
inline MemoryReport memory_from_counts(std::size_t fp_params,
                                       std::size_t quant_params,
                                       int bits_per_quant) {
  MemoryReport rep;
  rep.fp_params = fp_params;
  rep.binary_params = quant_params;
  rep.bits_per_quant = quant_params == 0 ? 1 : bits_per_quant;
  const double bits = 32.0 * static_cast<double>(fp_params) +
                      static_cast<double>(rep.bits_per_quant) *
                          static_cast<double>(quant_params);
  rep.megabytes = bits / 8.0 / (1024.0 * 1024.0);
  const double fp_bits =
      32.0 * static_cast<double>(fp_params + quant_params);
  rep.ratio_vs_fp32 = bits > 0.0 ? fp_bits / bits : 1.0;
  return rep;
}

}  // namespace slp
