#pragma once

// Parameter checkpoint format ("SLPW") and the inference memory estimator.
//
// File layout, little-endian:
//   magic "SLPW" | u32 version | u32 M | u32 K | u32 blocks
//   f64 phi | f64 n0 | u8 precision | u8 concat_features
//   u16 meta_len | meta bytes (free-form layout note)
//   u32 entry_count, then per entry:
//     u16 name_len | name | u8 role | u8 tag | u8 ndim | u32 dims[ndim]
//     payload: raw f64 values (fp32 tag), or
//              f64 beta | f64 rho | sign plane | [nonzero plane]
//     bit planes are row-major, little-endian, padded to a byte per row.

#include <cstdio>
#include <cstring>
#include <string>

#include "slp/quantization.hpp"
#include "slp/unfolded_slp.hpp"

namespace slp {

struct FormatError : std::runtime_error {
  long offset;
  FormatError(const std::string& what, long off)
      : std::runtime_error(what + " (offset " + std::to_string(off) + ")"),
        offset(off) {}
};

namespace io_detail {

struct Writer {
  std::FILE* f;
  void bytes(const void* p, std::size_t n) {
    if (std::fwrite(p, 1, n, f) != n)
      throw std::runtime_error("checkpoint write failed");
  }
  template <typename T>
  void pod(const T& v) {
    bytes(&v, sizeof(T));
  }
};

struct Reader {
  std::FILE* f;
  long offset = 0;
  void bytes(void* p, std::size_t n) {
    if (std::fread(p, 1, n, f) != n)
      throw FormatError("checkpoint truncated", offset);
    offset += static_cast<long>(n);
  }
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
};

inline void write_plane(Writer& w, const std::vector<std::uint64_t>& bits,
                        std::size_t words_per_row, int rows, int cols) {
  const int bytes_per_row = (cols + 7) / 8;
  for (int r = 0; r < rows; ++r)
    w.bytes(&bits[r * words_per_row], bytes_per_row);
}

inline void read_plane(Reader& rd, std::vector<std::uint64_t>& bits,
                       std::size_t words_per_row, int rows, int cols) {
  const int bytes_per_row = (cols + 7) / 8;
  bits.assign(rows * words_per_row, 0);
  for (int r = 0; r < rows; ++r) rd.bytes(&bits[r * words_per_row], bytes_per_row);
}

}  // namespace io_detail

inline void save_model(const std::string& path, UnfoldedModel& model) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  io_detail::Writer w{f};
  w.bytes("SLPW", 4);
  w.pod<std::uint32_t>(1);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(model.M));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(model.K));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(model.blocks_n));
  w.pod<double>(model.phi);
  w.pod<double>(model.n0);
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(model.precision));
  w.pod<std::uint8_t>(model.concat_puu_features ? 1 : 0);
  const std::string meta =
      "ppu_out:(1,2M,K);pairs:per-user column, M-halves softplus-mean";
  w.pod<std::uint16_t>(static_cast<std::uint16_t>(meta.size()));
  w.bytes(meta.data(), meta.size());

  const auto params = model.all_params();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const nn::LayerParam* p : params) {
    w.pod<std::uint16_t>(static_cast<std::uint16_t>(p->name.size()));
    w.bytes(p->name.data(), p->name.size());
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(p->role));
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(p->tag));
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(p->value.shape.size()));
    for (int d : p->value.shape)
      w.pod<std::uint32_t>(static_cast<std::uint32_t>(d));
    if (p->tag == Precision::fp32) {
      w.bytes(p->value.v.data(), p->value.v.size() * sizeof(double));
    } else {
      const QuantTensor q =
          quantize(p->value.v.data(), p->value.shape, p->tag);
      w.pod<double>(q.beta);
      w.pod<double>(q.rho);
      io_detail::write_plane(w, q.sign_bits, q.words_per_row, q.rows, q.cols);
      if (q.prec == Precision::ternary)
        io_detail::write_plane(w, q.nz_bits, q.words_per_row, q.rows, q.cols);
    }
  }
  std::fclose(f);
}

inline UnfoldedModel load_model(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  io_detail::Reader rd{f};
  char magic[4];
  rd.bytes(magic, 4);
  if (std::memcmp(magic, "SLPW", 4) != 0) {
    std::fclose(f);
    throw FormatError("bad checkpoint magic", 0);
  }
  const auto version = rd.pod<std::uint32_t>();
  if (version != 1) {
    std::fclose(f);
    throw FormatError("unsupported checkpoint version", 4);
  }
  const int M = static_cast<int>(rd.pod<std::uint32_t>());
  const int K = static_cast<int>(rd.pod<std::uint32_t>());
  const int blocks = static_cast<int>(rd.pod<std::uint32_t>());
  const double phi = rd.pod<double>();
  const double n0 = rd.pod<double>();
  const auto prec = static_cast<Precision>(rd.pod<std::uint8_t>());
  const bool concat = rd.pod<std::uint8_t>() != 0;
  const auto meta_len = rd.pod<std::uint16_t>();
  std::string meta(meta_len, '\0');
  rd.bytes(meta.data(), meta_len);

  UnfoldedModel model = build_model(M, K, blocks, Precision::fp32, phi, 0,
                                    concat);
  model.n0 = n0;
  const auto entry_count = rd.pod<std::uint32_t>();
  auto params = model.all_params();
  if (entry_count != params.size()) {
    std::fclose(f);
    throw FormatError("checkpoint entry count mismatch", rd.offset);
  }
  for (std::uint32_t e = 0; e < entry_count; ++e) {
    const auto name_len = rd.pod<std::uint16_t>();
    std::string name(name_len, '\0');
    rd.bytes(name.data(), name_len);
    nn::LayerParam* target = nullptr;
    for (nn::LayerParam* p : params)
      if (p->name == name) {
        target = p;
        break;
      }
    if (!target) {
      std::fclose(f);
      throw FormatError("unknown parameter '" + name + "'", rd.offset);
    }
    const auto role = static_cast<nn::ParamRole>(rd.pod<std::uint8_t>());
    const auto tag = static_cast<Precision>(rd.pod<std::uint8_t>());
    const int ndim = rd.pod<std::uint8_t>();
    std::vector<int> dims(ndim);
    std::size_t count = 1;
    for (int i = 0; i < ndim; ++i) {
      dims[i] = static_cast<int>(rd.pod<std::uint32_t>());
      count *= static_cast<std::size_t>(dims[i]);
    }
    if (role != target->role || dims != target->value.shape) {
      std::fclose(f);
      throw FormatError("parameter '" + name + "' shape/role mismatch",
                        rd.offset);
    }
    if (tag == Precision::fp32) {
      rd.bytes(target->value.v.data(), count * sizeof(double));
    } else {
      QuantTensor q;
      q.prec = tag;
      q.shape = dims;
      auto [rows, cols] = qdetail::rows_cols(dims);
      q.rows = rows;
      q.cols = cols;
      q.words_per_row = (cols + 63) / 64;
      q.beta = rd.pod<double>();
      q.rho = rd.pod<double>();
      if (!(q.beta > 0.0)) {
        std::fclose(f);
        throw FormatError("parameter '" + name + "' has invalid scale",
                          rd.offset);
      }
      io_detail::read_plane(rd, q.sign_bits, q.words_per_row, rows, cols);
      if (tag == Precision::ternary)
        io_detail::read_plane(rd, q.nz_bits, q.words_per_row, rows, cols);
      else
        q.nz_bits.assign(rows * q.words_per_row, ~std::uint64_t{0});
      target->value.v = unpack(q);
    }
    target->tag = tag;
  }
  std::fclose(f);
  model.precision = prec;
  return model;
}

// Deployment memory accounting. Weight-role tensors tagged binary/ternary
// count 1/2 bits each; everything else counts 32 bits. Batch-norm running
// statistics fold into the affine scale/shift at inference and are not
// counted separately.
inline MemoryReport memory_estimate(UnfoldedModel& model) {
  std::size_t fp = 0, quant = 0;
  int bits = 1;
  for (const nn::LayerParam* p : model.all_params()) {
    if (p->role == nn::ParamRole::bn_mean || p->role == nn::ParamRole::bn_var)
      continue;
    if (p->role == nn::ParamRole::weight && p->tag != Precision::fp32) {
      quant += p->value.size();
      bits = p->tag == Precision::ternary ? 2 : 1;
    } else {
      fp += p->value.size();
    }
  }
  return memory_from_counts(fp, quant, bits);
}

}  // namespace slp
