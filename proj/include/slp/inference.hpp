#pragma once

// Inference engine shared by the full-precision and quantized models. The
// pipeline (im2col convolutions, folded batch norm, activation, multiplier
// head, prox chain, closed-form recovery) is identical for every precision;
// only the inner matrix-vector kernel differs: dense f64 rows for fp32,
// XNOR/mask bit kernels over the packed sign planes for binary/ternary.

#include <chrono>
#include <cmath>
#include <vector>

#include "slp/quantization.hpp"
#include "slp/unfolded_slp.hpp"

namespace slp {

namespace infer_detail {

struct Kernel {
  bool packed = false;
  QuantTensor q;
  std::vector<double> dense;  // row-major rows x cols
  int rows = 0, cols = 0;

  void build(const nn::LayerParam& w) {
    auto [r, c] = qdetail::rows_cols(w.value.shape);
    rows = r;
    cols = c;
    if (w.tag == Precision::fp32) {
      packed = false;
      dense = w.value.v;
    } else {
      packed = true;
      q = quantize(w.value.v.data(), w.value.shape, w.tag);
    }
  }

  void matvec(const PackedInput& px, const double* x, double* y) const {
    if (packed) {
      packed_matvec(q, px, x, cols, y);
    } else {
      for (int r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* wr = &dense[static_cast<std::size_t>(r) * cols];
        for (int c = 0; c < cols; ++c) acc += wr[c] * x[c];
        y[r] = acc;
      }
    }
  }
};

struct FoldedBn {
  std::vector<double> a, b;  // y = a*x + b per channel
  void build(const nn::LayerParam& scale, const nn::LayerParam& shift,
             const nn::LayerParam& mean, const nn::LayerParam& var,
             double eps) {
    const std::size_t c = scale.value.size();
    a.resize(c);
    b.resize(c);
    for (std::size_t i = 0; i < c; ++i) {
      const double is = 1.0 / std::sqrt(var.value.v[i] + eps);
      a[i] = scale.value.v[i] * is;
      b[i] = shift.value.v[i] - mean.value.v[i] * a[i];
    }
  }
};

// 3x3 same-size convolution on a (C,H,W) buffer via per-position patch
// gather + matvec over output channels.
struct ConvExec {
  Kernel kernel;
  std::vector<double> bias;  // empty when the conv has none
  int in_ch = 0, k = 3, pad = 1, dil = 1;

  void build(nn::Conv2d& conv) {
    kernel.build(conv.weight());
    in_ch = conv.weight().value.dim(1);
    k = conv.weight().value.dim(2);
    const auto ps = conv.params();
    bias.clear();
    if (ps.size() > 1) bias = ps[1]->value.v;
  }

  void run(const std::vector<double>& x, int H, int W,
           std::vector<double>& y, std::vector<double>& patch,
           PackedInput& px, std::vector<double>& rowbuf) const {
    const int out_ch = kernel.rows;
    y.assign(static_cast<std::size_t>(out_ch) * H * W, 0.0);
    patch.resize(kernel.cols);
    rowbuf.resize(out_ch);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        int idx = 0;
        for (int c = 0; c < in_ch; ++c)
          for (int u = 0; u < k; ++u) {
            const int h = i + u * dil - pad;
            for (int v = 0; v < k; ++v) {
              const int w = j + v * dil - pad;
              patch[idx++] = (h < 0 || h >= H || w < 0 || w >= W)
                                 ? 0.0
                                 : x[(static_cast<std::size_t>(c) * H + h) * W +
                                     w];
            }
          }
        if (kernel.packed) px.load(patch.data(), kernel.cols);
        kernel.matvec(px, patch.data(), rowbuf.data());
        for (int o = 0; o < out_ch; ++o)
          y[(static_cast<std::size_t>(o) * H + i) * W + j] =
              rowbuf[o] + (bias.empty() ? 0.0 : bias[o]);
      }
  }
};

}  // namespace infer_detail

// Immutable per-model inference state. Build once after training/loading;
// run() is read-only and reallocates nothing of consequence.
class InferenceEngine {
 public:
  explicit InferenceEngine(UnfoldedModel& model) : model_(&model) {
    const int M = model.M, K = model.K;
    H_ = 2 * M;
    W_ = K;
    for (auto& blk : model.blocks) {
      BlockExec be;
      be.conv.build(blk->subnet->conv);
      be.fc.build(blk->subnet->fc.weight());
      be.fc_bias = blk->subnet->fc.params()[1]->value.v[0];
      be.gamma = blk->gamma();
      be.lambda = blk->lambda.value.v[0];
      blocks_.push_back(std::move(be));
    }
    ppu_c1_.build(model.ppu->c1);
    ppu_c2_.build(model.ppu->c2);
    ppu_c3_.build(model.ppu->c3);
    auto bn_params = [](nn::BatchNorm2d& bn) { return bn.params(); };
    {
      auto ps = bn_params(model.ppu->bn1);
      bn1_.build(*ps[0], *ps[1], *ps[2], *ps[3], 1e-6);
      auto ps2 = bn_params(model.ppu->bn2);
      bn2_.build(*ps2[0], *ps2[1], *ps2[2], *ps2[3], 1e-6);
    }
    slope1_ = model.ppu->p1.params()[0]->value.v[0];
    slope2_ = model.ppu->p2.params()[0]->value.v[0];
  }

  InferResult run(const std::vector<CiInstance>& users,
                  double gamma_db) const {
    const UnfoldedModel& m = *model_;
    const double gamma_lin = db_to_linear(gamma_db);
    const double tan_phi = std::tan(m.phi);
    const double a = std::sqrt(gamma_lin * m.n0) * tan_phi;
    const double c0 = 2.0 * gamma_lin * m.n0 * tan_phi * tan_phi;

    // channel plane, scale-normalized per sample
    const double fscale = feature_scale(users);
    std::vector<double> f0(static_cast<std::size_t>(H_) * W_);
    for (int i = 0; i < W_; ++i)
      for (int r = 0; r < H_; ++r)
        f0[static_cast<std::size_t>(r) * W_ + i] = users[i].psi[r] / fscale;

    // PUU chain
    RVec w = RVec::Zero(H_);
    std::vector<double> buf, patch, rowbuf;
    PackedInput px;
    for (const BlockExec& be : blocks_) {
      // barrier subnet: conv -> softplus -> fc -> softplus
      be.conv.run(f0, H_, W_, buf, patch, px, rowbuf);
      for (double& x : buf) x = nn::softplus(x);
      std::vector<double> fc_out(1);
      if (be.fc.packed) px.load(buf.data(), be.fc.cols);
      be.fc.matvec(px, buf.data(), fc_out.data());
      const double ups = nn::softplus(fc_out[0] + be.fc_bias);
      RVec v = (1.0 - 2.0 * be.gamma) * w -
               (be.gamma * be.lambda) * RVec::Ones(H_);
      for (int i = 0; i < static_cast<int>(users.size()); ++i) {
        const auto ps = detail::prox_scale(c0, v.norm(), be.gamma * ups);
        v *= ps.sigma;
      }
      w = v;
    }

    // PPU features
    const int cin = m.ppu_in_channels();
    const double wplane_scale = fscale / a;
    std::vector<double> fin(static_cast<std::size_t>(cin) * H_ * W_);
    for (int r = 0; r < H_; ++r)
      for (int i = 0; i < W_; ++i) {
        fin[static_cast<std::size_t>(r) * W_ + i] = f0[r * W_ + i];
        if (cin == 2)
          fin[(static_cast<std::size_t>(H_) + r) * W_ + i] =
              w[r] * wplane_scale;
      }

    std::vector<double> h1, h2, h3;
    ppu_c1_.run(fin, H_, W_, h1, patch, px, rowbuf);
    affine_prelu(h1, bn1_, slope1_, 16);
    ppu_c2_.run(h1, H_, W_, h2, patch, px, rowbuf);
    affine_prelu(h2, bn2_, slope2_, 8);
    ppu_c3_.run(h2, H_, W_, h3, patch, px, rowbuf);

    std::vector<MultiplierPair> pairs(m.K);
    for (int i = 0; i < m.K; ++i) {
      const double gain = multiplier_head_gain(
          users[i].delta, users[i].psi.norm(), users[i].tan_phi);
      double s1 = 0.0, s2 = 0.0;
      for (int r = 0; r < m.M; ++r) {
        s1 += nn::softplus(h3[static_cast<std::size_t>(r) * W_ + i]);
        s2 += nn::softplus(
            h3[(static_cast<std::size_t>(m.M) + r) * W_ + i]);
      }
      pairs[i] = {gain * s1 / m.M, gain * s2 / m.M};
    }

    InferResult res;
    res.pairs = pairs;
    RVec wv = recover_precoder(users, pairs, gamma_lin, m.n0,
                               users.front().delta, m.phi, &res.ridge_used);
    res.normalized = power_normalize_or_fallback(users, wv);
    res.w2 = PrecoderVec(std::move(wv));
    res.power = res.w2.power();
    return res;
  }

 private:
  struct BlockExec {
    infer_detail::ConvExec conv;
    infer_detail::Kernel fc;
    double fc_bias = 0.0;
    double gamma = 0.0;
    double lambda = 0.0;
  };

  static void affine_prelu(std::vector<double>& buf,
                           const infer_detail::FoldedBn& bn, double slope,
                           int channels) {
    const std::size_t per = buf.size() / channels;
    std::size_t idx = 0;
    for (int c = 0; c < channels; ++c)
      for (std::size_t t = 0; t < per; ++t, ++idx) {
        double x = bn.a[c] * buf[idx] + bn.b[c];
        buf[idx] = x >= 0.0 ? x : slope * x;
      }
  }

  UnfoldedModel* model_;
  int H_ = 0, W_ = 0;
  std::vector<BlockExec> blocks_;
  infer_detail::ConvExec ppu_c1_, ppu_c2_, ppu_c3_;
  infer_detail::FoldedBn bn1_, bn2_;
  double slope1_ = 0.25, slope2_ = 0.25;
};

}  // namespace slp
