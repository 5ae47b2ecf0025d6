#pragma once

// Minimal neural layer kit with reverse-mode gradients and Adam: 2-D
// convolution, batch normalization, PReLU, softplus, average pooling,
// flatten and fully-connected layers. All math is in 64-bit floating point.
// Layers cache their forward inputs and implement an explicit backward.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "slp/quantization.hpp"
#include "slp/rng.hpp"

namespace slp::nn {

struct NDArray {
  std::vector<int> shape;
  std::vector<double> v;

  NDArray() = default;
  explicit NDArray(std::vector<int> s) : shape(std::move(s)) {
    v.assign(count(shape), 0.0);
  }

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
  }
  static NDArray zeros(std::vector<int> s) { return NDArray(std::move(s)); }

  std::size_t size() const { return v.size(); }
  int dim(int i) const { return shape[i]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  double& operator()(int b, int c, int h, int w) {
    return v[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + h) *
                 shape[3] +
             w];
  }
  double operator()(int b, int c, int h, int w) const {
    return v[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + h) *
                 shape[3] +
             w];
  }
  double& at2(int i, int j) { return v[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at2(int i, int j) const {
    return v[static_cast<std::size_t>(i) * shape[1] + j];
  }

  NDArray reshaped(std::vector<int> s) const {
    if (count(s) != size()) throw std::invalid_argument("reshape: size mismatch");
    NDArray out;
    out.shape = std::move(s);
    out.v = v;
    return out;
  }
  void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

enum class ParamRole : std::uint8_t {
  weight = 0,
  bias = 1,
  bn_scale = 2,
  bn_shift = 3,
  prelu_slope = 4,
  bn_mean = 5,  // running statistic, not trained
  bn_var = 6,   // running statistic, not trained
  scalar = 7
};

struct LayerParam {
  std::string name;
  ParamRole role = ParamRole::weight;
  Precision tag = Precision::fp32;
  bool trainable = true;
  NDArray value;
  NDArray grad;

  void zero_grad() { grad.fill(0.0); }
};

struct Layer {
  virtual ~Layer() = default;
  virtual NDArray forward(const NDArray& x, bool train) = 0;
  virtual NDArray backward(const NDArray& gy) = 0;
  virtual std::vector<LayerParam*> params() { return {}; }

 protected:
  bool has_forward_ = false;
  void require_forward() const {
    if (!has_forward_)
      throw std::logic_error("layer backward called before forward");
  }
};

// He-uniform fan-in initialization.
inline void he_uniform(NDArray& w, std::size_t fan_in, Rng& rng,
                       double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& x : w.v) x = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------------------

class Conv2d : public Layer {
 public:
  Conv2d(int in_ch, int out_ch, int ksize, int pad, int dilation,
         bool with_bias, const std::string& name)
      : in_ch_(in_ch), out_ch_(out_ch), k_(ksize), pad_(pad), dil_(dilation),
        with_bias_(with_bias) {
    weight_.name = name + ".weight";
    weight_.role = ParamRole::weight;
    weight_.value = NDArray({out_ch, in_ch, ksize, ksize});
    weight_.grad = NDArray({out_ch, in_ch, ksize, ksize});
    if (with_bias) {
      bias_.name = name + ".bias";
      bias_.role = ParamRole::bias;
      bias_.value = NDArray({out_ch});
      bias_.grad = NDArray({out_ch});
    }
  }

  void init(Rng& rng) {
    he_uniform(weight_.value, static_cast<std::size_t>(in_ch_) * k_ * k_, rng);
    if (with_bias_) bias_.value.fill(0.0);
  }

  int out_h(int h) const { return h + 2 * pad_ - dil_ * (k_ - 1); }

  NDArray forward(const NDArray& x, bool) override {
    if (x.ndim() != 4 || x.dim(1) != in_ch_)
      throw std::invalid_argument("Conv2d: input shape mismatch");
    x_ = x;
    has_forward_ = true;
    effective_weights();
    const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int OH = out_h(H), OW = out_h(W);
    if (OH < 1 || OW < 1)
      throw std::invalid_argument("Conv2d: output would be empty");
    NDArray y({B, out_ch_, OH, OW});
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < out_ch_; ++o)
        for (int i = 0; i < OH; ++i)
          for (int j = 0; j < OW; ++j) {
            double acc = with_bias_ ? bias_.value.v[o] : 0.0;
            for (int c = 0; c < in_ch_; ++c)
              for (int u = 0; u < k_; ++u) {
                const int h = i + u * dil_ - pad_;
                if (h < 0 || h >= H) continue;
                for (int vv = 0; vv < k_; ++vv) {
                  const int w = j + vv * dil_ - pad_;
                  if (w < 0 || w >= W) continue;
                  acc += eff_((o * in_ch_ + c) * k_ * k_ + u * k_ + vv) *
                         x(b, c, h, w);
                }
              }
            y(b, o, i, j) = acc;
          }
    return y;
  }

  NDArray backward(const NDArray& gy) override {
    require_forward();
    const int B = x_.dim(0), H = x_.dim(2), W = x_.dim(3);
    const int OH = gy.dim(2), OW = gy.dim(3);
    NDArray gx(x_.shape);
    NDArray gw(weight_.value.shape);
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < out_ch_; ++o)
        for (int i = 0; i < OH; ++i)
          for (int j = 0; j < OW; ++j) {
            const double g = gy(b, o, i, j);
            if (with_bias_) bias_.grad.v[o] += g;
            for (int c = 0; c < in_ch_; ++c)
              for (int u = 0; u < k_; ++u) {
                const int h = i + u * dil_ - pad_;
                if (h < 0 || h >= H) continue;
                for (int vv = 0; vv < k_; ++vv) {
                  const int w = j + vv * dil_ - pad_;
                  if (w < 0 || w >= W) continue;
                  const std::size_t wi =
                      (static_cast<std::size_t>(o) * in_ch_ + c) * k_ * k_ +
                      u * k_ + vv;
                  gx(b, c, h, w) += g * eff_(wi);
                  gw.v[wi] += g * x_(b, c, h, w);
                }
              }
          }
    accumulate_weight_grad(gw);
    return gx;
  }

  std::vector<LayerParam*> params() override {
    std::vector<LayerParam*> p{&weight_};
    if (with_bias_) p.push_back(&bias_);
    return p;
  }

  LayerParam& weight() { return weight_; }
  bool has_bias() const { return with_bias_; }

 protected:
  // Quantized layers run on beta*sign(shadow); fp32 on the shadow itself.
  void effective_weights() {
    if (weight_.tag == Precision::fp32) {
      eff_view_ = &weight_.value.v;
      return;
    }
    const QuantTensor q =
        quantize(weight_.value.v.data(), weight_.value.shape, weight_.tag);
    eff_storage_ = unpack(q);
    eff_view_ = &eff_storage_;
  }
  double eff_(std::size_t i) const { return (*eff_view_)[i]; }

  void accumulate_weight_grad(const NDArray& gw) {
    if (weight_.tag == Precision::fp32) {
      for (std::size_t i = 0; i < gw.size(); ++i)
        weight_.grad.v[i] += gw.v[i];
    } else {
      std::vector<double> masked(gw.size());
      ste_backward(gw.v.data(), weight_.value.v.data(), gw.size(),
                   masked.data());
      for (std::size_t i = 0; i < gw.size(); ++i)
        weight_.grad.v[i] += masked[i];
    }
  }

  int in_ch_, out_ch_, k_, pad_, dil_;
  bool with_bias_;
  LayerParam weight_, bias_;
  NDArray x_;
  std::vector<double> eff_storage_;
  const std::vector<double>* eff_view_ = nullptr;
};

// ---------------------------------------------------------------------------

class BatchNorm2d : public Layer {
 public:
  BatchNorm2d(int channels, double eps, double momentum,
              const std::string& name)
      : c_(channels), eps_(eps), momentum_(momentum) {
    scale_ = make(name + ".scale", ParamRole::bn_scale, 1.0);
    shift_ = make(name + ".shift", ParamRole::bn_shift, 0.0);
    run_mean_ = make(name + ".running_mean", ParamRole::bn_mean, 0.0);
    run_var_ = make(name + ".running_var", ParamRole::bn_var, 1.0);
    run_mean_.trainable = false;
    run_var_.trainable = false;
  }

  NDArray forward(const NDArray& x, bool train) override {
    if (x.ndim() != 4 || x.dim(1) != c_)
      throw std::invalid_argument("BatchNorm2d: input shape mismatch");
    x_ = x;
    train_ = train;
    has_forward_ = true;
    const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
    const double ns = static_cast<double>(B) * H * W;
    NDArray y(x.shape);
    xhat_ = NDArray(x.shape);
    invstd_.assign(c_, 0.0);
    mean_.assign(c_, 0.0);
    for (int c = 0; c < c_; ++c) {
      double mu, var;
      if (train) {
        double s = 0.0, s2 = 0.0;
        for (int b = 0; b < B; ++b)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              const double xv = x(b, c, h, w);
              s += xv;
              s2 += xv * xv;
            }
        mu = s / ns;
        var = s2 / ns - mu * mu;  // biased, used for normalization
        if (var < 0.0) var = 0.0;
        const double unbiased = ns > 1.5 ? var * ns / (ns - 1.0) : var;
        run_mean_.value.v[c] =
            (1.0 - momentum_) * run_mean_.value.v[c] + momentum_ * mu;
        run_var_.value.v[c] =
            (1.0 - momentum_) * run_var_.value.v[c] + momentum_ * unbiased;
      } else {
        mu = run_mean_.value.v[c];
        var = run_var_.value.v[c];
      }
      mean_[c] = mu;
      const double is = 1.0 / std::sqrt(var + eps_);
      invstd_[c] = is;
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            const double xh = (x(b, c, h, w) - mu) * is;
            xhat_(b, c, h, w) = xh;
            y(b, c, h, w) = scale_.value.v[c] * xh + shift_.value.v[c];
          }
    }
    return y;
  }

  NDArray backward(const NDArray& gy) override {
    require_forward();
    const int B = x_.dim(0), H = x_.dim(2), W = x_.dim(3);
    const double ns = static_cast<double>(B) * H * W;
    NDArray gx(x_.shape);
    for (int c = 0; c < c_; ++c) {
      double sum_gy = 0.0, sum_gy_xh = 0.0;
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            sum_gy += gy(b, c, h, w);
            sum_gy_xh += gy(b, c, h, w) * xhat_(b, c, h, w);
          }
      scale_.grad.v[c] += sum_gy_xh;
      shift_.grad.v[c] += sum_gy;
      const double a = scale_.value.v[c] * invstd_[c];
      for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            if (train_) {
              gx(b, c, h, w) =
                  a * (gy(b, c, h, w) - sum_gy / ns -
                       xhat_(b, c, h, w) * sum_gy_xh / ns);
            } else {
              gx(b, c, h, w) = a * gy(b, c, h, w);
            }
          }
    }
    return gx;
  }

  std::vector<LayerParam*> params() override {
    return {&scale_, &shift_, &run_mean_, &run_var_};
  }

  LayerParam& running_mean() { return run_mean_; }
  LayerParam& running_var() { return run_var_; }

 private:
  LayerParam make(const std::string& name, ParamRole role, double init) {
    LayerParam p;
    p.name = name;
    p.role = role;
    p.value = NDArray({c_});
    p.grad = NDArray({c_});
    p.value.fill(init);
    return p;
  }

  int c_;
  double eps_, momentum_;
  bool train_ = true;
  LayerParam scale_, shift_, run_mean_, run_var_;
  NDArray x_, xhat_;
  std::vector<double> invstd_, mean_;
};

// ---------------------------------------------------------------------------

class PReLU : public Layer {
 public:
  explicit PReLU(const std::string& name, double init_slope = 0.25) {
    slope_.name = name + ".slope";
    slope_.role = ParamRole::prelu_slope;
    slope_.value = NDArray({1});
    slope_.grad = NDArray({1});
    slope_.value.v[0] = init_slope;
  }

  NDArray forward(const NDArray& x, bool) override {
    x_ = x;
    has_forward_ = true;
    NDArray y = x;
    const double a = slope_.value.v[0];
    for (double& t : y.v)
      if (t < 0.0) t *= a;
    return y;
  }

  NDArray backward(const NDArray& gy) override {
    require_forward();
    NDArray gx(x_.shape);
    const double a = slope_.value.v[0];
    double ga = 0.0;
    for (std::size_t i = 0; i < x_.size(); ++i) {
      if (x_.v[i] >= 0.0) {
        gx.v[i] = gy.v[i];
      } else {
        gx.v[i] = a * gy.v[i];
        ga += gy.v[i] * x_.v[i];
      }
    }
    slope_.grad.v[0] += ga;
    return gx;
  }

  std::vector<LayerParam*> params() override { return {&slope_}; }

 private:
  LayerParam slope_;
  NDArray x_;
};

// ---------------------------------------------------------------------------

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}
inline double softplus_grad(double x) {
  // logistic sigmoid, stable on both tails
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double softplus_inv(double y) {
  // inverse on y > 0
  return y > 30.0 ? y : std::log(std::expm1(y));
}

class Softplus : public Layer {
 public:
  NDArray forward(const NDArray& x, bool) override {
    x_ = x;
    has_forward_ = true;
    NDArray y = x;
    for (double& t : y.v) t = softplus(t);
    return y;
  }
  NDArray backward(const NDArray& gy) override {
    require_forward();
    NDArray gx(x_.shape);
    for (std::size_t i = 0; i < x_.size(); ++i)
      gx.v[i] = gy.v[i] * softplus_grad(x_.v[i]);
    return gx;
  }

 private:
  NDArray x_;
};

// ---------------------------------------------------------------------------

class AvgPool2d : public Layer {
 public:
  AvgPool2d(int kh, int kw, int sh, int sw)
      : kh_(kh), kw_(kw), sh_(sh), sw_(sw) {}

  NDArray forward(const NDArray& x, bool) override {
    x_shape_ = x.shape;
    has_forward_ = true;
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = (H - kh_) / sh_ + 1;
    const int OW = (W - kw_) / sw_ + 1;
    NDArray y({B, C, OH, OW});
    const double inv = 1.0 / (kh_ * kw_);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < OH; ++i)
          for (int j = 0; j < OW; ++j) {
            double acc = 0.0;
            for (int u = 0; u < kh_; ++u)
              for (int v = 0; v < kw_; ++v)
                acc += x(b, c, i * sh_ + u, j * sw_ + v);
            y(b, c, i, j) = acc * inv;
          }
    return y;
  }

  NDArray backward(const NDArray& gy) override {
    require_forward();
    NDArray gx(x_shape_);
    const int OH = gy.dim(2), OW = gy.dim(3);
    const double inv = 1.0 / (kh_ * kw_);
    for (int b = 0; b < gy.dim(0); ++b)
      for (int c = 0; c < gy.dim(1); ++c)
        for (int i = 0; i < OH; ++i)
          for (int j = 0; j < OW; ++j) {
            const double g = gy(b, c, i, j) * inv;
            for (int u = 0; u < kh_; ++u)
              for (int v = 0; v < kw_; ++v)
                gx(b, c, i * sh_ + u, j * sw_ + v) += g;
          }
    return gx;
  }

 private:
  int kh_, kw_, sh_, sw_;
  std::vector<int> x_shape_;
};

// ---------------------------------------------------------------------------

class Flatten : public Layer {
 public:
  NDArray forward(const NDArray& x, bool) override {
    x_shape_ = x.shape;
    has_forward_ = true;
    const int B = x.dim(0);
    return x.reshaped({B, static_cast<int>(x.size()) / B});
  }
  NDArray backward(const NDArray& gy) override {
    require_forward();
    return gy.reshaped(x_shape_);
  }

 private:
  std::vector<int> x_shape_;
};

// ---------------------------------------------------------------------------

class Linear : public Layer {
 public:
  Linear(int in, int out, const std::string& name) : in_(in), out_(out) {
    weight_.name = name + ".weight";
    weight_.role = ParamRole::weight;
    weight_.value = NDArray({out, in});
    weight_.grad = NDArray({out, in});
    bias_.name = name + ".bias";
    bias_.role = ParamRole::bias;
    bias_.value = NDArray({out});
    bias_.grad = NDArray({out});
  }

  void init(Rng& rng) {
    he_uniform(weight_.value, static_cast<std::size_t>(in_), rng);
    bias_.value.fill(0.0);
  }

  NDArray forward(const NDArray& x, bool) override {
    if (x.ndim() != 2 || x.dim(1) != in_)
      throw std::invalid_argument("Linear: input shape mismatch");
    x_ = x;
    has_forward_ = true;
    effective_weights();
    const int B = x.dim(0);
    NDArray y({B, out_});
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < out_; ++o) {
        double acc = bias_.value.v[o];
        for (int i = 0; i < in_; ++i)
          acc += (*eff_view_)[static_cast<std::size_t>(o) * in_ + i] *
                 x.at2(b, i);
        y.at2(b, o) = acc;
      }
    return y;
  }

  NDArray backward(const NDArray& gy) override {
    require_forward();
    const int B = x_.dim(0);
    NDArray gx(x_.shape);
    NDArray gw(weight_.value.shape);
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < out_; ++o) {
        const double g = gy.at2(b, o);
        bias_.grad.v[o] += g;
        for (int i = 0; i < in_; ++i) {
          gx.at2(b, i) +=
              g * (*eff_view_)[static_cast<std::size_t>(o) * in_ + i];
          gw.v[static_cast<std::size_t>(o) * in_ + i] += g * x_.at2(b, i);
        }
      }
    if (weight_.tag == Precision::fp32) {
      for (std::size_t i = 0; i < gw.size(); ++i)
        weight_.grad.v[i] += gw.v[i];
    } else {
      std::vector<double> masked(gw.size());
      ste_backward(gw.v.data(), weight_.value.v.data(), gw.size(),
                   masked.data());
      for (std::size_t i = 0; i < gw.size(); ++i)
        weight_.grad.v[i] += masked[i];
    }
    return gx;
  }

  std::vector<LayerParam*> params() override { return {&weight_, &bias_}; }
  LayerParam& weight() { return weight_; }

 private:
  void effective_weights() {
    if (weight_.tag == Precision::fp32) {
      eff_view_ = &weight_.value.v;
      return;
    }
    const QuantTensor q =
        quantize(weight_.value.v.data(), weight_.value.shape, weight_.tag);
    eff_storage_ = unpack(q);
    eff_view_ = &eff_storage_;
  }

  int in_, out_;
  LayerParam weight_, bias_;
  NDArray x_;
  std::vector<double> eff_storage_;
  const std::vector<double>* eff_view_ = nullptr;
};

// ---------------------------------------------------------------------------
// Adam with bias correction. State arrays are keyed by registration order;
// the caller registers a fixed parameter list once per training stage.
// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<LayerParam*> params;
  std::vector<std::vector<double>> m, v;

  void attach(const std::vector<LayerParam*>& ps) {
    params = ps;
    m.clear();
    v.clear();
    step = 0;
    for (LayerParam* p : params) {
      m.emplace_back(p->value.size(), 0.0);
      v.emplace_back(p->value.size(), 0.0);
    }
  }
};

inline void adam_step(AdamState& st) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < st.params.size(); ++k) {
    LayerParam* p = st.params[k];
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad.v[i];
      st.m[k][i] = st.beta1 * st.m[k][i] + (1.0 - st.beta1) * g;
      st.v[k][i] = st.beta2 * st.v[k][i] + (1.0 - st.beta2) * g * g;
      const double mhat = st.m[k][i] / bc1;
      const double vhat = st.v[k][i] / bc2;
      p->value.v[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

}  // namespace slp::nn
