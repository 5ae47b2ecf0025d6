#pragma once

// RSLP-DNet: unfolded proximal interior-point network for robust SLP.
//
// Architecture. The parameter update unit (PUU) is B_r blocks; block l
// carries a learnable step size gamma^[l] (softplus-reparameterized), a
// learnable lambda^[l] and a small conv+fc subnet emitting a positive
// barrier weight upsilon^[l] per sample. The block computes
//   w+ = prox_{gamma upsilon B}((1 - 2 gamma) w - gamma lambda 1)
// with the prox applied per user in user-index order. The post-processing
// unit (PPU) is a three-stage conv stack producing per-user multiplier
// pairs (u1_i, u2_i); the transmit precoder is recovered in closed form as
// the stationary point of the Lagrangian of the constrained problem.
//
// Training is unsupervised and block-wise: each PUU block minimizes the
// Lagrangian loss for a fixed number of outer iterations, then the PPU is
// trained with the closed-form precoder in the loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "slp/barrier_prox.hpp"
#include "slp/channel_model.hpp"
#include "slp/ci_geometry.hpp"
#include "slp/nn_core.hpp"
#include "slp/quantization.hpp"

namespace slp {

struct TrainConfig {
  int puu_iters = 15;   // outer iterations per PUU block
  int ppu_iters = 10;   // outer iterations for the PPU
  int blocks = 2;       // B_r
  int batch = 200;
  double lr0 = 1e-3;
  double lr_decay = 0.65;  // per outer iteration
  double mu = 1e-4;        // parameter regularizer weight
  double snr_lo_db = 0.0;
  double snr_hi_db = 45.0;
  double delta_sq = 1e-4;  // CSI error bound (squared) used for training
  double phi = M_PI / 4;
  std::uint64_t seed = 1;
  // PPU stage: per-sample multiplier search that produces the regression
  // targets (candidates per visit, log-normal perturbation scale).
  int search_candidates = 8;
  double search_sigma = 0.4;
};

// Per-user multiplier pair (u1, u2), both >= 0.
using MultiplierPair = std::pair<double, double>;

struct TraceRow {
  int iter = 0;
  std::string stage;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainDivergence : std::runtime_error {
  std::vector<TraceRow> trace;
  explicit TrainDivergence(std::vector<TraceRow> t)
      : std::runtime_error("training loss diverged (NaN)"), trace(std::move(t)) {}
};

// Head scale applied to the PPU multiplier outputs of user i. The
// squared-form KKT multipliers scale like 1/(2 sqrt(1+tan^2) delta ||psi||)
// (exact for the single-user active set), so the softplus head carries that
// factor and the network only has to learn O(1) corrections. delta and the
// channel norm are floored to keep degenerate slots finite.
inline double multiplier_head_gain(double delta, double psi_norm,
                                   double tan_phi) {
  const double d = std::max(delta, 1e-3);
  const double qs = std::sqrt(1.0 + tan_phi * tan_phi);
  // The extra factor biases the head into the large-multiplier regime,
  // where the recovered direction is scale-invariant and the stationarity
  // system sits far from its singular manifold; the power normalization
  // step absorbs the magnitude.
  return 4.0 / (2.0 * qs * d * std::max(psi_norm, 1e-2));
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

// Table-style barrier term subnet: conv(1->20, 3x3, zero padding) ->
// avg pool (1,1)/(1,1) -> softplus -> flatten -> fc -> softplus.
struct BarrierSubnet {
  nn::Conv2d conv;
  nn::AvgPool2d pool;
  nn::Softplus act1;
  nn::Flatten flat;
  nn::Linear fc;
  nn::Softplus act2;

  BarrierSubnet(int M, int K, const std::string& name)
      : conv(1, 20, 3, 1, 1, true, name + ".conv"),
        pool(1, 1, 1, 1),
        fc(20 * 2 * M * K, 1, name + ".fc") {}

  void init(Rng& rng) {
    conv.init(rng);
    fc.init(rng);
    // multiplier-related head bias: uniform init
    fc.params()[1]->value.v[0] = rng.uniform();
  }

  // (B,1,2M,K) -> positive scalar per sample
  nn::NDArray forward(const nn::NDArray& x, bool train) {
    nn::NDArray h = conv.forward(x, train);
    h = pool.forward(h, train);
    h = act1.forward(h, train);
    h = flat.forward(h, train);
    h = fc.forward(h, train);
    h = act2.forward(h, train);
    return h.reshaped({h.dim(0)});
  }

  void backward(const nn::NDArray& g_out) {
    nn::NDArray g = g_out.reshaped({g_out.dim(0), 1});
    g = act2.backward(g);
    g = fc.backward(g);
    g = flat.backward(g);
    g = act1.backward(g);
    g = pool.backward(g);
    conv.backward(g);
  }

  std::vector<nn::LayerParam*> params() {
    std::vector<nn::LayerParam*> p;
    for (auto* q : conv.params()) p.push_back(q);
    for (auto* q : fc.params()) p.push_back(q);
    return p;
  }
};

struct PuuBlock {
  nn::LayerParam gamma_raw;  // gamma = softplus(gamma_raw) > 0
  nn::LayerParam lambda;
  std::unique_ptr<BarrierSubnet> subnet;

  PuuBlock(int M, int K, const std::string& name) {
    gamma_raw.name = name + ".gamma_raw";
    gamma_raw.role = nn::ParamRole::scalar;
    gamma_raw.value = nn::NDArray({1});
    gamma_raw.grad = nn::NDArray({1});
    lambda.name = name + ".lambda";
    lambda.role = nn::ParamRole::scalar;
    lambda.value = nn::NDArray({1});
    lambda.grad = nn::NDArray({1});
    subnet = std::make_unique<BarrierSubnet>(M, K, name + ".barrier");
  }

  double gamma() const { return nn::softplus(gamma_raw.value.v[0]); }

  void init(Rng& rng) {
    gamma_raw.value.v[0] = nn::softplus_inv(0.01);
    lambda.value.v[0] = 0.0;
    subnet->init(rng);
  }

  std::vector<nn::LayerParam*> params() {
    std::vector<nn::LayerParam*> p{&gamma_raw, &lambda};
    for (auto* q : subnet->params()) p.push_back(q);
    return p;
  }
};

// Conv stack of the PPU (kernel 3x3, dilation 1, unit padding). The convs
// in front of a batch-norm carry no bias.
struct Ppu {
  nn::Conv2d c1;
  nn::BatchNorm2d bn1;
  nn::PReLU p1;
  nn::Conv2d c2;
  nn::BatchNorm2d bn2;
  nn::PReLU p2;
  nn::Conv2d c3;

  Ppu(int in_ch, const std::string& name)
      : c1(in_ch, 16, 3, 1, 1, false, name + ".conv1"),
        bn1(16, 1e-6, 0.1, name + ".bn1"),
        p1(name + ".prelu1"),
        c2(16, 8, 3, 1, 1, false, name + ".conv2"),
        bn2(8, 1e-6, 0.1, name + ".bn2"),
        p2(name + ".prelu2"),
        c3(8, 1, 3, 1, 1, true, name + ".conv3") {}

  void init(Rng& rng) {
    c1.init(rng);
    c2.init(rng);
    c3.init(rng);
    // small head weights + uniform head bias: start near uniform multipliers
    for (double& w : c3.weight().value.v) w *= 0.1;
    c3.params()[1]->value.v[0] = rng.uniform();
  }

  nn::NDArray forward(const nn::NDArray& x, bool train) {
    nn::NDArray h = c1.forward(x, train);
    h = bn1.forward(h, train);
    h = p1.forward(h, train);
    h = c2.forward(h, train);
    h = bn2.forward(h, train);
    h = p2.forward(h, train);
    h = c3.forward(h, train);
    return h;  // (B,1,2M,K)
  }

  void backward(const nn::NDArray& g_out) {
    nn::NDArray g = c3.backward(g_out);
    g = p2.backward(g);
    g = bn2.backward(g);
    g = c2.backward(g);
    g = p1.backward(g);
    g = bn1.backward(g);
    c1.backward(g);
  }

  std::vector<nn::LayerParam*> params() {
    std::vector<nn::LayerParam*> p;
    for (auto* l : std::initializer_list<nn::Layer*>{&c1, &bn1, &p1, &c2,
                                                     &bn2, &p2, &c3})
      for (auto* q : l->params()) p.push_back(q);
    return p;
  }
};

// ---------------------------------------------------------------------------

struct UnfoldedModel {
  int M = 4;
  int K = 4;
  int blocks_n = 2;
  double phi = M_PI / 4;
  double n0 = 1.0;
  Precision precision = Precision::fp32;
  bool concat_puu_features = true;  // PPU input: channel plane + w2 plane

  std::vector<std::unique_ptr<PuuBlock>> blocks;
  std::unique_ptr<Ppu> ppu;

  int ppu_in_channels() const { return concat_puu_features ? 2 : 1; }

  std::vector<nn::LayerParam*> trainable_params() {
    std::vector<nn::LayerParam*> out;
    for (auto& b : blocks)
      for (auto* p : b->params()) out.push_back(p);
    for (auto* p : ppu->params())
      if (p->trainable) out.push_back(p);
    return out;
  }

  std::vector<nn::LayerParam*> all_params() {
    std::vector<nn::LayerParam*> out;
    for (auto& b : blocks)
      for (auto* p : b->params()) out.push_back(p);
    for (auto* p : ppu->params()) out.push_back(p);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : trainable_params()) n += p->value.size();
    return n;
  }

  // Tags every weight-role tensor with the model precision; biases, batch
  // norm and slopes stay full precision.
  void apply_precision(Precision prec) {
    precision = prec;
    for (auto* p : all_params())
      if (p->role == nn::ParamRole::weight)
        p->tag = prec == Precision::fp32 ? Precision::fp32 : prec;
  }
};

inline UnfoldedModel build_model(int M, int K, int blocks_n, Precision prec,
                                 double phi, std::uint64_t seed = 42,
                                 bool concat_features = true) {
  if (M < 1 || K < 1 || blocks_n < 1)
    throw std::invalid_argument("build_model: invalid dimensions");
  UnfoldedModel m;
  m.M = M;
  m.K = K;
  m.blocks_n = blocks_n;
  m.phi = phi;
  m.concat_puu_features = concat_features;
  Rng rng(mix_seed(seed, 0xb10c));
  for (int l = 0; l < blocks_n; ++l) {
    m.blocks.push_back(
        std::make_unique<PuuBlock>(M, K, "puu" + std::to_string(l + 1)));
    m.blocks.back()->init(rng);
  }
  m.ppu = std::make_unique<Ppu>(m.ppu_in_channels(), "ppu");
  m.ppu->init(rng);
  m.apply_precision(prec);
  return m;
}

// ---------------------------------------------------------------------------
// Functional pieces shared by training and inference
// ---------------------------------------------------------------------------

// Per-sample feature scale: rms of the user channel norms, floored. The
// rotated channels share a common symbol-dependent magnitude with a heavy
// lower tail, so features are presented scale-normalized.
inline double feature_scale(const std::vector<CiInstance>& users) {
  double s = 0.0;
  for (const CiInstance& inst : users) s += inst.psi.squaredNorm();
  return std::max(std::sqrt(s / static_cast<double>(users.size())), 1e-3);
}

// Channel feature tensor: plane 0 holds the stacked rotated channels, one
// column per user, normalized by the per-sample feature scale.
inline nn::NDArray channel_features(
    const std::vector<std::vector<CiInstance>>& batch, int M, int K) {
  const int B = static_cast<int>(batch.size());
  nn::NDArray f({B, 1, 2 * M, K});
  for (int s = 0; s < B; ++s) {
    const double inv = 1.0 / feature_scale(batch[s]);
    for (int i = 0; i < K; ++i)
      for (int m = 0; m < 2 * M; ++m)
        f(s, 0, m, i) = inv * batch[s][i].psi[m];
  }
  return f;
}

// PPU multiplier extraction: output column i is user i's 2M-vector; the two
// M-halves pass through softplus and are averaged into (u1_i, u2_i).
inline std::vector<std::vector<MultiplierPair>> pairs_from_ppu_output(
    const nn::NDArray& out, int M, int K) {
  const int B = out.dim(0);
  std::vector<std::vector<MultiplierPair>> pairs(
      B, std::vector<MultiplierPair>(K));
  for (int s = 0; s < B; ++s)
    for (int i = 0; i < K; ++i) {
      double s1 = 0.0, s2 = 0.0;
      for (int m = 0; m < M; ++m) {
        s1 += nn::softplus(out(s, 0, m, i));
        s2 += nn::softplus(out(s, 0, M + m, i));
      }
      pairs[s][i] = {s1 / M, s2 / M};
    }
  return pairs;
}

inline void apply_multiplier_gains(
    std::vector<std::vector<MultiplierPair>>& pairs,
    const std::vector<std::vector<CiInstance>>& batch) {
  for (std::size_t s = 0; s < pairs.size(); ++s)
    for (std::size_t i = 0; i < pairs[s].size(); ++i) {
      const CiInstance& inst = batch[s][i];
      const double g = multiplier_head_gain(inst.delta, inst.psi.norm(),
                                            inst.tan_phi);
      pairs[s][i].first *= g;
      pairs[s][i].second *= g;
    }
}

// Lagrangian of the constrained problem for one sample:
//   ||w||^2 + sum_i [u1_i c1_i(w) + u2_i c2_i(w)]
// with the squared robust-constraint forms
//   c_l(w) = delta^2 ||Q_l w||^2 - (a + lin_l(w))^2,
// lin_1 = psi'Q1 w, lin_2 = -psi'Q2 w, a = sqrt(G n0) tan(phi).
inline double lagrangian_terms(const std::vector<CiInstance>& users,
                               const RVec& w2,
                               const std::vector<MultiplierPair>& pairs) {
  double val = w2.squaredNorm();
  for (std::size_t i = 0; i < users.size(); ++i) {
    const CiInstance& inst = users[i];
    const double a = inst.threshold();
    const double qs2 = 1.0 + inst.tan_phi * inst.tan_phi;
    const double qnorm2 = inst.delta * inst.delta * qs2 * w2.squaredNorm();
    const double l1 = a + inst.u1.dot(w2);
    const double l2 = a + inst.u2.dot(w2);
    val += pairs[i].first * (qnorm2 - l1 * l1);
    val += pairs[i].second * (qnorm2 - l2 * l2);
  }
  return val;
}

inline RVec lagrangian_terms_grad_w(const std::vector<CiInstance>& users,
                                    const RVec& w2,
                                    const std::vector<MultiplierPair>& pairs) {
  RVec g = 2.0 * w2;
  for (std::size_t i = 0; i < users.size(); ++i) {
    const CiInstance& inst = users[i];
    const double a = inst.threshold();
    const double qs2 = 1.0 + inst.tan_phi * inst.tan_phi;
    const double d2qs2 = inst.delta * inst.delta * qs2;
    const double l1 = a + inst.u1.dot(w2);
    const double l2 = a + inst.u2.dot(w2);
    g += pairs[i].first * (2.0 * d2qs2 * w2 - 2.0 * l1 * inst.u1);
    g += pairs[i].second * (2.0 * d2qs2 * w2 - 2.0 * l2 * inst.u2);
  }
  return g;
}

// Batch-mean Lagrangian loss plus the parameter regularizer
// (mu / L) sum_l ||Omega_l||^2 with L the number of parameter tensors.
inline double lagrangian_loss(
    const std::vector<std::vector<CiInstance>>& batch,
    const std::vector<RVec>& w2,
    const std::vector<std::vector<MultiplierPair>>& pairs,
    const std::vector<const nn::LayerParam*>& omega, double mu) {
  if (batch.empty()) return 0.0;
  double loss = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s)
    loss += lagrangian_terms(batch[s], w2[s], pairs[s]);
  loss /= static_cast<double>(batch.size());
  if (!omega.empty()) {
    double reg = 0.0;
    for (const nn::LayerParam* p : omega)
      for (double x : p->value.v) reg += x * x;
    loss += mu * reg / static_cast<double>(omega.size());
  }
  return loss;
}

// Symbol-level power normalization: margins are affine along the ray
// through w, so the minimal-power feasible point on the learned direction
// is available in closed form. Rescales w in place and returns true when
// the direction admits feasibility; leaves w untouched otherwise.
inline bool power_normalize(const std::vector<CiInstance>& users, RVec& w) {
  const double wn = w.norm();
  if (wn < 1e-300) return false;
  double t_req = 0.0;
  for (const CiInstance& inst : users) {
    const double qn = inst.delta * inst.q_norm_scale();
    const double a = inst.threshold();
    for (const RVec* u : {&inst.u1, &inst.u2}) {
      const double beta = (u->dot(w) + qn * wn) / wn;  // margin slope
      if (beta >= 0.0) return false;
      t_req = std::max(t_req, a / (-beta));
    }
  }
  w *= (t_req / wn) * (1.0 + 1e-12);
  return true;
}

// Power normalization with a vertex-direction safety net: both the learned
// direction and the least-squares vertex direction (u_li' d = -1, margins
// equally active) are normalized to their minimal feasible power and the
// cheaper feasible candidate is kept. Returns whether the final precoder
// is feasible.
inline bool power_normalize_or_fallback(const std::vector<CiInstance>& users,
                                        RVec& w) {
  const bool learned_ok = power_normalize(users, w);
  const int n = users.front().dim();
  const int rows = 2 * static_cast<int>(users.size());
  RMat u(rows, n);
  for (std::size_t i = 0; i < users.size(); ++i) {
    u.row(2 * i) = users[i].u1.transpose();
    u.row(2 * i + 1) = users[i].u2.transpose();
  }
  RVec d = u.colPivHouseholderQr().solve(-RVec::Ones(rows));
  if (d.allFinite() && d.norm() > 1e-12 && power_normalize(users, d) &&
      (!learned_ok || d.squaredNorm() < w.squaredNorm())) {
    w = d;
    return true;
  }
  return learned_ok;
}

// Closed-form precoder for given multipliers: solves the stationarity
// system of the Lagrangian,
//   [s0 I - sum_{i,l} u_li u_li u_li'] w = a sum_{i,l} u_li u_li,
// s0 = 1 + delta^2 (1+tan^2) sum u. Near-singular systems get a 1e-10
// ridge and set *ridge_flag.
inline RVec recover_precoder(const std::vector<CiInstance>& users,
                             const std::vector<MultiplierPair>& pairs,
                             double gamma_lin, double n0, double delta,
                             double phi, bool* ridge_flag = nullptr) {
  if (users.empty()) throw std::invalid_argument("recover_precoder: no users");
  const int n = users.front().dim();
  const double tan_phi = std::tan(phi);
  const double qs2 = 1.0 + tan_phi * tan_phi;
  const double a = std::sqrt(gamma_lin * n0) * tan_phi;
  double ups_sum = 0.0;
  RMat A = RMat::Zero(n, n);
  RVec rhs = RVec::Zero(n);
  for (std::size_t i = 0; i < users.size(); ++i) {
    const double u1 = pairs[i].first, u2 = pairs[i].second;
    if (u1 < 0.0 || u2 < 0.0)
      throw std::invalid_argument("recover_precoder: multipliers must be >= 0");
    ups_sum += u1 + u2;
    A -= u1 * (users[i].u1 * users[i].u1.transpose());
    A -= u2 * (users[i].u2 * users[i].u2.transpose());
    rhs += a * (u1 * users[i].u1 + u2 * users[i].u2);
  }
  const double s0 = 1.0 + delta * delta * qs2 * ups_sum;
  A.diagonal().array() += s0;
  Eigen::PartialPivLU<RMat> lu(A);
  RVec w = lu.solve(rhs);
  const double resid = (A * w - rhs).norm();
  const double scale = A.norm() * w.norm() + rhs.norm();
  if (!w.allFinite() || resid > 1e-8 * (1.0 + scale)) {
    RMat Ar = A;
    Ar.diagonal().array() += 1e-10;
    w = Eigen::FullPivLU<RMat>(Ar).solve(rhs);
    if (ridge_flag) *ridge_flag = true;
  } else if (ridge_flag) {
    *ridge_flag = false;
  }
  return w;
}

// ---------------------------------------------------------------------------
// PUU forward/backward
// ---------------------------------------------------------------------------

namespace unfolded_detail {

// Cached scalars for one per-user prox application.
struct ProxCache {
  RVec input;
  ProxDerivs derivs;
};

struct BlockCache {
  nn::NDArray upsilon;               // (B)
  std::vector<RVec> affine_in;       // per sample: w entering the block
  std::vector<std::vector<ProxCache>> prox;  // [sample][user]
};

// Runs blocks [0, n_blocks) over the batch. gamma_lin is shared across the
// batch (one draw per batch during training).
inline std::vector<RVec> puu_forward(UnfoldedModel& model,
                                     const nn::NDArray& features,
                                     double gamma_lin, int n_blocks,
                                     bool train,
                                     std::vector<BlockCache>* caches) {
  const int B = features.dim(0);
  const int n = 2 * model.M;
  const double c0 =
      2.0 * gamma_lin * model.n0 * std::tan(model.phi) * std::tan(model.phi);
  std::vector<RVec> w(B, RVec::Zero(n));
  if (caches) caches->assign(n_blocks, BlockCache{});
  for (int l = 0; l < n_blocks; ++l) {
    PuuBlock& blk = *model.blocks[l];
    nn::NDArray ups = blk.subnet->forward(features, train);
    const double gamma = blk.gamma();
    const double lambda = blk.lambda.value.v[0];
    BlockCache* bc = caches ? &(*caches)[l] : nullptr;
    if (bc) {
      bc->upsilon = ups;
      bc->affine_in.resize(B);
      bc->prox.assign(B, {});
    }
    for (int s = 0; s < B; ++s) {
      if (bc) bc->affine_in[s] = w[s];
      RVec v = (1.0 - 2.0 * gamma) * w[s] -
               (gamma * lambda) * RVec::Ones(n);
      for (int i = 0; i < model.K; ++i) {
        ProxCache pc;
        if (bc) pc.input = v;
        const auto pd = detail::prox_derivs(c0, v.norm(), gamma,
                                            std::max(ups.v[s], 1e-300));
        v *= pd.sigma;
        if (bc) {
          pc.derivs = pd;
          bc->prox[s].push_back(std::move(pc));
        }
      }
      w[s] = v;
    }
  }
  return w;
}

// Backpropagates per-sample gradients g_w (w.r.t. the last block output)
// and optional direct upsilon gradients into block `l_train`'s parameters.
inline void puu_backward_block(UnfoldedModel& model, int l_train,
                               const BlockCache& bc,
                               const std::vector<RVec>& g_w,
                               const std::vector<double>& g_ups_direct) {
  PuuBlock& blk = *model.blocks[l_train];
  const int B = static_cast<int>(g_w.size());
  const double gamma = blk.gamma();
  const double lambda = blk.lambda.value.v[0];
  nn::NDArray g_ups({B});
  double g_gamma = 0.0, g_lambda = 0.0;
  for (int s = 0; s < B; ++s) {
    RVec g = g_w[s];
    double g_gu = 0.0;
    for (int i = static_cast<int>(bc.prox[s].size()) - 1; i >= 0; --i) {
      const ProxCache& pc = bc.prox[s][i];
      const ProxDerivs& pd = pc.derivs;
      // parameter path: d out / d gu = (dsigma/du / gamma) * input
      g_gu += (pd.dsigma_du / gamma) * pc.input.dot(g);
      // input path: J' g with J = sigma I + (sigma'/r) w w'
      g = pd.sigma * g + pd.sigma_r_over_r * pc.input.dot(g) * pc.input;
    }
    const double ups = bc.upsilon.v[s];
    // affine path
    g_gamma += g.dot(-2.0 * bc.affine_in[s] -
                     lambda * RVec::Ones(bc.affine_in[s].size()));
    g_lambda += -gamma * g.sum();
    // gu = gamma * upsilon
    g_gamma += ups * g_gu;
    g_ups.v[s] = gamma * g_gu + g_ups_direct[s];
  }
  blk.gamma_raw.grad.v[0] +=
      g_gamma * nn::softplus_grad(blk.gamma_raw.value.v[0]);
  blk.lambda.grad.v[0] += g_lambda;
  blk.subnet->backward(g_ups);
}

// PPU input tensor: channel plane (+ PUU output plane). The precoder plane
// is normalized by sqrt(G n0) tan(phi) and re-scaled by the feature scale so
// both planes sit at comparable magnitudes across the symbol-rotation tail.
inline nn::NDArray ppu_features(
    const UnfoldedModel& model, const nn::NDArray& chan_features,
    const std::vector<std::vector<CiInstance>>& batch,
    const std::vector<RVec>& w_puu, double gamma_lin) {
  if (!model.concat_puu_features) return chan_features;
  const int B = chan_features.dim(0);
  const int n = 2 * model.M;
  const double a = std::sqrt(gamma_lin * model.n0) * std::tan(model.phi);
  nn::NDArray f({B, 2, n, model.K});
  for (int s = 0; s < B; ++s) {
    const double scale = feature_scale(batch[s]) / a;
    for (int m = 0; m < n; ++m)
      for (int i = 0; i < model.K; ++i) {
        f(s, 0, m, i) = chan_features(s, 0, m, i);
        f(s, 1, m, i) = w_puu[s][m] * scale;
      }
  }
  return f;
}

}  // namespace unfolded_detail

// Barrier subnet of block l on a feature tensor: positive scalar per sample.
inline nn::NDArray barrier_subnet_forward(UnfoldedModel& model, int block,
                                          const nn::NDArray& features,
                                          bool train = false) {
  return model.blocks.at(block)->subnet->forward(features, train);
}

// Full PPU pass on a feature tensor: per-user positive multiplier pairs
// (unit head gain; callers scale by the per-user multiplier gain).
inline std::vector<std::vector<MultiplierPair>> ppu_forward(
    UnfoldedModel& model, const nn::NDArray& features, bool train = false) {
  const nn::NDArray out = model.ppu->forward(features, train);
  return pairs_from_ppu_output(out, model.M, model.K);
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct InferResult {
  PrecoderVec w2;
  double power = 0.0;
  std::vector<MultiplierPair> pairs;
  bool ridge_used = false;
  bool normalized = false;  // symbol-level power normalization applied
};

// Forward pass -> multipliers -> closed-form precoder -> symbol-level power
// normalization along the recovered direction. Parameters are not mutated;
// batch norm runs on its stored running statistics.
inline InferResult infer(UnfoldedModel& model,
                         const std::vector<CiInstance>& users,
                         double gamma_db) {
  if (static_cast<int>(users.size()) != model.K)
    throw std::invalid_argument("infer: user count mismatch");
  const double gamma_lin = db_to_linear(gamma_db);
  std::vector<std::vector<CiInstance>> batch(1);
  batch[0] = users;
  for (auto& inst : batch[0]) inst.gamma_lin = gamma_lin;
  const nn::NDArray f0 = channel_features(batch, model.M, model.K);
  const std::vector<RVec> w_puu = unfolded_detail::puu_forward(
      model, f0, gamma_lin, model.blocks_n, false, nullptr);
  const nn::NDArray fp =
      unfolded_detail::ppu_features(model, f0, batch, w_puu, gamma_lin);
  auto pairs = ppu_forward(model, fp, false);
  apply_multiplier_gains(pairs, batch);
  InferResult res;
  res.pairs = pairs[0];
  RVec w = recover_precoder(batch[0], pairs[0], gamma_lin, model.n0,
                            users.front().delta, model.phi, &res.ridge_used);
  res.normalized = power_normalize_or_fallback(batch[0], w);
  res.w2 = PrecoderVec(std::move(w));
  res.power = res.w2.power();
  return res;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<TraceRow> trace;
  double min_emitted_multiplier = std::numeric_limits<double>::infinity();
};

namespace unfolded_detail {

struct BatchGeometry {
  std::vector<std::vector<CiInstance>> slots;  // [sample][user]
  double gamma_lin = 1.0;
};

// Best multiplier vector found so far for one training sample, scored by
// the worst normalized margin slope of its recovered direction (the score
// and the direction are both SINR-free, so incumbents are comparable
// across batches).
struct Incumbent {
  std::vector<double> ups;  // 2K entries, (u1_0, u2_0, u1_1, ...)
  double merit = -1.0;      // min_li -(slope); <= 0 means no servable found
};

// min over constraints of the negated margin slope along w's direction;
// post-normalization power is threshold^2 / merit^2.
inline double direction_merit(const std::vector<CiInstance>& users,
                              const RVec& w) {
  const double wn = w.norm();
  if (wn < 1e-300) return -1.0;
  double merit = std::numeric_limits<double>::infinity();
  for (const CiInstance& inst : users) {
    const double qn = inst.delta * inst.q_norm_scale();
    for (const RVec* u : {&inst.u1, &inst.u2})
      merit = std::min(merit, -(u->dot(w) / wn + qn));
  }
  return merit;
}

// One search visit: scores the model's own multipliers plus a mix of local
// and active-set moves around the incumbent and keeps the best. The move
// mix matters: single-coordinate boosts/deactivations explore the active
// set, which pure log-normal noise almost never changes.
inline void incumbent_search(const std::vector<CiInstance>& users,
                             double gamma_lin, double n0, double delta,
                             double phi,
                             const std::vector<MultiplierPair>& model_pairs,
                             Incumbent& inc, Rng& rng, int n_cand,
                             double sigma) {
  const int K = static_cast<int>(users.size());
  const int n = 2 * K;
  std::vector<double> v(n);
  auto eval_candidate = [&](const std::vector<double>& cand) {
    std::vector<MultiplierPair> pp(K);
    for (int i = 0; i < K; ++i)
      pp[i] = {std::max(cand[2 * i], 1e-12),
               std::max(cand[2 * i + 1], 1e-12)};
    const RVec w = recover_precoder(users, pp, gamma_lin, n0, delta, phi);
    const double merit = direction_merit(users, w);
    if (merit > inc.merit) {
      inc.merit = merit;
      inc.ups = cand;
    }
    return merit;
  };
  for (int i = 0; i < K; ++i) {
    v[2 * i] = model_pairs[i].first;
    v[2 * i + 1] = model_pairs[i].second;
  }
  eval_candidate(v);
  std::vector<double> symmetric(n);
  for (int i = 0; i < K; ++i) {
    const double g = multiplier_head_gain(users[i].delta,
                                          users[i].psi.norm(),
                                          users[i].tan_phi) *
                     std::log(2.0);
    symmetric[2 * i] = symmetric[2 * i + 1] = g;
  }
  if (inc.merit <= 0.0 || inc.ups.empty()) eval_candidate(symmetric);
  if (inc.ups.empty()) inc.ups = symmetric;
  for (int c = 0; c < n_cand; ++c) {
    v = inc.ups;
    switch (rng.index(6)) {
      case 0:
        for (int j = 0; j < n; ++j) v[j] *= std::exp(0.15 * rng.gaussian());
        break;
      case 1:
        for (int j = 0; j < n; ++j)
          v[j] *= std::exp(sigma * rng.gaussian());
        break;
      case 2:
        v[rng.index(n)] *= std::exp(2.0 * rng.gaussian());
        break;
      case 3:
        v[rng.index(n)] *= 0.02;  // near-deactivate one constraint
        break;
      case 4: {
        // user edge flip: suppress one side, jiggle the other
        const int i = static_cast<int>(rng.index(K));
        const int side = static_cast<int>(rng.index(2));
        v[2 * i + side] *= 0.03;
        v[2 * i + 1 - side] *= std::exp(0.4 * rng.gaussian());
        break;
      }
      default:
        for (int j = 0; j < n; ++j)
          v[j] = symmetric[j] * std::exp(1.0 * rng.gaussian());
        break;
    }
    eval_candidate(v);
  }
}

inline double reg_value(const std::vector<nn::LayerParam*>& omega) {
  double reg = 0.0;
  for (const nn::LayerParam* p : omega)
    if (p->trainable)
      for (double x : p->value.v) reg += x * x;
  return reg;
}

inline void add_reg_grads(const std::vector<nn::LayerParam*>& active,
                          double mu, std::size_t n_tensors) {
  for (nn::LayerParam* p : active)
    if (p->trainable)
      for (std::size_t i = 0; i < p->value.size(); ++i)
        p->grad.v[i] += 2.0 * mu * p->value.v[i] /
                        static_cast<double>(n_tensors);
}

}  // namespace unfolded_detail

// Block-wise unsupervised training. PUU blocks minimize the Lagrangian loss
// with the block's own barrier weight standing in for both constraint
// multipliers; the PPU stage then trains the multiplier head with the
// closed-form precoder in the loop, minimizing the power plus a hinge
// penalty on the normalized robust margins (the exact-penalty form of the
// same constrained problem), with a safety back-off that biases solutions
// strictly feasible.
inline TrainResult train(UnfoldedModel& model, const ChannelSet& data,
                         const TrainConfig& cfg) {
  if (data.samples.empty())
    throw std::invalid_argument("train: dataset is empty");
  if (data.M != model.M || data.K != model.K)
    throw std::invalid_argument("train: dataset dimensions mismatch");
  TrainResult result;
  const int N = static_cast<int>(data.samples.size());
  const double delta = std::sqrt(cfg.delta_sq);

  // Per-sample geometry at a placeholder SINR; gamma is set per batch.
  Rng sym_rng(mix_seed(cfg.seed, 0x515));
  std::vector<std::vector<CiInstance>> base(N);
  for (int s = 0; s < N; ++s) {
    const SymbolFrame frame = random_qpsk_frame(model.K, sym_rng);
    base[s] = build_slot_instances(data.samples[s], frame, 0.0, delta,
                                   cfg.phi);
  }

  Rng order_rng(mix_seed(cfg.seed, 0x0dd));
  Rng snr_rng(mix_seed(cfg.seed, 0x50f));
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);

  const std::vector<nn::LayerParam*> omega = model.trainable_params();
  const std::size_t n_tensors = omega.size();

  auto shuffled = [&]() {
    for (int i = N - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<int>(order_rng.index(i + 1))]);
  };

  auto make_batch = [&](int start, int count,
                        double glin) -> unfolded_detail::BatchGeometry {
    unfolded_detail::BatchGeometry bg;
    bg.gamma_lin = glin;
    bg.slots.reserve(count);
    for (int b = 0; b < count; ++b) {
      std::vector<CiInstance> users = base[order[start + b]];
      for (auto& inst : users) inst.gamma_lin = glin;
      bg.slots.push_back(std::move(users));
    }
    return bg;
  };

  auto trace_check = [&](double loss) {
    if (!std::isfinite(loss)) throw TrainDivergence(result.trace);
  };

  int trace_iter = 0;

  // ---- PUU stages -------------------------------------------------------
  for (int l = 0; l < model.blocks_n; ++l) {
    std::vector<nn::LayerParam*> active = model.blocks[l]->params();
    nn::AdamState adam;
    adam.attach(active);
    for (int epoch = 0; epoch < cfg.puu_iters; ++epoch) {
      adam.lr = cfg.lr0 * std::pow(cfg.lr_decay, epoch);
      shuffled();
      double epoch_loss = 0.0;
      int batches = 0;
      for (int start = 0; start + 1 <= N; start += cfg.batch) {
        const int count = std::min(cfg.batch, N - start);
        const double snr_db = snr_rng.uniform(cfg.snr_lo_db, cfg.snr_hi_db);
        auto bg = make_batch(start, count, db_to_linear(snr_db));
        for (auto* p : active) p->zero_grad();

        const nn::NDArray f0 = channel_features(bg.slots, model.M, model.K);
        std::vector<unfolded_detail::BlockCache> caches;
        const std::vector<RVec> w = unfolded_detail::puu_forward(
            model, f0, bg.gamma_lin, l + 1, true, &caches);

        // loss with pairs (ups, ups) per user
        double loss = 0.0;
        std::vector<RVec> g_w(count);
        std::vector<double> g_ups(count, 0.0);
        const nn::NDArray& ups = caches[l].upsilon;
        for (int s = 0; s < count; ++s) {
          result.min_emitted_multiplier =
              std::min(result.min_emitted_multiplier, ups.v[s]);
          std::vector<MultiplierPair> pp(
              model.K, MultiplierPair{ups.v[s], ups.v[s]});
          loss += lagrangian_terms(bg.slots[s], w[s], pp);
          g_w[s] = lagrangian_terms_grad_w(bg.slots[s], w[s], pp) /
                   static_cast<double>(count);
          double c_sum = 0.0;
          for (int i = 0; i < model.K; ++i) {
            const CiInstance& inst = bg.slots[s][i];
            const double a = inst.threshold();
            const double qs2 = 1.0 + inst.tan_phi * inst.tan_phi;
            const double qn2 =
                inst.delta * inst.delta * qs2 * w[s].squaredNorm();
            const double l1 = a + inst.u1.dot(w[s]);
            const double l2 = a + inst.u2.dot(w[s]);
            c_sum += (qn2 - l1 * l1) + (qn2 - l2 * l2);
          }
          g_ups[s] = c_sum / static_cast<double>(count);
        }
        loss /= count;
        loss += cfg.mu * unfolded_detail::reg_value(omega) /
                static_cast<double>(n_tensors);
        trace_check(loss);
        epoch_loss += loss;
        ++batches;

        unfolded_detail::puu_backward_block(model, l, caches[l], g_w, g_ups);
        unfolded_detail::add_reg_grads(active, cfg.mu, n_tensors);
        adam_step(adam);
      }
      result.trace.push_back({trace_iter++, "puu" + std::to_string(l + 1),
                              batches ? epoch_loss / batches : 0.0, adam.lr});
    }
  }

  // ---- PPU stage ---------------------------------------------------------
  {
    std::vector<nn::LayerParam*> active;
    for (auto* p : model.ppu->params())
      if (p->trainable) active.push_back(p);
    nn::AdamState adam;
    adam.attach(active);
    std::vector<unfolded_detail::Incumbent> incumbents(N);
    Rng search_rng(mix_seed(cfg.seed, 0x5ea));
    for (int epoch = 0; epoch < cfg.ppu_iters; ++epoch) {
      adam.lr = cfg.lr0 * std::pow(cfg.lr_decay, epoch);
      shuffled();
      double epoch_loss = 0.0;
      int batches = 0;
      for (int start = 0; start + 1 <= N; start += cfg.batch) {
        const int count = std::min(cfg.batch, N - start);
        const double snr_db = snr_rng.uniform(cfg.snr_lo_db, cfg.snr_hi_db);
        auto bg = make_batch(start, count, db_to_linear(snr_db));
        for (auto* p : active) p->zero_grad();

        const nn::NDArray f0 = channel_features(bg.slots, model.M, model.K);
        const std::vector<RVec> w_puu = unfolded_detail::puu_forward(
            model, f0, bg.gamma_lin, model.blocks_n, false, nullptr);
        const nn::NDArray fp = unfolded_detail::ppu_features(
            model, f0, bg.slots, w_puu, bg.gamma_lin);
        const nn::NDArray out = model.ppu->forward(fp, true);
        auto pairs = pairs_from_ppu_output(out, model.M, model.K);
        apply_multiplier_gains(pairs, bg.slots);

        double loss = 0.0;
        int targeted = 0;
        nn::NDArray g_out(out.shape);
        for (int s = 0; s < count; ++s) {
          for (const auto& pr : pairs[s])
            result.min_emitted_multiplier =
                std::min({result.min_emitted_multiplier, pr.first, pr.second});
          // refresh this sample's incumbent multipliers, then regress the
          // head onto them in log space
          unfolded_detail::Incumbent& inc = incumbents[order[start + s]];
          unfolded_detail::incumbent_search(
              bg.slots[s], bg.gamma_lin, model.n0, delta, model.phi,
              pairs[s], inc, search_rng, cfg.search_candidates,
              cfg.search_sigma);
          if (inc.merit <= 0.0) continue;  // slot admits no servable precoder
          ++targeted;
          for (int i = 0; i < model.K; ++i) {
            const CiInstance& inst = bg.slots[s][i];
            const double gain = multiplier_head_gain(
                inst.delta, inst.psi.norm(), inst.tan_phi);
            for (int side = 0; side < 2; ++side) {
              const double ups_model =
                  side == 0 ? pairs[s][i].first : pairs[s][i].second;
              const double target =
                  std::max(inc.ups[2 * i + side], 1e-9);
              const double err = std::log(ups_model) - std::log(target);
              loss += err * err;
              // d err^2 / d z_row through gain * mean softplus
              const double base = 2.0 * err / ups_model * gain /
                                  static_cast<double>(model.M);
              for (int m = 0; m < model.M; ++m) {
                const int row = side == 0 ? m : model.M + m;
                g_out(s, 0, row, i) +=
                    base * nn::softplus_grad(out(s, 0, row, i));
              }
            }
          }
        }
        if (targeted > 0) {
          loss /= targeted;
          for (double& g : g_out.v) g /= targeted;
        }
        loss += cfg.mu * unfolded_detail::reg_value(omega) /
                static_cast<double>(n_tensors);
        trace_check(loss);
        epoch_loss += loss;
        ++batches;

        // clip: the solve can spike near multiplier configurations that
        // make the stationarity system singular
        double gnorm2 = 0.0;
        for (double x : g_out.v) gnorm2 += x * x;
        if (gnorm2 > 1e4) {
          const double sc = 100.0 / std::sqrt(gnorm2);
          for (double& x : g_out.v) x *= sc;
        }
        model.ppu->backward(g_out);
        unfolded_detail::add_reg_grads(active, cfg.mu, n_tensors);
        adam_step(adam);
      }
      result.trace.push_back({trace_iter++, "ppu",
                              batches ? epoch_loss / batches : 0.0, adam.lr});
    }
  }
  return result;
}

}  // namespace slp
