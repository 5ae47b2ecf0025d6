#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <unistd.h>

#include "slp/inference.hpp"
#include "slp/model_io.hpp"
#include "slp/unfolded_slp.hpp"

using namespace slp;

namespace {

std::vector<CiInstance> random_slot(int M, int K, std::uint64_t seed,
                                    double gamma_db, double delta) {
  const ChannelSet set = generate_channels(M, K, 1, seed);
  Rng rng(mix_seed(seed, 1));
  const SymbolFrame frame = random_qpsk_frame(K, rng);
  return build_slot_instances(set.samples[0], frame, gamma_db, delta,
                              M_PI / 4);
}

// freezes block `l` to constants gamma, lambda, upsilon
void freeze_block(UnfoldedModel& model, int l, double gamma, double lambda,
                  double upsilon) {
  PuuBlock& blk = *model.blocks[l];
  blk.gamma_raw.value.v[0] = nn::softplus_inv(gamma);
  blk.lambda.value.v[0] = lambda;
  blk.subnet->conv.weight().value.fill(0.0);
  blk.subnet->conv.params()[1]->value.fill(0.0);
  blk.subnet->fc.weight().value.fill(0.0);
  blk.subnet->fc.params()[1]->value.v[0] = nn::softplus_inv(upsilon);
}

}  // namespace

TEST_CASE("model construction", "[unfolded_slp]") {
  SECTION("invalid dimensions rejected") {
    CHECK_THROWS_AS(build_model(0, 4, 2, Precision::fp32, M_PI / 4),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_model(4, 4, 0, Precision::fp32, M_PI / 4),
                    std::invalid_argument);
  }
  SECTION("parameter count is stable across builds") {
    UnfoldedModel a = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 7);
    UnfoldedModel b = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 8);
    CHECK(a.param_count() == b.param_count());
    CHECK(a.param_count() == 3249);
  }
  SECTION("default block count from config") {
    TrainConfig cfg;
    CHECK(cfg.blocks == 2);
    CHECK(cfg.puu_iters == 15);
    CHECK(cfg.ppu_iters == 10);
    CHECK(cfg.batch == 200);
    CHECK(cfg.lr0 == 0.001);
    CHECK(cfg.lr_decay == 0.65);
    CHECK(cfg.snr_lo_db == 0.0);
    CHECK(cfg.snr_hi_db == 45.0);
  }
}

TEST_CASE("vanishing step size makes a block the identity",
          "[unfolded_slp]") {
  UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 3);
  freeze_block(model, 0, 1e-14, 0.8, 0.5);
  const auto users = random_slot(4, 4, 11, 10.0, 1e-2);
  std::vector<std::vector<CiInstance>> batch{users};
  const nn::NDArray f = channel_features(batch, 4, 4);
  // start from zero: block output must stay zero; more generally the map
  // degenerates to the identity as gamma -> 0
  const auto w = unfolded_detail::puu_forward(model, f, 10.0, 1, false,
                                              nullptr);
  CHECK(w[0].norm() <= 1e-12);
}

TEST_CASE("barrier subnet emits strictly positive scalars",
          "[unfolded_slp]") {
  UnfoldedModel model = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 5);
  Rng rng(17);
  nn::NDArray f({16, 1, 8, 4});
  for (double& x : f.v) x = 2.0 * rng.gaussian();
  const nn::NDArray u = barrier_subnet_forward(model, 0, f);
  REQUIRE(u.size() == 16);
  for (double x : u.v) CHECK(x > 0.0);
}

TEST_CASE("barrier subnet traceable constant", "[unfolded_slp]") {
  UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 6);
  // zero input and zero head weights: the fc sees softplus(0) = ln 2
  // features but contributes nothing, so the output is softplus(0) = ln 2
  freeze_block(model, 0, 0.01, 0.0, 1.0);
  model.blocks[0]->subnet->fc.params()[1]->value.v[0] = 0.0;
  nn::NDArray f({3, 1, 8, 4});
  const nn::NDArray u = barrier_subnet_forward(model, 0, f);
  for (double x : u.v)
    CHECK(x == Catch::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("barrier subnet accepts the table input shape", "[unfolded_slp]") {
  UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 7);
  nn::NDArray f({200, 1, 8, 4});
  Rng rng(3);
  for (double& x : f.v) x = rng.gaussian();
  const nn::NDArray u = barrier_subnet_forward(model, 0, f);
  CHECK(u.size() == 200);
}

TEST_CASE("ppu produces positive pairs and table shapes", "[unfolded_slp]") {
  UnfoldedModel model = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 9);
  Rng rng(21);
  nn::NDArray f({5, 2, 8, 4});
  for (double& x : f.v) x = rng.gaussian();
  const auto pairs = ppu_forward(model, f, false);
  REQUIRE(pairs.size() == 5);
  for (const auto& sample : pairs) {
    REQUIRE(sample.size() == 4);
    for (const auto& [u1, u2] : sample) {
      CHECK(u1 > 0.0);
      CHECK(u2 > 0.0);
    }
  }
  // intermediate sizes per the design table at M=4, K=4
  const nn::NDArray h1 = model.ppu->c1.forward(f, false);
  CHECK(h1.shape == std::vector<int>{5, 16, 8, 4});
  const nn::NDArray h2 = model.ppu->c2.forward(h1, false);
  CHECK(h2.shape == std::vector<int>{5, 8, 8, 4});
  const nn::NDArray h3 = model.ppu->c3.forward(h2, false);
  CHECK(h3.shape == std::vector<int>{5, 1, 8, 4});
  CHECK(h3.size() / 5 == 2ull * 4 * 4);  // 2KM entries per sample
}

TEST_CASE("batch norm train/eval modes differ", "[unfolded_slp]") {
  UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 10);
  Rng rng(31);
  nn::NDArray f({6, 2, 8, 4});
  for (double& x : f.v) x = rng.gaussian();
  const auto train_pairs = ppu_forward(model, f, true);
  const auto eval_pairs = ppu_forward(model, f, false);
  double diff = 0.0;
  for (int s = 0; s < 6; ++s)
    for (int i = 0; i < 4; ++i)
      diff += std::abs(train_pairs[s][i].first - eval_pairs[s][i].first);
  CHECK(diff > 1e-6);
}

TEST_CASE("lagrangian loss values and gradient", "[unfolded_slp]") {
  const auto users = random_slot(4, 4, 41, 6.0, 1e-2);
  SECTION("zero precoder and zero multipliers leave only the regularizer") {
    UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 11);
    std::vector<const nn::LayerParam*> omega;
    for (auto* p : model.trainable_params()) omega.push_back(p);
    std::vector<std::vector<CiInstance>> batch{users};
    std::vector<RVec> w{RVec::Zero(8)};
    std::vector<std::vector<MultiplierPair>> pairs{
        std::vector<MultiplierPair>(4, {0.0, 0.0})};
    const double mu = 1e-4;
    const double loss = lagrangian_loss(batch, w, pairs, omega, mu);
    double reg = 0.0;
    for (const auto* p : omega)
      for (double x : p->value.v) reg += x * x;
    CHECK(loss == Catch::Approx(mu * reg / omega.size()).epsilon(1e-12));
  }
  SECTION("analytic w-gradient matches finite differences") {
    Rng rng(55);
    RVec w(8);
    for (int i = 0; i < 8; ++i) w[i] = rng.gaussian();
    std::vector<MultiplierPair> pairs(4);
    for (auto& p : pairs) p = {rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)};
    const RVec g = lagrangian_terms_grad_w(users, w, pairs);
    const double h = 1e-6;
    for (int i = 0; i < 8; ++i) {
      RVec wp = w, wm = w;
      wp[i] += h;
      wm[i] -= h;
      const double fd = (lagrangian_terms(users, wp, pairs) -
                         lagrangian_terms(users, wm, pairs)) /
                        (2.0 * h);
      CHECK(std::abs(g[i] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("toy training loss is mostly non-increasing", "[unfolded_slp]") {
  const ChannelSet data = generate_channels(4, 4, 200, 2024);
  UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 12);
  TrainConfig cfg;
  cfg.blocks = 1;
  cfg.puu_iters = 15;
  cfg.ppu_iters = 0;
  cfg.snr_lo_db = cfg.snr_hi_db = 10.0;
  cfg.seed = 99;
  const TrainResult res = train(model, data, cfg);
  REQUIRE(res.trace.size() == 15);
  int non_increasing = 0;
  for (std::size_t i = 1; i < res.trace.size(); ++i)
    if (res.trace[i].loss <= res.trace[i - 1].loss * (1.0 + 1e-12) ||
        res.trace[i].loss <= res.trace[i - 1].loss + 1e-9)
      ++non_increasing;
  CHECK(non_increasing >= static_cast<int>(0.8 * (res.trace.size() - 1)));
  // learning-rate schedule: x0.65 per outer iteration
  CHECK(res.trace[1].lr == Catch::Approx(0.65 * res.trace[0].lr));
  CHECK(res.min_emitted_multiplier > 0.0);
}

TEST_CASE("precoder recovery", "[unfolded_slp]") {
  const auto users = random_slot(4, 4, 61, 6.0, 1e-2);
  SECTION("zero multipliers give the zero precoder") {
    std::vector<MultiplierPair> pairs(4, {0.0, 0.0});
    const RVec w = recover_precoder(users, pairs, 4.0, 1.0, 1e-2, M_PI / 4);
    CHECK(w.norm() == 0.0);
  }
  SECTION("stationarity of the Lagrangian at the output") {
    for (int t = 0; t < 25; ++t) {
      Rng rng(700 + t);
      const auto slot = random_slot(4, t % 3 + 1, 800 + t, 6.0, 1e-2);
      std::vector<MultiplierPair> pairs(slot.size());
      for (auto& p : pairs)
        p = {rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0)};
      const double glin = slot[0].gamma_lin;
      const RVec w =
          recover_precoder(slot, pairs, glin, 1.0, 1e-2, M_PI / 4);
      const RVec g0 = lagrangian_terms_grad_w(slot, RVec::Zero(8), pairs);
      const RVec g = lagrangian_terms_grad_w(slot, w, pairs);
      CHECK(g.norm() <= 1e-6 * (1.0 + g0.norm()));
      // finite-difference cross-check of the gradient oracle itself
      const double h = 1e-4 * (1.0 + w.norm());
      RVec fd(8);
      for (int i = 0; i < 8; ++i) {
        RVec wp = w, wm = w;
        wp[i] += h;
        wm[i] -= h;
        fd[i] = (lagrangian_terms(slot, wp, pairs) -
                 lagrangian_terms(slot, wm, pairs)) /
                (2.0 * h);
      }
      CHECK(fd.norm() <= 1e-5 * (1.0 + g0.norm()));
    }
  }
  SECTION("large-multiplier limit") {
    Rng rng(91);
    std::vector<MultiplierPair> pairs(4);
    for (auto& p : pairs) p = {rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)};
    const double glin = users[0].gamma_lin, delta = 1e-2;
    const double qs2 = 2.0;
    const double a = std::sqrt(glin) * 1.0;
    // limit system: [d^2 qs^2 sum(u) I - sum u uu'] w = a sum u u
    RMat a_inf = RMat::Zero(8, 8);
    RVec rhs = RVec::Zero(8);
    double usum = 0.0;
    for (int i = 0; i < 4; ++i) {
      usum += pairs[i].first + pairs[i].second;
      a_inf -= pairs[i].first * users[i].u1 * users[i].u1.transpose();
      a_inf -= pairs[i].second * users[i].u2 * users[i].u2.transpose();
      rhs += a * (pairs[i].first * users[i].u1 +
                  pairs[i].second * users[i].u2);
    }
    a_inf.diagonal().array() += delta * delta * qs2 * usum;
    const RVec w_inf = a_inf.fullPivLu().solve(rhs);
    std::vector<MultiplierPair> scaled = pairs;
    for (auto& p : scaled) {
      p.first *= 1e7;
      p.second *= 1e7;
    }
    const RVec w_t =
        recover_precoder(users, scaled, glin, 1.0, delta, M_PI / 4);
    CHECK((w_t - w_inf).norm() <= 1e-4 * (1.0 + w_inf.norm()));
  }
  SECTION("singular system takes the ridge path") {
    const auto slot = random_slot(4, 1, 71, 6.0, 0.0);
    const double u1n2 = slot[0].u1.squaredNorm();
    std::vector<MultiplierPair> pairs{{1.0 / u1n2, 0.0}};
    bool ridge = false;
    (void)recover_precoder(slot, pairs, slot[0].gamma_lin, 1.0, 0.0,
                           M_PI / 4, &ridge);
    CHECK(ridge);
  }
}

TEST_CASE("unfolding reproduces the prox update iterations",
          "[unfolded_slp]") {
  SECTION("single user, two blocks") {
    UnfoldedModel model = build_model(4, 1, 2, Precision::fp32, M_PI / 4, 13);
    const double g1 = 0.07, l1 = 0.9, u1 = 0.6;
    const double g2 = 0.12, l2 = -0.4, u2 = 1.1;
    freeze_block(model, 0, g1, l1, u1);
    freeze_block(model, 1, g2, l2, u2);
    const auto users = random_slot(4, 1, 14, 8.0, 1e-2);
    std::vector<std::vector<CiInstance>> batch{users};
    const nn::NDArray f = channel_features(batch, 4, 1);
    const auto w = unfolded_detail::puu_forward(
        model, f, users[0].gamma_lin, 2, false, nullptr);
    RVec ref = RVec::Zero(8);
    ref = update_step(users[0], ref, BarrierParams{g1, u1, l1});
    ref = update_step(users[0], ref, BarrierParams{g2, u2, l2});
    CHECK((w[0] - ref).norm() <= 1e-12 * (1.0 + ref.norm()));
  }
  SECTION("multi-user composition in user order") {
    UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 15);
    const double g = 0.05, l = 0.7, u = 0.8;
    freeze_block(model, 0, g, l, u);
    const auto users = random_slot(4, 4, 16, 8.0, 1e-2);
    std::vector<std::vector<CiInstance>> batch{users};
    const nn::NDArray f = channel_features(batch, 4, 4);
    const auto w = unfolded_detail::puu_forward(
        model, f, users[0].gamma_lin, 1, false, nullptr);
    RVec ref = (1.0 - 2.0 * g) * RVec::Zero(8) - g * l * RVec::Ones(8);
    for (int i = 0; i < 4; ++i) ref = prox_barrier(users[i], ref, g, u);
    CHECK((w[0] - ref).norm() <= 1e-12 * (1.0 + ref.norm()));
  }
}

TEST_CASE("training protocol mechanics", "[unfolded_slp]") {
  const ChannelSet data = generate_channels(4, 4, 60, 3031);
  SECTION("zero iterations leave the model unchanged") {
    UnfoldedModel model = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 17);
    std::vector<std::vector<double>> before;
    for (auto* p : model.all_params()) before.push_back(p->value.v);
    TrainConfig cfg;
    cfg.puu_iters = 0;
    cfg.ppu_iters = 0;
    cfg.batch = 30;
    const TrainResult res = train(model, data, cfg);
    CHECK(res.trace.empty());
    std::size_t k = 0;
    for (auto* p : model.all_params()) CHECK(p->value.v == before[k++]);
  }
  SECTION("fixed seed reproduces the trajectory bitwise") {
    TrainConfig cfg;
    cfg.puu_iters = 2;
    cfg.ppu_iters = 2;
    cfg.batch = 30;
    cfg.seed = 5;
    UnfoldedModel m1 = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 18);
    UnfoldedModel m2 = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 18);
    const TrainResult r1 = train(m1, data, cfg);
    const TrainResult r2 = train(m2, data, cfg);
    REQUIRE(r1.trace.size() == r2.trace.size());
    for (std::size_t i = 0; i < r1.trace.size(); ++i)
      CHECK(r1.trace[i].loss == r2.trace[i].loss);
    auto p1 = m1.all_params();
    auto p2 = m2.all_params();
    for (std::size_t i = 0; i < p1.size(); ++i)
      CHECK(p1[i]->value.v == p2[i]->value.v);
  }
  SECTION("divergence aborts with the trace attached") {
    ChannelSet bad = data;
    bad.samples[0](0, 0) = Cplx(std::nan(""), 0.0);
    UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 19);
    TrainConfig cfg;
    cfg.blocks = 1;
    cfg.puu_iters = 1;
    cfg.ppu_iters = 0;
    cfg.batch = 60;
    CHECK_THROWS_AS(train(model, bad, cfg), TrainDivergence);
  }
  SECTION("emitted multipliers stay positive during training") {
    UnfoldedModel model = build_model(4, 4, 1, Precision::fp32, M_PI / 4, 20);
    TrainConfig cfg;
    cfg.blocks = 1;
    cfg.puu_iters = 2;
    cfg.ppu_iters = 2;
    cfg.batch = 30;
    const TrainResult res = train(model, data, cfg);
    CHECK(res.min_emitted_multiplier > 0.0);
  }
}

TEST_CASE("inference determinism and quantized kernel equivalence",
          "[unfolded_slp]") {
  const auto users = random_slot(4, 4, 23, 18.0, 1e-2);
  SECTION("eval-mode determinism") {
    UnfoldedModel model = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 29);
    const InferResult a = infer(model, users, 18.0);
    const InferResult b = infer(model, users, 18.0);
    CHECK(a.power == b.power);
    CHECK((a.w2.w2 - b.w2.w2).norm() == 0.0);
  }
  SECTION("packed path equals the dense quantized reference") {
    for (Precision prec : {Precision::binary, Precision::ternary}) {
      UnfoldedModel model =
          build_model(4, 4, 2, prec, M_PI / 4, 31);
      const InferResult dense = infer(model, users, 18.0);
      const InferenceEngine engine(model);
      const InferResult packed = engine.run(users, 18.0);
      CHECK((packed.w2.w2 - dense.w2.w2).norm() <=
            1e-10 * (1.0 + dense.w2.w2.norm()));
    }
  }
  SECTION("engine matches the layer path for fp32") {
    UnfoldedModel model = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 33);
    const InferResult a = infer(model, users, 18.0);
    const InferenceEngine engine(model);
    const InferResult b = engine.run(users, 18.0);
    CHECK((a.w2.w2 - b.w2.w2).norm() <= 1e-9 * (1.0 + a.w2.w2.norm()));
  }
}

TEST_CASE("checkpoint round trip", "[unfolded_slp]") {
  const std::string path = "test_model.slpw";
  SECTION("fp32 parameters survive bitwise") {
    UnfoldedModel model = build_model(3, 2, 2, Precision::fp32, M_PI / 4, 37);
    save_model(path, model);
    UnfoldedModel back = load_model(path);
    std::remove(path.c_str());
    auto pa = model.all_params();
    auto pb = back.all_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK(pa[i]->value.v == pb[i]->value.v);
    }
  }
  SECTION("quantized weights reload to identical values") {
    UnfoldedModel model = build_model(3, 2, 1, Precision::binary, M_PI / 4,
                                      38);
    save_model(path, model);
    UnfoldedModel back = load_model(path);
    std::remove(path.c_str());
    auto pa = model.all_params();
    auto pb = back.all_params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (pa[i]->role != nn::ParamRole::weight) continue;
      const QuantTensor qa = quantize(pa[i]->value.v.data(),
                                      pa[i]->value.shape, Precision::binary);
      CHECK(pb[i]->value.v == unpack(qa));
      CHECK(pb[i]->tag == Precision::binary);
    }
  }
  SECTION("corrupt checkpoint reports a format error with an offset") {
    UnfoldedModel model = build_model(3, 2, 1, Precision::fp32, M_PI / 4, 39);
    save_model(path, model);
    // truncate the file
    std::FILE* f = std::fopen(path.c_str(), "rb+");
    REQUIRE(f != nullptr);
    std::fseek(f, 0, SEEK_END);
    const long size = std::ftell(f);
    std::fclose(f);
    REQUIRE(truncate(path.c_str(), size / 2) == 0);
    try {
      (void)load_model(path);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(e.offset > 0);
    }
    std::remove(path.c_str());
  }
}

TEST_CASE("memory ratios for the table architecture", "[unfolded_slp]") {
  UnfoldedModel fp = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 41);
  UnfoldedModel bin = build_model(4, 4, 2, Precision::binary, M_PI / 4, 41);
  UnfoldedModel ter = build_model(4, 4, 2, Precision::ternary, M_PI / 4, 41);
  const MemoryReport rf = memory_estimate(fp);
  const MemoryReport rb = memory_estimate(bin);
  const MemoryReport rt = memory_estimate(ter);
  CHECK(rf.ratio_vs_fp32 == Catch::Approx(1.0));
  CHECK(rb.ratio_vs_fp32 >= 15.0);
  CHECK(rt.ratio_vs_fp32 >= 10.0);
  CHECK(rb.megabytes < rt.megabytes);
  CHECK(rt.megabytes < rf.megabytes);
}
