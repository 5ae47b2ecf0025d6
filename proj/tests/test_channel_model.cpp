#include <catch2/catch_amalgamated.hpp>
#include <cstdio>

#include "slp/channel_model.hpp"

using namespace slp;

TEST_CASE("empty generation keeps dimensions", "[channel_model]") {
  const ChannelSet set = generate_channels(4, 4, 0, 7);
  CHECK(set.M == 4);
  CHECK(set.K == 4);
  CHECK(set.size() == 0);
}

TEST_CASE("invalid dimensions rejected", "[channel_model]") {
  CHECK_THROWS_AS(generate_channels(0, 4, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_channels(4, 0, 1, 1), std::invalid_argument);
}

TEST_CASE("unit average coefficient power", "[channel_model]") {
  const ChannelSet set = generate_channels(4, 4, 100000, 1);
  double acc = 0.0;
  std::size_t n = 0;
  for (const CMat& h : set.samples) {
    acc += h.squaredNorm();
    n += h.size();
  }
  const double mean = acc / static_cast<double>(n);
  CHECK(mean > 0.95);
  CHECK(mean < 1.05);
}

TEST_CASE("seeded generation is bitwise deterministic", "[channel_model]") {
  const ChannelSet a = generate_channels(3, 2, 50, 99);
  const ChannelSet b = generate_channels(3, 2, 50, 99);
  const ChannelSet c = generate_channels(3, 2, 50, 100);
  bool equal = true, differs = false;
  for (std::size_t s = 0; s < a.size(); ++s) {
    equal = equal && (a.samples[s] == b.samples[s]);
    differs = differs || (a.samples[s] != c.samples[s]);
  }
  CHECK(equal);
  CHECK(differs);
}

TEST_CASE("csi error sampler respects the bound", "[channel_model]") {
  SECTION("zero radius") {
    const CsiError e = sample_csi_error(4, 0.0, 3);
    CHECK(e.e.norm() == 0.0);
  }
  SECTION("negative radius rejected") {
    CHECK_THROWS_AS(sample_csi_error(4, -1.0, 3), std::invalid_argument);
  }
  SECTION("ball coverage") {
    const double delta = std::sqrt(2e-4);
    double max_norm = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const CsiError e = sample_csi_error(4, delta, 1000 + i);
      const double n = e.e.norm();
      REQUIRE(n <= delta * (1.0 + 1e-12));
      max_norm = std::max(max_norm, n);
    }
    CHECK(max_norm > 0.9 * delta);
  }
}

TEST_CASE("rotated channel construction", "[channel_model]") {
  Rng rng(5);
  CVec h(3);
  for (int i = 0; i < 3; ++i) h[i] = Cplx(rng.gaussian(), rng.gaussian());

  SECTION("all users share a symbol: hhat = K h") {
    SymbolFrame f;
    f.d = CVec::Constant(4, Cplx(std::sqrt(0.5), std::sqrt(0.5)));
    f.phases = {M_PI / 4, M_PI / 4, M_PI / 4, M_PI / 4};
    const CVec hhat = build_rotated_channel(h, f, 2);
    CHECK((hhat - 4.0 * h).norm() < 1e-12);
  }
  SECTION("single user identity") {
    SymbolFrame f;
    f.d = CVec::Constant(1, Cplx(std::sqrt(0.5), std::sqrt(0.5)));
    f.phases = {M_PI / 4};
    const CVec hhat = build_rotated_channel(h, f, 0);
    CHECK((hhat - h).norm() < 1e-14);
  }
  SECTION("two users with phases pi/4, 3pi/4") {
    SymbolFrame f;
    f.d = CVec(2);
    f.d[0] = Cplx(std::cos(M_PI / 4), std::sin(M_PI / 4));
    f.d[1] = Cplx(std::cos(3 * M_PI / 4), std::sin(3 * M_PI / 4));
    f.phases = {M_PI / 4, 3 * M_PI / 4};
    const CVec hhat = build_rotated_channel(h, f, 0);
    const Cplx factor = 1.0 + Cplx(std::cos(M_PI / 2), std::sin(M_PI / 2));
    CHECK((hhat - factor * h).norm() < 1e-12);
  }
  SECTION("non-unit symbol rejected") {
    SymbolFrame f;
    f.d = CVec::Constant(2, Cplx(2.0, 0.0));
    f.phases = {0.0, 0.0};
    CHECK_THROWS_AS(build_rotated_channel(h, f, 0), std::invalid_argument);
  }
}

TEST_CASE("real stacking preserves the norm", "[channel_model]") {
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(200 + trial);
    CVec h(5);
    for (int i = 0; i < 5; ++i) h[i] = Cplx(rng.gaussian(), rng.gaussian());
    const RVec psi = real_stack(h);
    CHECK(psi.norm() == Catch::Approx(h.norm()).epsilon(1e-14));
  }
}

TEST_CASE("qpsk phases come from the gray set", "[channel_model]") {
  Rng rng(11);
  const SymbolFrame f = random_qpsk_frame(64, rng);
  for (int k = 0; k < 64; ++k) {
    CHECK(std::abs(std::abs(f.d[k]) - 1.0) < 1e-12);
    bool found = false;
    for (double p : {M_PI / 4, 3 * M_PI / 4, 5 * M_PI / 4, 7 * M_PI / 4})
      found = found || std::abs(f.phases[k] - p) < 1e-12;
    CHECK(found);
  }
}

TEST_CASE("dataset file round trip", "[channel_model]") {
  const ChannelSet set = generate_channels(3, 2, 17, 1234);
  const std::string path = "test_roundtrip.slpd";
  write_dataset(path, set);
  const ChannelSet back = read_dataset(path);
  std::remove(path.c_str());
  REQUIRE(back.M == set.M);
  REQUIRE(back.K == set.K);
  REQUIRE(back.seed == set.seed);
  REQUIRE(back.size() == set.size());
  for (std::size_t s = 0; s < set.size(); ++s)
    for (int k = 0; k < set.K; ++k)
      for (int m = 0; m < set.M; ++m) {
        // stored as complex64: float-rounded exactly
        CHECK(back.samples[s](k, m).real() ==
              static_cast<double>(static_cast<float>(set.samples[s](k, m).real())));
        CHECK(back.samples[s](k, m).imag() ==
              static_cast<double>(static_cast<float>(set.samples[s](k, m).imag())));
      }
}
