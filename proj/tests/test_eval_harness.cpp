#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "slp/eval_harness.hpp"

using namespace slp;

TEST_CASE("toml subset parsing", "[eval_harness]") {
  std::stringstream ss(R"(
# sweep configuration
[sweep]
snr_points = [0, 10, 20]   # dB
methods = ["ipm", "dnet_fp32"]
samples = 64
seed = 9
delta_sq = 2e-4
data = "channels.slpd"
model_fp32 = "fp32.slpw"
)");
  const auto kv = parse_toml(ss);
  CHECK(std::get<std::vector<double>>(kv.at("snr_points")).size() == 3);
  CHECK(std::get<std::vector<std::string>>(kv.at("methods"))[1] ==
        "dnet_fp32");
  CHECK(std::get<double>(kv.at("samples")) == 64);
  CHECK(std::get<std::string>(kv.at("data")) == "channels.slpd");

  const std::string path = "test_spec.toml";
  {
    std::ofstream f(path);
    f << ss.str();
  }
  const SweepSpec spec = sweep_spec_from_toml(path);
  std::remove(path.c_str());
  CHECK(spec.snr_points == std::vector<double>{0, 10, 20});
  CHECK(spec.methods == std::vector<std::string>{"ipm", "dnet_fp32"});
  CHECK(spec.samples == 64);
  CHECK(spec.seed == 9);
  CHECK(spec.delta_sq == 2e-4);
  CHECK(spec.data_path == "channels.slpd");
  CHECK(spec.model_paths.at("dnet_fp32") == "fp32.slpw");
}

TEST_CASE("toml errors", "[eval_harness]") {
  std::stringstream bad("key value\n");
  CHECK_THROWS(parse_toml(bad));
  std::stringstream bad2("key = [1, 2\n");
  CHECK_THROWS(parse_toml(bad2));
}

TEST_CASE("sweep row counts and determinism", "[eval_harness]") {
  const ChannelSet data = generate_channels(4, 4, 40, 77);
  SweepSpec spec;
  spec.snr_points = {5.0, 15.0};
  spec.methods = {"ipm"};
  spec.samples = 25;
  spec.seed = 3;
  spec.delta_sq = 1e-4;
  std::vector<eval_detail::MethodRunner> runners{eval_detail::ipm_runner()};
  const auto rows = sweep_power_vs_sinr(spec, data, runners);
  REQUIRE(rows.size() == spec.snr_points.size() * spec.methods.size());
  for (const auto& r : rows) {
    CHECK(r.sample_count == 25);
    CHECK(r.feasibility_rate >= 0.0);
    CHECK(r.feasibility_rate <= 1.0);
    CHECK(r.mean_power >= 0.0);
    CHECK(r.failures + 0 >= 0);
  }
  // bit-identical reproduction under a fixed seed
  const auto rows2 = sweep_power_vs_sinr(spec, data, runners);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].mean_power == rows2[i].mean_power);
    CHECK(rows[i].feasibility_rate == rows2[i].feasibility_rate);
  }
}

TEST_CASE("error-bound sweep basics", "[eval_harness]") {
  const ChannelSet data = generate_channels(4, 4, 30, 99);
  SweepSpec spec;
  spec.snr_points = {30.0};
  spec.error_bounds = {0.0, 1e-5, 1e-4, 1e-3};
  spec.methods = {"ipm"};
  spec.samples = 20;
  spec.seed = 4;
  spec.snr_db_fixed = 30.0;
  std::vector<eval_detail::MethodRunner> runners{eval_detail::ipm_runner()};
  const auto rows = sweep_power_vs_errorbound(spec, data, runners);
  REQUIRE(rows.size() == 4);
  // the zero column equals a direct nonrobust run
  const ResultRow direct = run_cell(runners[0], data, 20, 30.0, 0.0,
                                    spec.phi, spec.seed);
  CHECK(rows[0].mean_power == direct.mean_power);
  // robustness cost grows with the bound
  CHECK(rows[3].mean_power > rows[1].mean_power);
}

TEST_CASE("csv and curve emission", "[eval_harness]") {
  std::vector<ResultRow> rows(2);
  rows[0].method = "ipm";
  rows[0].snr_db = 10;
  rows[0].mean_power = 1.25;
  rows[1].method = "ipm";
  rows[1].snr_db = 20;
  rows[1].mean_power = 2.5;
  write_result_csv("test_rows.csv", rows);
  std::ifstream f("test_rows.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header ==
        "method,snr_db,delta_sq,mean_power,feasibility_rate,mean_time_us,"
        "sample_count,failures,g1_max,g2_max");
  int lines = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 2);
  std::remove("test_rows.csv");

  write_curve_dat("test_curve.dat", {{0.0, 1.0}, {5.0, 2.0}});
  std::ifstream g("test_curve.dat");
  double a, b;
  int n = 0;
  while (g >> a >> b) ++n;
  CHECK(n == 2);
  std::remove("test_curve.dat");
}

TEST_CASE("timing benchmark repeatability", "[eval_harness]") {
  const ChannelSet data = generate_channels(4, 4, 16, 55);
  UnfoldedModel model = build_model(4, 4, 2, Precision::fp32, M_PI / 4, 5);
  const InferenceEngine engine(model);
  const TimingRow a = benchmark_inference("fp32", engine, data, 400, 20.0,
                                          1e-4, M_PI / 4, 7);
  const TimingRow b = benchmark_inference("fp32", engine, data, 400, 20.0,
                                          1e-4, M_PI / 4, 7);
  CHECK(a.median_us > 0.0);
  const double ratio = a.median_us / b.median_us;
  CHECK(ratio > 0.8);
  CHECK(ratio < 1.25);
}

TEST_CASE("spearman rank correlation", "[eval_harness]") {
  CHECK(spearman_rho({1, 2, 3, 4}, {10, 20, 30, 40}) == Catch::Approx(1.0));
  CHECK(spearman_rho({1, 2, 3, 4}, {40, 30, 20, 10}) == Catch::Approx(-1.0));
  CHECK(spearman_rho({1, 2, 3, 4}, {10, 20, 40, 30}) == Catch::Approx(0.8));
}
