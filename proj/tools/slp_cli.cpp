// Command-line front end: dataset generation, the interior-point baseline,
// model training, weight quantization and the evaluation sweeps.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "slp/eval_harness.hpp"
#include "slp/inference.hpp"
#include "slp/ipm_solver.hpp"
#include "slp/model_io.hpp"
#include "slp/unfolded_slp.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_generate(int antennas, int users, long count, std::uint64_t seed,
                 const std::string& out) {
  const slp::ChannelSet set = slp::generate_channels(
      antennas, users, static_cast<std::size_t>(count), seed);
  slp::write_dataset(out, set);
  std::cout << "wrote " << set.size() << " samples (M=" << antennas
            << ", K=" << users << ") to " << out << "\n";
  return 0;
}

int cmd_solve(const std::string& data_path, double snr_db, double delta_sq,
              double phi, long limit, std::uint64_t seed,
              const std::string& out) {
  const slp::ChannelSet data = slp::read_dataset(data_path);
  const double delta = std::sqrt(delta_sq);
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot open " + out);
  f << "sample_id,snr_db,power,max_margin,iters\n";
  f.precision(12);
  const std::size_t n =
      limit > 0 ? std::min<std::size_t>(limit, data.size()) : data.size();
  int failures = 0;
  double power_sum = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    slp::Rng rng(slp::mix_seed(seed, s));
    const slp::SymbolFrame frame = slp::random_qpsk_frame(data.K, rng);
    const auto users = slp::build_slot_instances(data.samples[s], frame,
                                                 snr_db, delta, phi);
    try {
      const slp::SolveResult res = slp::solve_slp(users);
      const slp::CertifyReport rep = slp::certify(users, res.w2.w2);
      f << s << ',' << snr_db << ',' << res.power << ',' << rep.max_margin
        << ',' << res.iterations << '\n';
      power_sum += res.power;
    } catch (const slp::InfeasibleError& e) {
      f << s << ',' << snr_db << ",nan," << e.max_margin << ",0\n";
      ++failures;
    }
  }
  std::cout << "solved " << (n - failures) << "/" << n
            << " slots, mean power "
            << (n > failures ? power_sum / static_cast<double>(n - failures)
                             : 0.0)
            << "\n";
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& precision,
              slp::TrainConfig cfg, const std::string& out,
              const std::string& trace_path) {
  const slp::ChannelSet data = slp::read_dataset(data_path);
  slp::Precision prec = slp::Precision::fp32;
  if (precision == "binary") prec = slp::Precision::binary;
  else if (precision == "ternary") prec = slp::Precision::ternary;
  else if (precision != "fp32")
    throw std::runtime_error("unknown precision " + precision);

  slp::UnfoldedModel model = slp::build_model(data.M, data.K, cfg.blocks,
                                              prec, cfg.phi, cfg.seed);
  const slp::TrainResult res = slp::train(model, data, cfg);
  slp::save_model(out, model);
  if (!trace_path.empty()) {
    std::ofstream tf(trace_path);
    tf << "iter,stage,loss,lr\n";
    tf.precision(12);
    for (const auto& row : res.trace)
      tf << row.iter << ',' << row.stage << ',' << row.loss << ','
         << row.lr << '\n';
  }
  const slp::MemoryReport mem = slp::memory_estimate(model);
  std::cout << "trained " << precision << " model ("
            << model.param_count() << " params, " << mem.megabytes
            << " MB at inference) -> " << out << "\n";
  return 0;
}

int cmd_quantize(const std::string& in, const std::string& bits,
                 const std::string& out) {
  slp::UnfoldedModel model = slp::load_model(in);
  slp::Precision prec;
  if (bits == "binary") prec = slp::Precision::binary;
  else if (bits == "ternary") prec = slp::Precision::ternary;
  else throw std::runtime_error("--bits must be binary or ternary");
  model.apply_precision(prec);
  slp::save_model(out, model);
  const slp::MemoryReport mem = slp::memory_estimate(model);
  std::cout << "quantized to " << bits << ": " << mem.megabytes
            << " MB, ratio " << mem.ratio_vs_fp32 << "x vs fp32 -> " << out
            << "\n";
  return 0;
}

int cmd_evaluate(const std::string& spec_path, const std::string& out_dir) {
  const slp::SweepSpec spec = slp::sweep_spec_from_toml(spec_path);
  if (spec.data_path.empty())
    throw std::runtime_error("sweep spec must name a data file");
  const slp::ChannelSet data = slp::read_dataset(spec.data_path);
  fs::create_directories(out_dir);

  std::vector<std::unique_ptr<slp::UnfoldedModel>> models;
  std::vector<std::unique_ptr<slp::InferenceEngine>> engines;
  std::vector<slp::eval_detail::MethodRunner> runners;
  std::vector<std::pair<std::string, slp::MemoryReport>> memory_rows;
  for (const std::string& method : spec.methods) {
    if (method == "ipm") {
      runners.push_back(slp::eval_detail::ipm_runner());
      continue;
    }
    const auto it = spec.model_paths.find(method);
    if (it == spec.model_paths.end())
      throw std::runtime_error("no checkpoint configured for " + method);
    models.push_back(
        std::make_unique<slp::UnfoldedModel>(slp::load_model(it->second)));
    engines.push_back(
        std::make_unique<slp::InferenceEngine>(*models.back()));
    runners.push_back(
        slp::eval_detail::model_runner(method, engines.back().get()));
    memory_rows.emplace_back(method, slp::memory_estimate(*models.back()));
  }

  const auto sinr_rows = slp::sweep_power_vs_sinr(spec, data, runners);
  const auto bound_rows = slp::sweep_power_vs_errorbound(spec, data, runners);
  slp::write_result_csv(out_dir + "/power_vs_sinr.csv", sinr_rows);
  slp::write_result_csv(out_dir + "/power_vs_bound.csv", bound_rows);

  for (const std::string& method : spec.methods) {
    std::vector<std::pair<double, double>> sinr_xy, bound_xy;
    for (const auto& r : sinr_rows)
      if (r.method == method) sinr_xy.emplace_back(r.snr_db, r.mean_power);
    for (const auto& r : bound_rows)
      if (r.method == method) bound_xy.emplace_back(r.delta_sq, r.mean_power);
    slp::write_curve_dat(out_dir + "/power_vs_sinr_" + method + ".dat",
                         sinr_xy);
    slp::write_curve_dat(out_dir + "/power_vs_bound_" + method + ".dat",
                         bound_xy);
  }

  std::vector<slp::TimingRow> timing;
  std::size_t ei = 0;
  for (const std::string& method : spec.methods) {
    if (method == "ipm") continue;
    timing.push_back(slp::benchmark_inference(
        method, *engines[ei++], data, std::min(spec.samples, 2000),
        spec.snr_db_fixed, spec.delta_sq, spec.phi, spec.seed));
  }
  slp::write_timing_csv(out_dir + "/timing.csv", timing);
  slp::write_memory_csv(out_dir + "/memory.csv", memory_rows);
  std::cout << "evaluation written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust symbol-level precoding toolkit"};
  app.require_subcommand(1);

  // generate-data
  int antennas = 4, users = 4;
  long count = 50000;
  std::uint64_t seed = 1;
  std::string out_path = "channels.slpd";
  auto* gen = app.add_subcommand("generate-data",
                                 "generate a Rayleigh channel dataset");
  gen->add_option("--antennas", antennas, "BS antenna count M")->required();
  gen->add_option("--users", users, "single-antenna user count K")->required();
  gen->add_option("--count", count, "number of channel samples")->required();
  gen->add_option("--seed", seed, "RNG seed");
  gen->add_option("--out", out_path, "output dataset file")->required();

  // solve
  std::string data_path;
  double snr_db = 20.0, error_bound = 1e-4, phi = M_PI / 4;
  long limit = 0;
  std::string solve_out = "results.csv";
  auto* solve = app.add_subcommand(
      "solve", "run the interior-point baseline over a dataset");
  solve->add_option("--data", data_path, "dataset file")->required();
  solve->add_option("--snr-db", snr_db, "SINR target in dB");
  solve->add_option("--error-bound", error_bound,
                    "squared CSI error bound (delta^2)");
  solve->add_option("--phi", phi, "CI half-angle in radians");
  solve->add_option("--limit", limit, "max samples (0 = all)");
  solve->add_option("--seed", seed, "symbol RNG seed");
  solve->add_option("--out", solve_out, "output CSV")->required();

  // train
  slp::TrainConfig cfg;
  std::string precision = "fp32", model_out = "model.slpw", trace_out;
  auto* train = app.add_subcommand("train", "train an unfolded SLP model");
  train->add_option("--data", data_path, "dataset file")->required();
  train->add_option("--precision", precision, "fp32 | binary | ternary");
  train->add_option("--blocks", cfg.blocks, "PUU blocks B_r");
  train->add_option("--puu-iters", cfg.puu_iters, "outer iterations per block");
  train->add_option("--ppu-iters", cfg.ppu_iters, "outer iterations for PPU");
  train->add_option("--mu", cfg.mu, "regularizer weight");
  train->add_option("--batch", cfg.batch, "batch size");
  train->add_option("--lr0", cfg.lr0, "initial learning rate");
  train->add_option("--lr-decay", cfg.lr_decay, "learning-rate decay factor");
  train->add_option("--error-bound", cfg.delta_sq,
                    "squared CSI error bound (delta^2)");
  train->add_option("--phi", cfg.phi, "CI half-angle in radians");
  train->add_option("--snr-lo", cfg.snr_lo_db, "training SINR lower bound");
  train->add_option("--snr-hi", cfg.snr_hi_db, "training SINR upper bound");
  train->add_option("--search-candidates", cfg.search_candidates,
                    "multiplier search candidates per sample visit");
  train->add_option("--search-sigma", cfg.search_sigma,
                    "multiplier search perturbation scale");
  train->add_option("--seed", cfg.seed, "training seed");
  train->add_option("--out", model_out, "output checkpoint")->required();
  train->add_option("--trace", trace_out, "loss trace CSV");

  // quantize
  std::string q_in, q_bits = "binary", q_out = "model_q.slpw";
  auto* quant = app.add_subcommand("quantize",
                                   "quantize a trained model's weights");
  quant->add_option("--model", q_in, "input checkpoint")->required();
  quant->add_option("--bits", q_bits, "binary | ternary")->required();
  quant->add_option("--out", q_out, "output checkpoint")->required();

  // evaluate
  std::string spec_path, eval_out = "eval";
  auto* eval = app.add_subcommand("evaluate", "run the Monte-Carlo sweeps");
  eval->add_option("--spec", spec_path, "TOML sweep spec")->required();
  eval->add_option("--out", eval_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_generate(antennas, users, count, seed, out_path);
    if (solve->parsed())
      return cmd_solve(data_path, snr_db, error_bound, phi, limit, seed,
                       solve_out);
    if (train->parsed())
      return cmd_train(data_path, precision, cfg, model_out, trace_out);
    if (quant->parsed()) return cmd_quantize(q_in, q_bits, q_out);
    if (eval->parsed()) return cmd_evaluate(spec_path, eval_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
