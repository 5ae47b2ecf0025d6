#pragma once

// Monte-Carlo evaluation: power-vs-SINR and power-vs-error-bound sweeps,
// inference latency benchmark, memory reports and CSV/plot-data emission.
// Sweeps are deterministic: symbols and channels are keyed off (seed,
// sample index), shared across methods, and accumulated in a fixed order.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "slp/inference.hpp"
#include "slp/ipm_solver.hpp"
#include "slp/model_io.hpp"

namespace slp {

struct SweepSpec {
  std::vector<double> snr_points{0, 5, 10, 15, 20, 25, 30, 35};
  std::vector<double> error_bounds{0.0, 1e-5, 1e-4, 1e-3};  // delta^2 grid
  std::vector<std::string> methods{"ipm"};
  int samples = 2000;
  std::uint64_t seed = 1;
  double delta_sq = 2e-4;      // bound used by the SINR sweep
  double snr_db_fixed = 30.0;  // SINR used by the bound sweep
  double phi = M_PI / 4;
  std::string data_path;
  std::map<std::string, std::string> model_paths;  // method -> checkpoint
};

struct ResultRow {
  std::string method;
  double snr_db = 0.0;
  double delta_sq = 0.0;
  double mean_power = 0.0;
  double feasibility_rate = 0.0;
  double mean_time_us = 0.0;
  int sample_count = 0;
  int failures = 0;
  double g1_max = 0.0;
  double g2_max = 0.0;
};

// Margin threshold under which a sample counts as feasible in the reports.
inline constexpr double kFeasibilityMarginTol = 1e-3;

namespace eval_detail {

struct MethodRunner {
  std::string name;
  // returns the precoder; throws InfeasibleError on failure (ipm)
  std::function<RVec(const std::vector<CiInstance>&, double snr_db)> solve;
};

inline MethodRunner ipm_runner(const SolverOptions& opts = {}) {
  return {"ipm", [opts](const std::vector<CiInstance>& users, double) {
            return solve_slp(users, opts).w2.w2;
          }};
}

inline MethodRunner model_runner(const std::string& name,
                                 const InferenceEngine* engine) {
  return {name, [engine](const std::vector<CiInstance>& users,
                         double snr_db) {
            return engine->run(users, snr_db).w2.w2;
          }};
}

}  // namespace eval_detail

// One (method, operating point) Monte-Carlo cell.
inline ResultRow run_cell(const eval_detail::MethodRunner& method,
                          const ChannelSet& data, int samples, double snr_db,
                          double delta_sq, double phi, std::uint64_t seed) {
  ResultRow row;
  row.method = method.name;
  row.snr_db = snr_db;
  row.delta_sq = delta_sq;
  row.sample_count = samples;
  row.g1_max = row.g2_max = -std::numeric_limits<double>::infinity();
  const double delta = std::sqrt(delta_sq);
  double power_sum = 0.0, time_sum = 0.0;
  int solved = 0, feasible = 0;
  for (int s = 0; s < samples; ++s) {
    const CMat& h = data.samples[s % data.samples.size()];
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(s)));
    const SymbolFrame frame =
        random_qpsk_frame(static_cast<int>(h.rows()), rng);
    const auto users = build_slot_instances(h, frame, snr_db, delta, phi);
    try {
      const auto t0 = std::chrono::steady_clock::now();
      const RVec w = method.solve(users, snr_db);
      const auto t1 = std::chrono::steady_clock::now();
      time_sum +=
          std::chrono::duration<double, std::micro>(t1 - t0).count();
      power_sum += w.squaredNorm();
      ++solved;
      double worst = -std::numeric_limits<double>::infinity();
      double w_g1 = worst, w_g2 = worst;
      for (const auto& inst : users) {
        const auto [g1, g2] = constraint_margins(inst, w);
        worst = std::max(worst, std::max(g1, g2));
        w_g1 = std::max(w_g1, g1);
        w_g2 = std::max(w_g2, g2);
      }
      row.g1_max = std::max(row.g1_max, w_g1);
      row.g2_max = std::max(row.g2_max, w_g2);
      if (worst <= kFeasibilityMarginTol) ++feasible;
    } catch (const InfeasibleError&) {
      ++row.failures;
    }
  }
  row.mean_power = solved ? power_sum / solved : 0.0;
  row.feasibility_rate =
      samples ? static_cast<double>(feasible) / samples : 0.0;
  row.mean_time_us = solved ? time_sum / solved : 0.0;
  return row;
}

inline std::vector<ResultRow> sweep_power_vs_sinr(
    const SweepSpec& spec, const ChannelSet& data,
    const std::vector<eval_detail::MethodRunner>& methods) {
  std::vector<ResultRow> rows;
  for (const auto& m : methods)
    for (double snr : spec.snr_points)
      rows.push_back(run_cell(m, data, spec.samples, snr, spec.delta_sq,
                              spec.phi, spec.seed));
  return rows;
}

inline std::vector<ResultRow> sweep_power_vs_errorbound(
    const SweepSpec& spec, const ChannelSet& data,
    const std::vector<eval_detail::MethodRunner>& methods) {
  std::vector<ResultRow> rows;
  for (const auto& m : methods)
    for (double d2 : spec.error_bounds)
      rows.push_back(run_cell(m, data, spec.samples, spec.snr_db_fixed, d2,
                              spec.phi, spec.seed));
  return rows;
}

struct TimingRow {
  std::string method;
  double median_us = 0.0;
  double mean_us = 0.0;
  int samples = 0;
};

// Per-sample inference latency; >= 10 warmup runs, then one timed pass.
inline TimingRow benchmark_inference(const std::string& name,
                                     const InferenceEngine& engine,
                                     const ChannelSet& data, int samples,
                                     double snr_db, double delta_sq,
                                     double phi, std::uint64_t seed) {
  const double delta = std::sqrt(delta_sq);
  std::vector<std::vector<CiInstance>> slots;
  for (int s = 0; s < samples; ++s) {
    const CMat& h = data.samples[s % data.samples.size()];
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(s)));
    const SymbolFrame frame =
        random_qpsk_frame(static_cast<int>(h.rows()), rng);
    slots.push_back(build_slot_instances(h, frame, snr_db, delta, phi));
  }
  for (int i = 0; i < 10; ++i)
    (void)engine.run(slots[i % slots.size()], snr_db);
  std::vector<double> times(slots.size());
  double sum = 0.0;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)engine.run(slots[s], snr_db);
    const auto t1 = std::chrono::steady_clock::now();
    times[s] = std::chrono::duration<double, std::micro>(t1 - t0).count();
    sum += times[s];
  }
  std::sort(times.begin(), times.end());
  TimingRow row;
  row.method = name;
  row.samples = static_cast<int>(slots.size());
  row.median_us = times[times.size() / 2];
  row.mean_us = sum / static_cast<double>(times.size());
  return row;
}

// ---------------------------------------------------------------------------
// CSV / plot-data emission
// ---------------------------------------------------------------------------

inline void write_result_csv(const std::string& path,
                             const std::vector<ResultRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "method,snr_db,delta_sq,mean_power,feasibility_rate,mean_time_us,"
       "sample_count,failures,g1_max,g2_max\n";
  f.precision(12);
  for (const auto& r : rows)
    f << r.method << ',' << r.snr_db << ',' << r.delta_sq << ','
      << r.mean_power << ',' << r.feasibility_rate << ',' << r.mean_time_us
      << ',' << r.sample_count << ',' << r.failures << ',' << r.g1_max << ','
      << r.g2_max << '\n';
}

inline void write_timing_csv(const std::string& path,
                             const std::vector<TimingRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "method,median_us,mean_us,samples\n";
  f.precision(12);
  for (const auto& r : rows)
    f << r.method << ',' << r.median_us << ',' << r.mean_us << ','
      << r.samples << '\n';
}

inline void write_memory_csv(const std::string& path,
                             const std::vector<std::pair<std::string,
                                                         MemoryReport>>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "model,fp_params,binary_params,bits_per_quant,megabytes,"
       "ratio_vs_fp32\n";
  f.precision(12);
  for (const auto& [name, rep] : rows)
    f << name << ',' << rep.fp_params << ',' << rep.binary_params << ','
      << rep.bits_per_quant << ',' << rep.megabytes << ','
      << rep.ratio_vs_fp32 << '\n';
}

// Two-column plot data, one file per curve.
inline void write_curve_dat(const std::string& path,
                            const std::vector<std::pair<double, double>>& xy) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f.precision(12);
  for (const auto& [x, y] : xy) f << x << ' ' << y << '\n';
}

// ---------------------------------------------------------------------------
// Flat TOML subset: `key = value` lines with numbers, quoted strings,
// booleans and one-level arrays. Comments (#) and [section] headers are
// tolerated; sections do not namespace keys.
// ---------------------------------------------------------------------------

using TomlValue =
    std::variant<double, std::string, std::vector<double>,
                 std::vector<std::string>>;

namespace toml_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline TomlValue parse_scalar(const std::string& tok) {
  if (tok.size() >= 2 && tok.front() == '"' && tok.back() == '"')
    return tok.substr(1, tok.size() - 2);
  if (tok == "true") return 1.0;
  if (tok == "false") return 0.0;
  try {
    std::size_t pos = 0;
    const double v = std::stod(tok, &pos);
    if (pos == tok.size()) return v;
  } catch (...) {
  }
  throw std::runtime_error("TOML: cannot parse value '" + tok + "'");
}

}  // namespace toml_detail

inline std::map<std::string, TomlValue> parse_toml(std::istream& in) {
  std::map<std::string, TomlValue> out;
  std::string line;
  while (std::getline(in, line)) {
    line = toml_detail::trim(toml_detail::strip_comment(line));
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("TOML: expected key = value in '" + line + "'");
    const std::string key = toml_detail::trim(line.substr(0, eq));
    std::string val = toml_detail::trim(line.substr(eq + 1));
    if (val.empty()) throw std::runtime_error("TOML: empty value for " + key);
    if (val.front() == '[') {
      while (val.find(']') == std::string::npos) {
        std::string more;
        if (!std::getline(in, more))
          throw std::runtime_error("TOML: unterminated array for " + key);
        val += toml_detail::trim(toml_detail::strip_comment(more));
      }
      val = val.substr(1, val.find(']') - 1);
      std::vector<double> nums;
      std::vector<std::string> strs;
      std::string tok;
      std::stringstream ss(val);
      while (std::getline(ss, tok, ',')) {
        tok = toml_detail::trim(tok);
        if (tok.empty()) continue;
        const TomlValue v = toml_detail::parse_scalar(tok);
        if (std::holds_alternative<std::string>(v))
          strs.push_back(std::get<std::string>(v));
        else
          nums.push_back(std::get<double>(v));
      }
      if (!strs.empty())
        out[key] = strs;
      else
        out[key] = nums;
    } else {
      out[key] = toml_detail::parse_scalar(val);
    }
  }
  return out;
}

inline SweepSpec sweep_spec_from_toml(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  const auto kv = parse_toml(f);
  SweepSpec spec;
  auto num = [&](const char* k, double dflt) {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : std::get<double>(it->second);
  };
  auto str = [&](const char* k) -> std::optional<std::string> {
    auto it = kv.find(k);
    if (it == kv.end()) return std::nullopt;
    return std::get<std::string>(it->second);
  };
  if (auto it = kv.find("snr_points"); it != kv.end())
    spec.snr_points = std::get<std::vector<double>>(it->second);
  if (auto it = kv.find("error_bounds"); it != kv.end())
    spec.error_bounds = std::get<std::vector<double>>(it->second);
  if (auto it = kv.find("methods"); it != kv.end())
    spec.methods = std::get<std::vector<std::string>>(it->second);
  spec.samples = static_cast<int>(num("samples", spec.samples));
  spec.seed = static_cast<std::uint64_t>(num("seed", 1));
  spec.delta_sq = num("delta_sq", spec.delta_sq);
  spec.snr_db_fixed = num("snr_db_fixed", spec.snr_db_fixed);
  spec.phi = num("phi", spec.phi);
  if (auto s = str("data")) spec.data_path = *s;
  for (const char* m : {"fp32", "binary", "ternary"})
    if (auto s = str(("model_" + std::string(m)).c_str()))
      spec.model_paths["dnet_" + std::string(m)] = *s;
  if (spec.snr_points.empty() || spec.methods.empty() || spec.samples < 1)
    throw std::runtime_error("sweep spec: empty lists or bad sample count");
  return spec;
}

inline double spearman_rho(const std::vector<double>& x,
                           const std::vector<double>& y) {
  const std::size_t n = x.size();
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
      r[idx[i]] = static_cast<double>(i);
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  return 1.0 - 6.0 * d2 / (static_cast<double>(n) * (n * n - 1.0));
}

}  // namespace slp
