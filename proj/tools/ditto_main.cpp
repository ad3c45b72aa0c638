#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ditto/config.hpp"
#include "ditto/error.hpp"
#include "ditto/hwsim.hpp"
#include "ditto/metrics.hpp"
#include "ditto/quantized.hpp"
#include "ditto/refmodel.hpp"
#include "ditto/report_io.hpp"

namespace fs = std::filesystem;
using namespace ditto;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitInvariant = 4;

const char* kSchemas = R"(CSV schemas (every file starts with '# config_digest=<sha256>'):
  analyze   similarity.csv, range.csv, bitwidth.csv, bops.csv
            model,layer,step,metric,value
  simulate  run.csv
            variant,preset,step,layer,node,name,mode,macs_low,macs_full,slots,
            compute_cycles,enc_cycles,vpu_cycles,stall_cycles,defo_cycles,
            total_cycles,traffic_weights,traffic_cur_in,traffic_prev_in,
            traffic_prev_out,traffic_out,traffic_total,bops,energy
  compare   compare.csv
            preset,variant,cycles,cycles_norm,energy_norm,traffic_norm,bops_norm
Exit codes: 0 success, 2 usage, 3 I/O, 4 invariant violation.
Seed precedence: --seed, then the config file, then DITTO_SEED, then 3.)";

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::Io:
    case ErrorCode::Format:
    case ErrorCode::Overflow: return kExitIo;
    case ErrorCode::InvariantViolation:
    case ErrorCode::ContextChanged: return kExitInvariant;
    default: return kExitUsage;
  }
}

struct Common {
  std::string config_path;
  std::string out_dir;
};

struct Loaded {
  ExperimentConfig cfg;
  bool seed_in_file = false;
};

Loaded load(const Common& c) {
  Loaded l;
  if (c.config_path.empty()) return l;
  const auto bytes = read_file(c.config_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, c.config_path + ": " + e.what());
  }
  apply_config_json(l.cfg, j);
  l.seed_in_file = j.contains("seed") || (j.contains("sampler") && j["sampler"].contains("seed"));
  return l;
}

// Merged config, written next to the outputs; returns its digest.
std::string write_config(const fs::path& dir, nlohmann::json merged) {
  const std::string digest = config_digest(merged);
  merged["config_digest"] = digest;
  write_file_atomic(dir / "config.json", merged.dump(2) + "\n");
  return digest;
}

fs::path prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + dir + ": " + ec.message());
  return dir;
}

struct LoadedTrace {
  QuantizedTrace qt;
  std::string sha256;
};

LoadedTrace load_trace(const std::string& path, int calibration_step) {
  const auto bytes = read_file(path);
  return {QuantizedTrace(deserialize_trace(bytes), calibration_step), sha256_hex(bytes)};
}

nlohmann::json trace_json(const std::string& path, const std::string& sha) {
  return {{"path", path}, {"sha256", sha}};
}

std::string model_label(const std::string& path) { return fs::path(path).stem().string(); }

int cmd_gen_trace(const Common& c, const std::string& model, std::optional<int> steps,
                  std::optional<std::uint64_t> seed, std::optional<double> bound,
                  std::optional<int> collapse, const std::string& out) {
  Loaded l = load(c);
  ExperimentConfig& cfg = l.cfg;
  if (!model.empty()) {
    const auto k = model_kind_from_string(model);
    if (!k) throw Error(ErrorCode::InvalidArgument, "unknown model '" + model + "'");
    if (*k != cfg.model.kind) cfg.model = *k == ModelKind::ToyDit ? ModelSpec::toy_dit() : ModelSpec::toy_unet();
  }
  if (steps) cfg.sampler.steps = *steps;
  if (seed) cfg.sampler.seed = *seed;
  else if (!l.seed_in_file)
    if (auto s = env_seed()) cfg.sampler.seed = *s;
  if (bound) cfg.sampler.similarity_bound = *bound;
  if (collapse) cfg.sampler.collapse_step = *collapse;
  cfg.sync_alphas();
  cfg.validate();

  const Trace trace = run_sampler(build_model(cfg.model), cfg.sampler);
  const auto bytes = serialize_trace(trace);
  const fs::path out_path(out);
  if (out_path.has_parent_path()) prepare_dir(out_path.parent_path().string());
  write_file_atomic(out_path, bytes);
  nlohmann::json merged = config_to_json(cfg);
  merged["command"] = "gen-trace";
  const std::string digest = config_digest(merged);
  merged["config_digest"] = digest;
  merged["trace_sha256"] = sha256_hex(bytes);
  write_file_atomic(fs::path(out + ".config.json"), merged.dump(2) + "\n");
  std::cout << "trace " << out << " sha256 " << sha256_hex(bytes) << "\n";
  std::cout << "config_digest " << digest << "\n";
  return 0;
}

int cmd_analyze(const Common& c, const std::string& trace_path) {
  Loaded l = load(c);
  if (!c.out_dir.empty()) l.cfg.output_dir = c.out_dir;
  const LoadedTrace lt = load_trace(trace_path, l.cfg.quant.calibration_step);
  const fs::path dir = prepare_dir(l.cfg.output_dir);
  nlohmann::json merged = config_to_json(l.cfg);
  merged["command"] = "analyze";
  merged["trace"] = trace_json(trace_path, lt.sha256);
  const std::string digest = write_config(dir, merged);

  const MotivationReport r = analyze_trace(lt.qt, model_label(trace_path));
  write_file_atomic(dir / "similarity.csv", r.similarity_csv(digest));
  write_file_atomic(dir / "range.csv", r.range_csv(digest));
  write_file_atomic(dir / "bitwidth.csv", r.histogram_csv(digest));
  write_file_atomic(dir / "bops.csv", r.bops_csv(digest));
  nlohmann::json summary = r.summary();
  summary["config_digest"] = digest;
  write_file_atomic(dir / "analysis.json", summary.dump(2) + "\n");

  const auto& sim = r.similarity;
  std::printf("temporal cosine %.6f  spatial row %.6f\n", sim.temporal.mean().value_or(0.0),
              sim.spatial_row.mean().value_or(0.0));
  std::printf("zero fraction: activations %.4f  temporal %.4f  spatial %.4f\n",
              r.histogram.activations.fraction(0), r.histogram.temporal.fraction(0),
              r.histogram.spatial.fraction(0));
  std::printf("relative BOPs: spatial %.4f  temporal %.4f\n", r.bops.spatial_ratio(),
              r.bops.temporal_ratio());
  return 0;
}

// Runs the plan through the quantized executor and compares every node
// output with an all-Direct execution, on top of the per-layer checks.
ExactnessReport self_check(const QuantizedTrace& qt, const ExecPlan& plan) {
  ExactnessReport rep = verify_exactness(qt);
  ExecPlan direct = plan;
  for (auto& s : direct.steps) std::fill(s.begin(), s.end(), ExecMode::Direct);
  const auto a = execute_quantized(qt, plan);
  const auto b = execute_quantized(qt, direct);
  for (std::size_t s = 0; s < a.size(); ++s)
    for (std::size_t n = 0; n < a[s].size(); ++n) {
      ++rep.checks;
      if (a[s][n] == b[s][n]) continue;
      ++rep.mismatches;
      if (rep.failures.size() < 16)
        rep.failures.push_back(qt.graph().node(n).name + " step " + std::to_string(s + 1) +
                               " planned execution");
    }
  return rep;
}

int cmd_simulate(const Common& c, const std::string& trace_path, const std::string& variant,
                 const std::string& preset, const std::string& hw_path,
                 std::optional<std::uint64_t> lane_divisor) {
  Loaded l = load(c);
  ExperimentConfig& cfg = l.cfg;
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  if (!variant.empty()) {
    const auto v = variant_from_string(variant);
    if (!v) throw Error(ErrorCode::InvalidArgument, "unknown variant '" + variant + "'");
    cfg.variant = *v;
  }
  if (!preset.empty()) {
    const auto p = preset_from_string(preset);
    if (!p) throw Error(ErrorCode::InvalidArgument, "unknown preset '" + preset + "'");
    cfg.preset = *p;
  }
  if (!hw_path.empty()) {
    const auto bytes = read_file(hw_path);
    nlohmann::json hw;
    try {
      hw = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, hw_path + ": " + e.what());
    }
    if (preset.empty()) cfg.preset.reset();
    cfg.hardware = hw;
  }
  if (lane_divisor) cfg.lane_divisor = *lane_divisor;
  const HwConfig hw = cfg.hw_config();
  if (!supports(hw, cfg.variant))
    throw Error(ErrorCode::Incompatible, "hardware '" + hw.name + "' cannot run variant '" +
                                             to_string(cfg.variant) + "'");

  const LoadedTrace lt = load_trace(trace_path, cfg.quant.calibration_step);
  const fs::path dir = prepare_dir(cfg.output_dir);
  nlohmann::json merged = config_to_json(cfg);
  merged["command"] = "simulate";
  merged["trace"] = trace_json(trace_path, lt.sha256);
  const std::string digest = write_config(dir, merged);

  const Workload w(lt.qt);
  const RunReport rep = run_sim(w, cfg.variant, hw);
  const ExactnessReport ex = self_check(lt.qt, rep.plan);

  write_file_atomic(dir / "run.csv", rep.to_csv(w.graph(), digest));
  nlohmann::json j = rep.summary(w.graph());
  j["config_digest"] = digest;
  j["equivalence"] = ex.to_json();
  j["plan"] = exec_plan_to_json(w.graph(), rep.plan);
  j["graph"] = graph_to_json(w.graph());
  AnalysisOptions steady;
  steady.modes = rep.plan.node_modes(w.step_count(), w.graph().size());
  steady.bypass = uses_bypass(cfg.variant);
  j["materialization"] = materialization_to_json(w.graph(), analyze_graph(w.graph(), steady));
  if (cfg.variant == Variant::Ideal || cfg.variant == Variant::IdealPlus) j["oracle_plan"] = j["plan"];
  write_file_atomic(dir / "run.json", j.dump(2) + "\n");

  std::printf("%s on %s: %llu cycles, energy %.6g, traffic %llu bytes\n", rep.variant.c_str(),
              hw.name.c_str(), static_cast<unsigned long long>(rep.totals.cycles), rep.totals.energy,
              static_cast<unsigned long long>(rep.totals.traffic.total()));
  std::printf("verdict %s (%llu checks)\n", ex.exact() ? "exact" : "mismatch",
              static_cast<unsigned long long>(ex.checks));
  if (!ex.exact()) {
    for (const auto& f : ex.failures) std::fprintf(stderr, "mismatch: %s\n", f.c_str());
    return kExitInvariant;
  }
  return 0;
}

int cmd_compare(const Common& c, const std::string& trace_path, const std::string& hw_path,
                std::optional<std::uint64_t> lane_divisor) {
  Loaded l = load(c);
  ExperimentConfig& cfg = l.cfg;
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  if (lane_divisor) cfg.lane_divisor = *lane_divisor;
  if (!hw_path.empty()) {
    const auto bytes = read_file(hw_path);
    try {
      cfg.hardware = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, hw_path + ": " + e.what());
    }
  }
  for (Preset p : kAllPresets) hw_config_from_json(cfg.hardware, preset_config(p, cfg.lane_divisor));

  const LoadedTrace lt = load_trace(trace_path, cfg.quant.calibration_step);
  const fs::path dir = prepare_dir(cfg.output_dir);
  nlohmann::json merged = config_to_json(cfg);
  merged["command"] = "compare";
  merged["trace"] = trace_json(trace_path, lt.sha256);
  const std::string digest = write_config(dir, merged);

  const Workload w(lt.qt);
  const CompareResult r = compare_presets(w, cfg.lane_divisor, cfg.hardware);
  write_file_atomic(dir / "compare.csv", r.to_csv(digest));
  nlohmann::json j = r.to_json();
  j["config_digest"] = digest;
  write_file_atomic(dir / "compare.json", j.dump(2) + "\n");

  for (const auto& row : j["rows"])
    std::printf("%-12s %-14s cycles %10llu  speedup %.4f  energy %.4f\n",
                row["preset"].get<std::string>().c_str(), row["variant"].get<std::string>().c_str(),
                static_cast<unsigned long long>(row["cycles"].get<std::uint64_t>()),
                row.value("speedup", 0.0), row.value("energy_norm", 0.0));
  std::printf("defo accuracy %llu/%llu (%.4f)\n",
              static_cast<unsigned long long>(r.defo_accuracy.matches),
              static_cast<unsigned long long>(r.defo_accuracy.total), r.defo_accuracy.fraction());
  std::printf("defo+ accuracy %llu/%llu (%.4f)\n",
              static_cast<unsigned long long>(r.defo_plus_accuracy.matches),
              static_cast<unsigned long long>(r.defo_plus_accuracy.total),
              r.defo_plus_accuracy.fraction());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal-difference diffusion accelerator simulator"};
  app.require_subcommand(1);
  app.footer(kSchemas);

  Common common;
  auto add_common = [&](CLI::App* sub, bool out_dir) {
    sub->add_option("--config", common.config_path, "JSON experiment config; flags override it");
    if (out_dir) sub->add_option("--out-dir", common.out_dir, "Output directory (default: out)");
  };

  std::string model, out, trace_path, variant, preset, hw_path;
  std::optional<int> steps, collapse;
  std::optional<std::uint64_t> seed, lane_divisor;
  std::optional<double> bound;

  auto* gen = app.add_subcommand("gen-trace", "Run the sampler and write a trace file");
  add_common(gen, false);
  gen->add_option("--model", model, "toy-unet (default) or toy-dit");
  gen->add_option("--steps", steps, "Denoising steps T >= 2 (default 20)");
  gen->add_option("--seed", seed, "Sampler seed (default: DITTO_SEED, else 3)");
  gen->add_option("--similarity-bound", bound, "Max relative step change, 0 disables (default 0.05)");
  gen->add_option("--collapse-step", collapse, "Redraw x as noise from this step (default 0: never)");
  gen->add_option("--out", out, "Trace file")->required();

  auto* analyze = app.add_subcommand("analyze", "Similarity, range, bit-width and BOPs reports");
  add_common(analyze, true);
  analyze->add_option("--trace", trace_path, "Trace file")->required();

  auto* simulate = app.add_subcommand("simulate", "Simulate one variant on one hardware config");
  add_common(simulate, true);
  simulate->add_option("--trace", trace_path, "Trace file")->required();
  simulate->add_option("--variant", variant,
                       "direct, all-temporal, all-temporal-no-bypass, all-spatial, ditto (default), "
                       "ditto-plus, dynamic-ditto, ideal, ideal-plus, cambricon-d");
  auto* preset_opt =
      simulate->add_option("--preset", preset, "itc, diffy, cambricon-d, ditto (default), ditto-plus");
  simulate->add_option("--hw-config", hw_path, "JSON hardware keys applied over the preset")
      ->excludes(preset_opt);
  simulate->add_option("--lane-divisor", lane_divisor, "Divide preset lane counts (default 64)");

  auto* compare = app.add_subcommand("compare", "Run every preset with its matching variant");
  add_common(compare, true);
  compare->add_option("--trace", trace_path, "Trace file")->required();
  compare->add_option("--hw-config", hw_path, "JSON hardware keys applied over every preset");
  compare->add_option("--lane-divisor", lane_divisor, "Divide preset lane counts (default 64)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_trace(common, model, steps, seed, bound, collapse, out);
    if (*analyze) return cmd_analyze(common, trace_path);
    if (*simulate) return cmd_simulate(common, trace_path, variant, preset, hw_path, lane_divisor);
    if (*compare) return cmd_compare(common, trace_path, hw_path, lane_divisor);
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", to_string(e.code()), e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
