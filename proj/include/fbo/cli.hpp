#pragma once

// Subcommands behind the `fbo` tool. Exit codes: 0 success, 1 runtime failure
// or divergence (or a failed gradient check), 2 validation error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fbo/config.hpp"
#include "fbo/oracle.hpp"
#include "fbo/runner.hpp"

namespace fbo::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;

inline constexpr const char* kWorkersEnv = "FBO_MAX_WORKERS";

struct CliInvocation {
  std::string subcommand;
  std::filesystem::path config_path;
  std::filesystem::path out_dir = "out";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  unsigned workers = 1;
};

/// Worker cap from FBO_MAX_WORKERS, defaulting to the hardware concurrency.
inline unsigned workers_from_env() {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const char* env = std::getenv(kWorkersEnv);
  if (!env || !*env) return hw;
  try {
    const auto v = detail::parse_u64(env, kWorkersEnv);
    return v == 0 ? 1u : static_cast<unsigned>(std::min<std::uint64_t>(v, 1024));
  } catch (const ValidationError&) {
    return hw;
  }
}

// ---------------------------------------------------------------------------
// check-gradients

struct CheckResult {
  std::string name;
  double value = 0.0;  // worst error over all probe points
  double tolerance = 0.0;
  bool pass = false;
};

struct CheckReport {
  std::vector<CheckResult> checks;
  bool all_pass() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
  }
};

inline constexpr double kFdTolerance = 1e-6;
inline constexpr double kSurrogateTolerance = 1e-10;
inline constexpr double kResidualTolerance = 1e-10;

/// Oracle self-consistency at x0 and three seeded random points, under both
/// the original weights and the reweighted ones.
inline CheckReport check_gradients(const BilevelInstance& inst, const RunConfig& cfg) {
  std::vector<Vec> points;
  points.push_back(fbo::detail::initial_vector(cfg.x0, inst.d_x, "x0"));
  RngStream rng = rng_stream(cfg.seed, 0, kServerStream, Purpose::kInstance, 7);
  for (int k = 0; k < 3; ++k) points.push_back(fbo::detail::random_uniform_vec(inst.d_x, 2.0, rng));

  std::vector<oracle::WeightVector> weights{oracle::WeightVector(inst.p)};
  try {
    weights.push_back(expected_reweighting(inst.p, cfg.tau, cfg.coef));
  } catch (const ValidationError&) {
    // τ profile not applicable to this instance; check the original weights only.
  }

  CheckResult fd{"hypergrad_vs_finite_diff", 0.0, kFdTolerance, true};
  CheckResult sur{"surrogate_vs_exact", 0.0, kSurrogateTolerance, true};
  CheckResult ys{"ystar_stationarity", 0.0, kResidualTolerance, true};
  CheckResult vs{"vstar_ls_residual", 0.0, kResidualTolerance, true};
  auto record = [](CheckResult& c, double err) {
    if (!(err <= c.tolerance)) c.pass = false;
    if (std::isnan(err) || std::isnan(c.value)) c.value = std::numeric_limits<double>::quiet_NaN();
    else c.value = std::max(c.value, err);
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();

  for (const auto& w : weights) {
    for (const auto& x : points) {
      try {
        const auto sol = oracle::solve_at(inst, w, x);
        record(fd, relative_error(sol.hypergrad, oracle::finite_diff_hypergrad(inst, w, x)));
        record(sur, relative_error(oracle::surrogate_hypergrad(inst, w, x, sol.ystar, sol.vstar), sol.hypergrad));
        double scale_y = 0.0, scale_v = 0.0;
        for (std::size_t i = 0; i < inst.n(); ++i) {
          const auto& c = inst.clients[i];
          scale_y += w[i] * (c.A * sol.ystar).norm() + w[i] * (c.B.transpose() * x + c.c).norm();
          scale_v += w[i] * (c.A * sol.vstar).norm() + w[i] * (c.D * (sol.ystar - c.y_ref)).norm();
        }
        record(ys, oracle::lower_level_residual(inst, w, x, sol.ystar).norm() / std::max(1.0, scale_y));
        record(vs, oracle::linear_system_residual(inst, w, x, sol.ystar, sol.vstar).norm() / std::max(1.0, scale_v));
      } catch (const SingularSystemError&) {
        for (auto* c : {&fd, &sur, &ys, &vs}) record(*c, nan);
      }
    }
  }
  return {{fd, sur, ys, vs}};
}

inline int cmd_check_gradients(const BilevelInstance& inst, const RunConfig& cfg, std::ostream& out) {
  const CheckReport rep = check_gradients(inst, cfg);
  for (const auto& c : rep.checks) {
    out << (c.pass ? "PASS " : "FAIL ") << c.name << " error=" << format_double(c.value)
        << " tolerance=" << format_double(c.tolerance) << '\n';
  }
  return rep.all_pass() ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// run / sweep

inline nlohmann::json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline nlohmann::json report_json(const RunReport& rep) {
  nlohmann::json j;
  j["status"] = "ok";
  j["rounds"] = rep.final_state.t;
  j["total_samples"] = rep.total_samples;
  j["min_grad_phi_sq"] = rep.min_grad_phi_sq;
  j["min_grad_phitilde_sq"] = rep.min_grad_phitilde_sq;
  j["final"] = {{"x", vec_json(rep.final_state.x)}, {"y", vec_json(rep.final_state.y)}, {"v", vec_json(rep.final_state.v)}};
  j["projection_radius"] = rep.final_state.r;
  j["local_v_bound"] = rep.local_v_bound;
  j["projection_violations"] = rep.projection_violations;
  j["local_v_violations"] = rep.local_v_violations;
  j["projection_hits"] = rep.projection_hits;
  j["smoothness"] = {{"mu_g", rep.bounds.mu_g}, {"L1", rep.bounds.L1}, {"Lf_cap", rep.bounds.Lf_cap}};
  j["w_tilde"] = vec_json(rep.w_tilde.w);
  j["w_tilde_basis"] = "expected ||a_i||_1 per client under the configured tau profile";
  j["wall_seconds"] = rep.wall_seconds;
  return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  os << j.dump(2) << '\n';
}

inline int cmd_run(const CliInvocation& inv, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const BilevelInstance inst = resolve_instance(cfg);
  std::filesystem::create_directories(inv.out_dir);
  const auto final_csv = inv.out_dir / "metrics.csv";
  const auto partial_csv = inv.out_dir / "metrics.csv.partial";
  std::filesystem::remove(final_csv);

  nlohmann::json summary;
  summary["config"] = to_config_text(cfg);
  std::ofstream csv(partial_csv);
  if (!csv) throw std::runtime_error("cannot write " + partial_csv.string());
  csv << kMetricsHeader << '\n';
  RunOptions opts{inv.workers, [&](const MetricsRow& r) { write_metrics_row(csv, r); }, {}};
  try {
    const RunReport rep = run(cfg, inst, opts);
    csv.close();
    std::filesystem::rename(partial_csv, final_csv);
    summary.update(report_json(rep));
    write_json(inv.out_dir / "summary.json", summary);
    if (!inv.quiet) {
      out << "rounds=" << rep.final_state.t << " min_grad_phi_sq=" << format_double(rep.min_grad_phi_sq)
          << " min_grad_phitilde_sq=" << format_double(rep.min_grad_phitilde_sq) << " metrics=" << final_csv.string() << '\n';
    }
    return kExitOk;
  } catch (const DivergenceError& e) {
    csv.close();
    summary["status"] = "diverged";
    summary["divergence_round"] = e.round();
    summary["message"] = e.what();
    write_json(inv.out_dir / "summary.json", summary);
    err << "diverged at round " << e.round() << ": " << e.what() << '\n';
    return kExitRuntime;
  }
}

inline std::string sweep_cell_name(const std::string& param, double value, std::uint64_t seed) {
  return "sweep_" + param + "=" + format_double(value) + "_seed=" + std::to_string(seed) + ".csv";
}

inline int cmd_sweep(const CliInvocation& inv, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.sweep_param.empty()) throw ValidationError("sweep_param: required for sweep");
  if (cfg.sweep_values.empty()) throw ValidationError("sweep_values: required for sweep");
  const std::vector<std::uint64_t> seeds = cfg.sweep_seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.sweep_seeds;
  for (double v : cfg.sweep_values) validate_config(apply_sweep_value(cfg, cfg.sweep_param, v));
  const BilevelInstance inst = resolve_instance(cfg);
  std::filesystem::create_directories(inv.out_dir);

  const SweepTable table = sweep(cfg, inst, cfg.sweep_param, cfg.sweep_values, seeds, RunOptions{inv.workers, {}, {}});
  bool failed = false;
  nlohmann::json summary;
  summary["config"] = to_config_text(cfg);
  summary["parameter"] = table.parameter;
  for (const auto& cell : table.cells) {
    nlohmann::json jc;
    jc["value"] = cell.value;
    jc["min_grad_phi_sq"] = {{"q1", cell.min_grad_phi_sq.q1}, {"median", cell.min_grad_phi_sq.median}, {"q3", cell.min_grad_phi_sq.q3}};
    jc["min_grad_phitilde_sq"] = {
        {"q1", cell.min_grad_phitilde_sq.q1}, {"median", cell.min_grad_phitilde_sq.median}, {"q3", cell.min_grad_phitilde_sq.q3}};
    for (std::size_t k = 0; k < cell.seeds.size(); ++k) {
      nlohmann::json jr;
      jr["seed"] = cell.seeds[k];
      if (cell.reports[k]) {
        const auto name = sweep_cell_name(table.parameter, cell.value, cell.seeds[k]);
        std::ofstream os(inv.out_dir / name);
        write_metrics_csv(os, cell.reports[k]->metrics);
        jr["metrics"] = name;
        jr["min_grad_phi_sq"] = cell.reports[k]->min_grad_phi_sq;
        jr["min_grad_phitilde_sq"] = cell.reports[k]->min_grad_phitilde_sq;
      } else {
        failed = true;
        jr["error"] = cell.errors[k];
        err << "sweep cell " << table.parameter << "=" << format_double(cell.value) << " seed " << cell.seeds[k]
            << " failed: " << cell.errors[k] << '\n';
      }
      jc["runs"].push_back(jr);
    }
    summary["cells"].push_back(jc);
  }
  {
    std::ofstream os(inv.out_dir / "sweep.csv");
    write_sweep_table(os, table);
  }
  write_json(inv.out_dir / "sweep_summary.json", summary);
  if (!inv.quiet) write_sweep_table(out, table);
  return failed ? kExitRuntime : kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv into an invocation and a validated config. Throws
/// ValidationError for bad configs; CLI syntax errors are CLI::ParseError.
inline std::pair<CliInvocation, RunConfig> parse_and_validate(int argc, const char* const* argv) {
  CLI::App app{"Federated bilevel optimization lab (SimFBO / ShroFBO)", "fbo"};
  app.require_subcommand(1);
  CliInvocation inv;
  std::uint64_t seed = 0;
  std::string out_dir;
  for (const char* name : {"run", "check-gradients", "sweep", "print-config"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", inv.config_path, "Run config (key = value)")->required();
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--seed", seed, "Override the run seed");
    sub->add_flag("--quiet", inv.quiet, "Suppress progress output");
  }
  app.parse(argc, argv);
  inv.subcommand = app.get_subcommands().front()->get_name();
  const auto* sub = app.get_subcommands().front();
  if (sub->count("--seed")) inv.seed = seed;

  RunConfig cfg = load_config(inv.config_path);
  if (inv.seed) cfg.seed = *inv.seed;
  if (!out_dir.empty()) inv.out_dir = out_dir;
  else if (!cfg.output_dir.empty()) inv.out_dir = cfg.output_dir;
  inv.workers = workers_from_env();
  return {inv, cfg};
}

inline int main_entry(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    auto [inv, cfg] = parse_and_validate(argc, argv);
    if (inv.subcommand == "print-config") {
      out << to_config_text(cfg);
      return kExitOk;
    }
    if (inv.subcommand == "check-gradients") return cmd_check_gradients(resolve_instance(cfg), cfg, out);
    if (inv.subcommand == "sweep") return cmd_sweep(inv, cfg, out, err);
    return cmd_run(inv, cfg, out, err);
  } catch (const CLI::CallForHelp&) {
    out << "usage: fbo {run,check-gradients,sweep,print-config} --config <path> [--out <dir>] [--seed <u64>] [--quiet]\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const DivergenceError& e) {
    err << "diverged at round " << e.round() << ": " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace fbo::cli
