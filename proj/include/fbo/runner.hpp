#pragma once

// Drives T communication rounds and scores every logged round against the
// exact oracle under both the original weights p and the reweighted w.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "fbo/common.hpp"
#include "fbo/fedcore.hpp"
#include "fbo/instance_io.hpp"
#include "fbo/oracle.hpp"
#include "fbo/problem.hpp"
#include "fbo/sampling.hpp"

namespace fbo {

enum class Algorithm { kSimFBO, kShroFBO };

struct InstanceSource {
  enum class Kind { kSynthetic, kCanonical1d, kFile };

  Kind kind = Kind::kSynthetic;
  InstanceSpec spec;
  std::uint64_t seed = 0;
  std::string file;

  bool operator==(const InstanceSource&) const = default;
};

struct RunConfig {
  Algorithm algorithm = Algorithm::kSimFBO;
  InstanceSource instance;
  std::size_t P = 1;
  std::size_t T = 1;
  TauProfile tau = TauProfile::fixed(1);
  CoefficientSchedule coef;
  StepSizes steps;
  NoiseModel noise;
  double Lf_cap = 0.0;  // 0 selects the default cap
  std::uint64_t seed = 0;
  std::string output_dir;
  std::size_t metrics_every = 1;
  std::vector<double> x0;  // empty means zeros
  std::vector<double> y0;

  std::string sweep_param;  // P, T, sigma or tau
  std::vector<double> sweep_values;
  std::vector<std::uint64_t> sweep_seeds;

  bool operator==(const RunConfig&) const = default;
};

struct MetricsRow {
  std::size_t t = 0;
  std::size_t samples = 0;
  double grad_phi_sq = 0.0;       // ‖∇Φ(x)‖², weights p
  double grad_phitilde_sq = 0.0;  // ‖∇Φ̃(x)‖², weights w
  double y_gap = 0.0;             // ‖y − ỹ*(x)‖²
  double v_gap = 0.0;             // ‖v − ṽ*(x)‖²
  double phi = 0.0;               // Φ(x)
  double max_local_v_norm = 0.0;  // over the round that produced this state
  double client_drift_v = 0.0;    // mean over participants

  std::size_t rounds() const { return t; }
};

inline constexpr const char* kMetricsHeader =
    "t,samples,grad_phi_sq,grad_phitilde_sq,y_gap,v_gap,phi,max_local_v_norm,client_drift_v";

struct RunReport {
  FedState final_state;
  std::vector<MetricsRow> metrics;
  double min_grad_phi_sq = 0.0;
  double min_grad_phitilde_sq = 0.0;
  std::vector<double> running_min_grad_phi_sq;
  std::vector<double> running_min_grad_phitilde_sq;
  double wall_seconds = 0.0;

  SmoothnessConstants bounds;
  oracle::WeightVector w_tilde;   // weights of the reweighted objective
  double local_v_bound = 0.0;     // (1 + α_max/α_min)·r
  std::size_t projection_violations = 0;
  std::size_t projection_hits = 0;  // rounds ending with v on the ball boundary
  std::size_t local_v_violations = 0;
  std::size_t total_samples = 0;
};

struct RunOptions {
  unsigned workers = 1;
  std::function<void(const MetricsRow&)> on_row;  // streamed as rows are produced
  std::function<void(const FedState&)> on_state;  // initial state, then after every server step
};

inline void validate_config(const RunConfig& cfg) {
  const auto& src = cfg.instance;
  if (src.kind == InstanceSource::Kind::kSynthetic) {
    const auto& s = src.spec;
    if (s.n < 1) throw ValidationError("n: must be >= 1");
    if (s.d_x < 1) throw ValidationError("d_x: must be >= 1");
    if (s.d_y < 1) throw ValidationError("d_y: must be >= 1");
    if (!(s.mu_g_target > 0.0)) throw ValidationError("mu_g: must be > 0");
    if (!(s.mu_g_target <= s.L1_target)) throw ValidationError("mu_g: must be <= L1");
    if (!(s.heterogeneity >= 0.0 && s.heterogeneity <= 1.0)) throw ValidationError("heterogeneity: must lie in [0,1]");
  }
  if (src.kind == InstanceSource::Kind::kFile && src.file.empty()) throw ValidationError("instance_file: required when instance = file");
  const std::size_t n = src.spec.n;
  if (cfg.P < 1) throw ValidationError("P: must be >= 1");
  if (src.kind != InstanceSource::Kind::kFile && cfg.P > n) {
    throw ValidationError("P: must be <= n (P=" + std::to_string(cfg.P) + ", n=" + std::to_string(n) + ")");
  }
  if (cfg.T < 1) throw ValidationError("T: must be >= 1");
  if (cfg.metrics_every < 1) throw ValidationError("metrics_every: must be >= 1");
  if (!(cfg.Lf_cap >= 0.0)) throw ValidationError("Lf_cap: must be > 0 (or auto)");
  if (src.kind != InstanceSource::Kind::kFile) cfg.tau.validate(n);
  cfg.coef.validate();
  cfg.steps.validate();
  cfg.noise.validate();
}

inline BilevelInstance resolve_instance(const RunConfig& cfg) {
  switch (cfg.instance.kind) {
    case InstanceSource::Kind::kCanonical1d:
      return canonical_1d_instance();
    case InstanceSource::Kind::kFile:
      return load_instance(cfg.instance.file);
    case InstanceSource::Kind::kSynthetic:
    default:
      return make_synthetic_instance(cfg.instance.spec, cfg.instance.seed);
  }
}

/// w_i ∝ p_i ‖a_i‖₁ with ‖a_i‖₁ taken from the τ profile; for random τ the
/// expected ‖a_i‖₁ over the uniform range is used.
inline oracle::WeightVector expected_reweighting(const Vec& p, const TauProfile& profile, const CoefficientSchedule& sched) {
  Vec a(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    switch (profile.kind) {
      case TauProfile::Kind::kFixed:
        a(i) = sched.norm1(profile.tau);
        break;
      case TauProfile::Kind::kPerClient:
        a(i) = sched.norm1(profile.per_client[static_cast<std::size_t>(i)]);
        break;
      case TauProfile::Kind::kUniform: {
        double s = 0.0;
        for (std::size_t t = profile.lo; t <= profile.hi; ++t) s += sched.norm1(t);
        a(i) = s / static_cast<double>(profile.hi - profile.lo + 1);
        break;
      }
    }
  }
  return reweighted_objective_weights(p, a).w;
}

/// γ_x = c·√(P/(τ̄T)); the heuristic used when only a scale is configured.
inline double default_gamma_x(double c, std::size_t P, double tau_bar, std::size_t T) {
  return c * std::sqrt(static_cast<double>(P) / (tau_bar * static_cast<double>(T)));
}

namespace detail {

inline Vec initial_vector(const std::vector<double>& values, std::size_t d, const char* name) {
  if (values.empty()) return Vec::Zero(static_cast<Eigen::Index>(d));
  if (values.size() != d) throw ValidationError(std::string(name) + ": expected " + std::to_string(d) + " entries");
  return Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(d));
}

inline MetricsRow score(const BilevelInstance& inst, const oracle::WeightVector& p, const oracle::WeightVector& w,
                        const FedState& s) {
  const auto orig = oracle::solve_at(inst, p, s.x);
  const auto tilde = oracle::solve_at(inst, w, s.x);
  MetricsRow row;
  row.t = s.t;
  row.grad_phi_sq = orig.hypergrad.squaredNorm();
  row.grad_phitilde_sq = tilde.hypergrad.squaredNorm();
  row.y_gap = (s.y - tilde.ystar).squaredNorm();
  row.v_gap = (s.v - tilde.vstar).squaredNorm();
  row.phi = orig.phi;
  return row;
}

// Runs `job(k)` for k in [0, count) on up to `workers` threads. The first
// failure by index is rethrown, so errors are schedule-independent too.
template <class Job>
void parallel_for(std::size_t count, unsigned workers, Job&& job) {
  const std::size_t threads = std::min<std::size_t>(std::max(1u, workers), count);
  std::vector<std::exception_ptr> errors(count);
  auto body = [&](std::size_t start) {
    for (std::size_t k = start; k < count; k += threads) {
      try {
        job(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    body(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(body, w);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

inline RunReport run(const RunConfig& cfg, const BilevelInstance& inst, const RunOptions& opts = {}) {
  const auto started = std::chrono::steady_clock::now();
  validate_config(cfg);
  validate_instance(inst);
  const std::size_t n = inst.n();
  if (cfg.P > n) throw ValidationError("P: must be <= n (P=" + std::to_string(cfg.P) + ", n=" + std::to_string(n) + ")");
  cfg.tau.validate(n);

  FedState state;
  state.x = detail::initial_vector(cfg.x0, inst.d_x, "x0");
  state.y = detail::initial_vector(cfg.y0, inst.d_y, "y0");
  state.v = Vec::Zero(static_cast<Eigen::Index>(inst.d_y));
  state.t = 0;

  RunReport rep;
  const double cap = cfg.Lf_cap > 0.0 ? cfg.Lf_cap : default_Lf_cap(inst, state.x, state.y);
  rep.bounds = compute_smoothness(inst, cap);
  state.r = rep.bounds.Lf_cap / rep.bounds.mu_g;
  rep.local_v_bound = (1.0 + cfg.coef.alpha_max / cfg.coef.alpha_min) * state.r;

  const oracle::WeightVector p_weights(inst.p);
  rep.w_tilde = expected_reweighting(inst.p, cfg.tau, cfg.coef);
  const NoiseContext ctx{cfg.noise, rep.bounds, cfg.seed};

  double run_min_phi = std::numeric_limits<double>::infinity();
  double run_min_tilde = std::numeric_limits<double>::infinity();
  auto emit = [&](MetricsRow row) {
    run_min_phi = std::min(run_min_phi, row.grad_phi_sq);
    run_min_tilde = std::min(run_min_tilde, row.grad_phitilde_sq);
    rep.running_min_grad_phi_sq.push_back(run_min_phi);
    rep.running_min_grad_phitilde_sq.push_back(run_min_tilde);
    if (opts.on_row) opts.on_row(row);
    rep.metrics.push_back(row);
  };

  emit(detail::score(inst, p_weights, rep.w_tilde, state));
  if (opts.on_state) opts.on_state(state);

  for (std::size_t t = 0; t < cfg.T; ++t) {
    const ParticipationPlan plan = plan_round(n, cfg.P, t, cfg.tau, cfg.seed);
    const StepSizes steps = cfg.steps.at_round(t);

    std::vector<ClientRoundResult> locals(plan.selected.size());
    try {
      detail::parallel_for(plan.selected.size(), opts.workers, [&](std::size_t k) {
        const std::size_t i = plan.selected[k];
        locals[k] = local_round(inst, i, state, plan.tau[i], cfg.coef, steps, ctx);
      });
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("round ") + std::to_string(t) + ": " + e.what(), static_cast<long>(t));
    }

    ClientResults results;
    ClientWeights p_tilde;
    double max_v = 0.0, drift = 0.0;
    for (std::size_t k = 0; k < plan.selected.size(); ++k) {
      const std::size_t i = plan.selected[k];
      max_v = std::max(max_v, locals[k].max_local_v_norm);
      drift += locals[k].drift_v;
      rep.total_samples += locals[k].samples_used;
      if (locals[k].max_local_v_norm > rep.local_v_bound * (1.0 + 1e-12)) ++rep.local_v_violations;
      p_tilde[i] = effective_participation_weight(inst.p(static_cast<Eigen::Index>(i)), cfg.P, n);
      results.emplace(i, std::move(locals[k]));
    }
    drift /= static_cast<double>(plan.selected.size());

    try {
      if (cfg.algorithm == Algorithm::kSimFBO) {
        state = server_step_simfbo(state, results, p_tilde, cfg.steps);
      } else {
        Vec a_norm1(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) a_norm1(static_cast<Eigen::Index>(i)) = cfg.coef.norm1(plan.tau[i]);
        const double rho = reweighted_objective_weights(inst.p, a_norm1).rho;
        state = server_step_shrofbo(state, results, p_tilde, rho, cfg.steps);
      }
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("round ") + std::to_string(t) + ": " + e.what(), static_cast<long>(t));
    }
    if (state.v.norm() > state.r * (1.0 + 1e-12)) ++rep.projection_violations;
    if (std::abs(state.v.norm() - state.r) <= 1e-9 * state.r) ++rep.projection_hits;
    if (opts.on_state) opts.on_state(state);

    if (state.t % cfg.metrics_every == 0 || state.t == cfg.T) {
      MetricsRow row = detail::score(inst, p_weights, rep.w_tilde, state);
      if (!std::isfinite(row.grad_phi_sq) || !std::isfinite(row.grad_phitilde_sq) || !std::isfinite(row.phi)) {
        throw DivergenceError("round " + std::to_string(t) + ": non-finite metrics", static_cast<long>(t));
      }
      row.samples = rep.total_samples;
      row.max_local_v_norm = max_v;
      row.client_drift_v = drift;
      emit(row);
    }
  }

  rep.final_state = state;
  rep.min_grad_phi_sq = run_min_phi;
  rep.min_grad_phitilde_sq = run_min_tilde;
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rep;
}

inline RunReport run(const RunConfig& cfg, const RunOptions& opts = {}) { return run(cfg, resolve_instance(cfg), opts); }

// ---------------------------------------------------------------------------
// Output

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.t << ',' << r.samples << ',' << format_double(r.grad_phi_sq) << ',' << format_double(r.grad_phitilde_sq) << ','
     << format_double(r.y_gap) << ',' << format_double(r.v_gap) << ',' << format_double(r.phi) << ','
     << format_double(r.max_local_v_norm) << ',' << format_double(r.client_drift_v) << '\n';
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) write_metrics_row(os, r);
}

// ---------------------------------------------------------------------------
// Sweeps

struct Quartiles {
  double q1 = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double q3 = std::numeric_limits<double>::quiet_NaN();
};

/// Linear-interpolated quartiles of the finite entries.
inline Quartiles quartiles(std::vector<double> xs) {
  Quartiles q;
  std::erase_if(xs, [](double v) { return !std::isfinite(v); });
  if (xs.empty()) return q;
  std::sort(xs.begin(), xs.end());
  auto at = [&](double frac) {
    const double pos = frac * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
  };
  q.q1 = at(0.25);
  q.median = at(0.5);
  q.q3 = at(0.75);
  return q;
}

struct SweepCell {
  double value = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::optional<RunReport>> reports;  // nullopt where the run failed
  std::vector<std::string> errors;                // empty string where it succeeded
  Quartiles min_grad_phi_sq;
  Quartiles min_grad_phitilde_sq;
};

struct SweepTable {
  std::string parameter;
  std::vector<SweepCell> cells;
};

inline RunConfig apply_sweep_value(RunConfig cfg, const std::string& param, double value) {
  auto as_count = [&](const char* name) {
    if (!(value >= 1.0) || value != std::floor(value)) throw ValidationError(std::string("sweep_values: ") + name + " values must be positive integers");
    return static_cast<std::size_t>(value);
  };
  if (param == "P") {
    cfg.P = as_count("P");
  } else if (param == "T") {
    cfg.T = as_count("T");
  } else if (param == "tau") {
    cfg.tau = TauProfile::fixed(as_count("tau"));
  } else if (param == "sigma") {
    if (!(value >= 0.0)) throw ValidationError("sweep_values: sigma values must be >= 0");
    cfg.noise.sigma_f = cfg.noise.sigma_g = cfg.noise.sigma_gg = value;
    cfg.noise.enabled = value > 0.0;
  } else {
    throw ValidationError("sweep_param: must be one of P, T, sigma, tau (got '" + param + "')");
  }
  return cfg;
}

/// Grid of runs, one cell per value and one run per seed in each cell. A
/// failing run is recorded in its cell and the sweep carries on.
inline SweepTable sweep(const RunConfig& base, const BilevelInstance& inst, const std::string& param,
                        const std::vector<double>& values, const std::vector<std::uint64_t>& seeds,
                        const RunOptions& opts = {}) {
  if (values.empty()) throw ValidationError("sweep_values: must not be empty");
  if (seeds.empty()) throw ValidationError("sweep_seeds: must not be empty");
  SweepTable table;
  table.parameter = param;
  for (double value : values) {
    RunConfig cell_cfg = apply_sweep_value(base, param, value);
    SweepCell cell;
    cell.value = value;
    cell.seeds = seeds;
    std::vector<double> mins_phi, mins_tilde;
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = cell_cfg;
      cfg.seed = seed;
      try {
        RunReport rep = run(cfg, inst, RunOptions{opts.workers, {}, {}});
        mins_phi.push_back(rep.min_grad_phi_sq);
        mins_tilde.push_back(rep.min_grad_phitilde_sq);
        cell.reports.emplace_back(std::move(rep));
        cell.errors.emplace_back();
      } catch (const std::exception& e) {
        cell.reports.emplace_back(std::nullopt);
        cell.errors.emplace_back(e.what());
      }
    }
    cell.min_grad_phi_sq = quartiles(mins_phi);
    cell.min_grad_phitilde_sq = quartiles(mins_tilde);
    table.cells.push_back(std::move(cell));
  }
  return table;
}

inline void write_sweep_table(std::ostream& os, const SweepTable& table) {
  os << table.parameter
     << ",runs,failures,min_grad_phi_sq_q1,min_grad_phi_sq_median,min_grad_phi_sq_q3,"
        "min_grad_phitilde_sq_q1,min_grad_phitilde_sq_median,min_grad_phitilde_sq_q3\n";
  for (const auto& c : table.cells) {
    const auto failures = std::count_if(c.errors.begin(), c.errors.end(), [](const std::string& e) { return !e.empty(); });
    os << format_double(c.value) << ',' << c.reports.size() << ',' << failures << ',' << format_double(c.min_grad_phi_sq.q1)
       << ',' << format_double(c.min_grad_phi_sq.median) << ',' << format_double(c.min_grad_phi_sq.q3) << ','
       << format_double(c.min_grad_phitilde_sq.q1) << ',' << format_double(c.min_grad_phitilde_sq.median) << ','
       << format_double(c.min_grad_phitilde_sq.q3) << '\n';
  }
}

}  // namespace fbo
