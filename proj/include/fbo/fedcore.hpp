#pragma once

// Local client rounds, local/server aggregation and the two server updates:
//
//   SimFBO:  z ← z − γ Σ_{i∈C} p̃_i q_i
//   ShroFBO: z ← z − ρ γ Σ_{i∈C} p̃_i q_i / ‖a_i‖₁,   ρ = Σ_j p_j ‖a_j‖₁
//
// with v projected onto the ball of radius r after either update.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fbo/common.hpp"
#include "fbo/oracle.hpp"
#include "fbo/problem.hpp"
#include "fbo/rng.hpp"

namespace fbo {

struct FedState {
  Vec x;
  Vec y;
  Vec v;
  std::size_t t = 0;
  double r = 1.0;  // projection radius for v
};

struct CoefficientSchedule {
  enum class Kind { kConstant, kGeometric };

  Kind kind = Kind::kConstant;
  double alpha_min = 1.0;
  double alpha_max = 1.0;
  double ratio = 1.0;  // geometric decay factor, (0, 1]

  void validate() const {
    if (!(alpha_min > 0.0)) throw ValidationError("alpha_min: must be > 0");
    if (!(alpha_max >= alpha_min)) throw ValidationError("alpha_max: must be >= alpha_min");
    if (kind == Kind::kGeometric && !(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("coef_ratio: must lie in (0, 1]");
  }

  /// a^{(t,k)}. Constant schedules use alpha_max; geometric ones decay from
  /// alpha_max and are floored at alpha_min.
  double coefficient(std::size_t k) const {
    if (kind == Kind::kConstant) return alpha_max;
    return std::max(alpha_min, alpha_max * std::pow(ratio, static_cast<double>(k)));
  }

  double norm1(std::size_t tau) const {
    double s = 0.0;
    for (std::size_t k = 0; k < tau; ++k) s += coefficient(k);
    return s;
  }

  bool operator==(const CoefficientSchedule&) const = default;
};

struct StepSizes {
  double eta_y = 0.1, eta_v = 0.1, eta_x = 0.1;
  double gamma_y = 0.1, gamma_v = 0.1, gamma_x = 0.1;
  // Local stepsizes at round t are η/(1+t)^decay; 0 keeps them constant.
  double decay = 0.0;

  void validate() const {
    const std::pair<const char*, double> fields[] = {{"eta_y", eta_y},     {"eta_v", eta_v},     {"eta_x", eta_x},
                                                     {"gamma_y", gamma_y}, {"gamma_v", gamma_v}, {"gamma_x", gamma_x}};
    for (const auto& [name, value] : fields) {
      if (!(value > 0.0) || !std::isfinite(value)) throw ValidationError(std::string(name) + ": must be > 0");
    }
    if (!(decay >= 0.0)) throw ValidationError("step_decay: must be >= 0");
  }

  StepSizes at_round(std::size_t t) const {
    if (decay == 0.0) return *this;
    StepSizes s = *this;
    const double scale = std::pow(1.0 + static_cast<double>(t), -decay);
    s.eta_y *= scale;
    s.eta_v *= scale;
    s.eta_x *= scale;
    return s;
  }

  bool operator==(const StepSizes&) const = default;
};

struct GradTriple {
  Vec gy;  // ∇_y g_i
  Vec gv;  // ∇_v R_i
  Vec gx;  // ∇̄f_i
};

struct ClientRoundResult {
  Vec q_y, q_v, q_x;
  double a_norm1 = 0.0;
  std::size_t tau = 0;
  std::size_t samples_used = 0;
  double max_local_v_norm = 0.0;
  // Σ_k (a_k/‖a‖₁) ‖v_i^{(t,k)} − v^{(t)}‖², k = 0..τ−1.
  double drift_v = 0.0;
  // Local iterates after the last step.
  Vec x_end, y_end, v_end;

  Vec h_y() const { return q_y / a_norm1; }
  Vec h_v() const { return q_v / a_norm1; }
  Vec h_x() const { return q_x / a_norm1; }
};

// Every local step draws three stochastic gradients.
inline constexpr std::size_t kSamplesPerLocalStep = 3;

/// Runs τ simultaneous local steps from `start`. `grads(k, x, y, v)` returns
/// the three gradients at the current local iterate; all three are evaluated
/// before any variable moves. `apply_order` permutes the order in which the
/// y, v, x updates are written and must not change the outcome.
template <class GradFn>
ClientRoundResult run_local_steps(const FedState& start, std::size_t tau, const CoefficientSchedule& sched,
                                  const StepSizes& steps, GradFn&& grads,
                                  std::array<int, 3> apply_order = {0, 1, 2}) {
  if (tau < 1) throw ValidationError("tau: must be >= 1");
  if (!start.x.allFinite() || !start.y.allFinite() || !start.v.allFinite()) {
    throw DivergenceError("local round started from a non-finite state");
  }
  ClientRoundResult res;
  res.tau = tau;
  res.q_y = Vec::Zero(start.y.size());
  res.q_v = Vec::Zero(start.v.size());
  res.q_x = Vec::Zero(start.x.size());
  res.a_norm1 = sched.norm1(tau);
  res.samples_used = kSamplesPerLocalStep * tau;
  res.max_local_v_norm = start.v.norm();

  Vec x = start.x, y = start.y, v = start.v;
  for (std::size_t k = 0; k < tau; ++k) {
    const double a = sched.coefficient(k);
    res.drift_v += (a / res.a_norm1) * (v - start.v).squaredNorm();

    GradTriple g = grads(k, static_cast<const Vec&>(x), static_cast<const Vec&>(y), static_cast<const Vec&>(v));
    const std::pair<const char*, const Vec*> checks[] = {{"grad_y", &g.gy}, {"grad_v", &g.gv}, {"grad_x", &g.gx}};
    for (const auto& [name, vec] : checks) {
      if (!vec->allFinite()) throw DivergenceError(std::string("non-finite ") + name + " at local step " + std::to_string(k));
    }
    res.q_y += a * g.gy;
    res.q_v += a * g.gv;
    res.q_x += a * g.gx;

    for (int which : apply_order) {
      switch (which) {
        case 0: y -= steps.eta_y * a * g.gy; break;
        case 1: v -= steps.eta_v * a * g.gv; break;
        case 2: x -= steps.eta_x * a * g.gx; break;
        default: throw ValidationError("apply_order: entries must be 0, 1, 2");
      }
    }
    const std::pair<const char*, const Vec*> iterates[] = {{"y", &y}, {"v", &v}, {"x", &x}};
    for (const auto& [name, vec] : iterates) {
      if (!vec->allFinite()) throw DivergenceError(std::string("non-finite local ") + name + " after local step " + std::to_string(k));
    }
    res.max_local_v_norm = std::max(res.max_local_v_norm, v.norm());
  }
  res.x_end = std::move(x);
  res.y_end = std::move(y);
  res.v_end = std::move(v);
  return res;
}

/// What a client needs to draw stochastic gradients. Exact oracles are used
/// when `noise.enabled` is false.
struct NoiseContext {
  NoiseModel noise;
  SmoothnessConstants bounds;
  std::uint64_t seed = 0;
};

/// One client's local round on the quadratic instance. Randomness is keyed by
/// (seed, state.t, client, purpose, step).
inline ClientRoundResult local_round(const BilevelInstance& inst, std::size_t i, const FedState& state, std::size_t tau,
                                     const CoefficientSchedule& sched, const StepSizes& steps, const NoiseContext& ctx) {
  fbo::detail::check_client(inst, i);
  auto grads = [&](std::size_t k, const Vec& x, const Vec& y, const Vec& v) {
    if (!ctx.noise.enabled) {
      return GradTriple{grad_y_g(inst, i, x, y), grad_v_R(inst, i, x, y, v), local_hypergrad_estimate(inst, i, x, y, v)};
    }
    StochasticDraws draws{ctx.noise, ctx.bounds,
                          rng_stream(ctx.seed, state.t, i, Purpose::kGNoise, k),
                          rng_stream(ctx.seed, state.t, i, Purpose::kFNoise, k),
                          rng_stream(ctx.seed, state.t, i, Purpose::kHessNoise, k)};
    GradTriple g;
    g.gy = grad_y_g(inst, i, x, y, &draws);
    g.gv = grad_v_R(inst, i, x, y, v, &draws);
    g.gx = local_hypergrad_estimate(inst, i, x, y, v, &draws);
    return g;
  };
  try {
    return run_local_steps(state, tau, sched, steps, grads);
  } catch (const DivergenceError& e) {
    throw DivergenceError("client " + std::to_string(i) + ": " + e.what(), static_cast<long>(state.t));
  }
}

/// P_r(v) = min{1, r/‖v‖} v.
inline Vec project_ball(const Vec& v, double r) {
  if (!(r > 0.0)) throw ValidationError("r: projection radius must be > 0");
  const double norm = v.norm();
  if (norm <= r) return v;
  return v * (r / norm);
}

/// p̃_i = (n/P) p_i.
inline double effective_participation_weight(double p_i, std::size_t P, std::size_t n) {
  if (P < 1 || P > n) throw ValidationError("P: must satisfy 1 <= P <= n (P=" + std::to_string(P) + ", n=" + std::to_string(n) + ")");
  return static_cast<double>(n) / static_cast<double>(P) * p_i;
}

struct ReweightedObjective {
  double rho = 0.0;
  oracle::WeightVector w;
};

/// ρ = Σ_j p_j ‖a_j‖₁ and w_i = p_i ‖a_i‖₁ / ρ over all n clients.
inline ReweightedObjective reweighted_objective_weights(const Vec& p, const Vec& a_norm1_all) {
  if (p.size() != a_norm1_all.size()) throw ValidationError("a_norm1: expected one entry per client");
  if (!((a_norm1_all.array() > 0.0).all())) throw ValidationError("a_norm1: every entry must be > 0");
  Vec raw = p.cwiseProduct(a_norm1_all);
  const double rho = raw.sum();
  Vec w = raw / rho;
  // Renormalize away the last ulp so the simplex check is exact.
  w /= w.sum();
  return {rho, oracle::WeightVector(std::move(w))};
}

using ClientResults = std::map<std::size_t, ClientRoundResult>;
using ClientWeights = std::map<std::size_t, double>;

namespace detail {

inline void check_server_inputs(const FedState& state, const ClientResults& results, const ClientWeights& p_tilde) {
  if (results.empty()) throw ValidationError("server step: no client results");
  if (results.size() != p_tilde.size()) throw ValidationError("server step: p_tilde keys must match results");
  for (const auto& [i, _] : results) {
    if (!p_tilde.count(i)) throw ValidationError("server step: missing p_tilde for client " + std::to_string(i));
  }
  if (!(state.r > 0.0)) throw ValidationError("server step: projection radius must be > 0");
}

inline FedState apply_server_update(const FedState& state, const Vec& dy, const Vec& dv, const Vec& dx) {
  const std::pair<const char*, const Vec*> checks[] = {{"y", &dy}, {"v", &dv}, {"x", &dx}};
  for (const auto& [name, vec] : checks) {
    if (!vec->allFinite()) {
      throw DivergenceError(std::string("non-finite server aggregate for ") + name, static_cast<long>(state.t));
    }
  }
  FedState next = state;
  next.y = state.y - dy;
  next.v = project_ball(state.v - dv, state.r);
  next.x = state.x - dx;
  next.t = state.t + 1;
  if (!next.x.allFinite() || !next.y.allFinite() || !next.v.allFinite()) {
    throw DivergenceError("non-finite server state", static_cast<long>(state.t));
  }
  return next;
}

}  // namespace detail

inline FedState server_step_simfbo(const FedState& state, const ClientResults& results, const ClientWeights& p_tilde,
                                   const StepSizes& steps) {
  detail::check_server_inputs(state, results, p_tilde);
  Vec qy = Vec::Zero(state.y.size()), qv = Vec::Zero(state.v.size()), qx = Vec::Zero(state.x.size());
  for (const auto& [i, res] : results) {
    const double w = p_tilde.at(i);
    qy += w * res.q_y;
    qv += w * res.q_v;
    qx += w * res.q_x;
  }
  return detail::apply_server_update(state, steps.gamma_y * qy, steps.gamma_v * qv, steps.gamma_x * qx);
}

/// Aggregates the normalized h_i with p̃_i (not w̃_i) and rescales by ρ; this
/// is what removes the bias toward clients doing more local work.
inline FedState server_step_shrofbo(const FedState& state, const ClientResults& results, const ClientWeights& p_tilde,
                                    double rho, const StepSizes& steps) {
  detail::check_server_inputs(state, results, p_tilde);
  if (!(rho > 0.0)) throw ValidationError("rho: must be > 0");
  Vec hy = Vec::Zero(state.y.size()), hv = Vec::Zero(state.v.size()), hx = Vec::Zero(state.x.size());
  for (const auto& [i, res] : results) {
    if (!(res.a_norm1 > 0.0)) throw ValidationError("a_norm1: must be > 0 for client " + std::to_string(i));
    const double w = p_tilde.at(i);
    hy += w * res.h_y();
    hv += w * res.h_v();
    hx += w * res.h_x();
  }
  return detail::apply_server_update(state, rho * steps.gamma_y * hy, rho * steps.gamma_v * hv, rho * steps.gamma_x * hx);
}

}  // namespace fbo
