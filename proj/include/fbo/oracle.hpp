#pragma once

// Exact reference quantities for a weighted quadratic bilevel instance. Every
// function takes an explicit weight vector so the same code evaluates both
// the original objective (weights p) and the reweighted one (weights w).

#include <cstddef>
#include <numeric>
#include <vector>

#include "fbo/common.hpp"
#include "fbo/problem.hpp"

namespace fbo::oracle {

inline constexpr double kConditionGuard = 1e12;
inline constexpr double kDefaultFdStep = 1e-5;
inline constexpr std::size_t kEnumerationGuard = 12;

/// Weights on the probability simplex (tolerance 1e-12).
struct WeightVector {
  Vec w;

  WeightVector() = default;
  explicit WeightVector(Vec weights) : w(std::move(weights)) {
    if (w.size() == 0) throw ValidationError("weights: empty");
    if ((w.array() < 0.0).any() || !w.allFinite()) throw ValidationError("weights: entries must be finite and >= 0");
    if (std::abs(w.sum() - 1.0) > 1e-12) throw ValidationError("weights: must sum to 1 (got " + format_double(w.sum()) + ")");
  }
  std::size_t size() const { return static_cast<std::size_t>(w.size()); }
  double operator[](std::size_t i) const { return w(static_cast<Eigen::Index>(i)); }
  double beta_min() const { return static_cast<double>(w.size()) * w.minCoeff(); }
  double beta_max() const { return static_cast<double>(w.size()) * w.maxCoeff(); }
};

namespace detail {

inline void check_weights(const BilevelInstance& inst, const WeightVector& w) {
  if (w.size() != inst.n()) throw ValidationError("weights: expected " + std::to_string(inst.n()) + " entries, got " + std::to_string(w.size()));
}

// Solves (Σ w_i A_i) z = rhs by Cholesky after checking SPD-ness and conditioning.
class WeightedHessianSolver {
 public:
  WeightedHessianSolver(const BilevelInstance& inst, const WeightVector& w) {
    check_weights(inst, w);
    const auto dy = static_cast<Eigen::Index>(inst.d_y);
    H_ = Mat::Zero(dy, dy);
    for (std::size_t i = 0; i < inst.n(); ++i) H_ += w[i] * inst.clients[i].A;
    Eigen::SelfAdjointEigenSolver<Mat> es(H_, Eigen::EigenvaluesOnly);
    const double lmin = es.eigenvalues().minCoeff();
    const double lmax = es.eigenvalues().maxCoeff();
    if (!(lmin > 0.0) || lmax / lmin > kConditionGuard) {
      throw SingularSystemError("weighted Hessian is not numerically SPD (lambda_min=" + format_double(lmin) +
                                ", lambda_max=" + format_double(lmax) + ")");
    }
    llt_.compute(H_);
    if (llt_.info() != Eigen::Success) throw SingularSystemError("Cholesky factorization failed");
  }

  Vec solve(const Vec& rhs) const { return llt_.solve(rhs); }
  const Mat& matrix() const { return H_; }

 private:
  Mat H_;
  Eigen::LLT<Mat> llt_;
};

}  // namespace detail

/// Everything the hypergradient needs at one x, sharing a single factorization.
struct Solution {
  Vec ystar;
  Vec vstar;
  Vec hypergrad;
  double phi = 0.0;
};

inline Solution solve_at(const BilevelInstance& inst, const WeightVector& w, const Vec& x) {
  fbo::detail::check_dim(x, inst.d_x, "x");
  detail::WeightedHessianSolver solver(inst, w);
  const auto dx = static_cast<Eigen::Index>(inst.d_x);
  const auto dy = static_cast<Eigen::Index>(inst.d_y);

  Vec lin = Vec::Zero(dy);
  for (std::size_t i = 0; i < inst.n(); ++i) lin += w[i] * (inst.clients[i].B.transpose() * x + inst.clients[i].c);
  Solution s;
  s.ystar = -solver.solve(lin);

  Vec fy = Vec::Zero(dy);
  Vec fx = Vec::Zero(dx);
  Mat Bw = Mat::Zero(dx, dy);
  for (std::size_t i = 0; i < inst.n(); ++i) {
    const auto& c = inst.clients[i];
    fy += w[i] * (c.D * (s.ystar - c.y_ref));
    fx += w[i] * (c.E * (x - c.x_ref));
    Bw += w[i] * c.B;
    s.phi += w[i] * f_value(inst, i, x, s.ystar);
  }
  s.vstar = solver.solve(fy);
  s.hypergrad = fx - Bw * s.vstar;
  return s;
}

/// ỹ*(x) = −(Σ w_i A_i)⁻¹ Σ w_i (B_iᵀx + c_i).
inline Vec ystar(const BilevelInstance& inst, const WeightVector& w, const Vec& x) { return solve_at(inst, w, x).ystar; }

/// ṽ*(x) = (Σ w_i A_i)⁻¹ Σ w_i D_i (ỹ*(x) − y_ref_i).
inline Vec vstar(const BilevelInstance& inst, const WeightVector& w, const Vec& x) { return solve_at(inst, w, x).vstar; }

inline Vec hypergrad_exact(const BilevelInstance& inst, const WeightVector& w, const Vec& x) {
  return solve_at(inst, w, x).hypergrad;
}

inline double phi_value(const BilevelInstance& inst, const WeightVector& w, const Vec& x) {
  return solve_at(inst, w, x).phi;
}

/// Central differences of phi_value, one coordinate at a time.
inline Vec finite_diff_hypergrad(const BilevelInstance& inst, const WeightVector& w, const Vec& x,
                                 double h = kDefaultFdStep) {
  if (!(h > 0.0)) throw ValidationError("h: finite-difference step must be > 0");
  fbo::detail::check_dim(x, inst.d_x, "x");
  Vec out(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vec xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    out(j) = (phi_value(inst, w, xp) - phi_value(inst, w, xm)) / (2.0 * h);
  }
  return out;
}

/// Σ_i w_i ∇̄f_i(x, y, v) with exact oracles.
inline Vec surrogate_hypergrad(const BilevelInstance& inst, const WeightVector& w, const Vec& x, const Vec& y,
                               const Vec& v) {
  detail::check_weights(inst, w);
  Vec out = Vec::Zero(static_cast<Eigen::Index>(inst.d_x));
  for (std::size_t i = 0; i < inst.n(); ++i) out += w[i] * local_hypergrad_estimate(inst, i, x, y, v);
  return out;
}

/// Σ_i w_i ∇_y g_i(x, y); zero at ỹ*.
inline Vec lower_level_residual(const BilevelInstance& inst, const WeightVector& w, const Vec& x, const Vec& y) {
  detail::check_weights(inst, w);
  Vec out = Vec::Zero(static_cast<Eigen::Index>(inst.d_y));
  for (std::size_t i = 0; i < inst.n(); ++i) out += w[i] * grad_y_g(inst, i, x, y);
  return out;
}

/// Σ_i w_i ∇_v R_i(x, y, v); zero at ṽ* when y = ỹ*.
inline Vec linear_system_residual(const BilevelInstance& inst, const WeightVector& w, const Vec& x, const Vec& y,
                                  const Vec& v) {
  detail::check_weights(inst, w);
  Vec out = Vec::Zero(static_cast<Eigen::Index>(inst.d_y));
  for (std::size_t i = 0; i < inst.n(); ++i) out += w[i] * grad_v_R(inst, i, x, y, v);
  return out;
}

/// Expected participant aggregate Σ_{i∈C} (n/P) p_i c_i under uniform
/// without-replacement sampling, by enumerating all C(n,P) subsets.
inline Vec expected_aggregate_brute(const std::vector<Vec>& contributions, const Vec& p, std::size_t P) {
  const std::size_t n = contributions.size();
  if (n == 0) throw ValidationError("contributions: empty");
  if (n > kEnumerationGuard) throw ValidationError("n: enumeration guard exceeded (" + std::to_string(n) + " > " + std::to_string(kEnumerationGuard) + ")");
  if (P < 1 || P > n) throw ValidationError("P: must satisfy 1 <= P <= n");
  if (static_cast<std::size_t>(p.size()) != n) throw ValidationError("p: expected " + std::to_string(n) + " entries");

  const double scale = static_cast<double>(n) / static_cast<double>(P);
  Vec total = Vec::Zero(contributions.front().size());
  std::size_t subsets = 0;
  // Subsets as bitmasks with exactly P bits set.
  for (unsigned long mask = 0; mask < (1UL << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcountl(mask)) != P) continue;
    ++subsets;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1UL << i)) total += scale * p(static_cast<Eigen::Index>(i)) * contributions[i];
    }
  }
  return total / static_cast<double>(subsets);
}

}  // namespace fbo::oracle
