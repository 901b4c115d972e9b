#pragma once

// Synthetic quadratic federated bilevel problems and the stochastic oracles
// clients call during local updates.
//
//   g_i(x,y) = ½ yᵀA_i y + xᵀB_i y + c_iᵀy
//   f_i(x,y) = ½ (y−y_ref_i)ᵀD_i(y−y_ref_i) + ½ (x−x_ref_i)ᵀE_i(x−x_ref_i)
//
// All derivatives are closed form.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fbo/common.hpp"
#include "fbo/rng.hpp"

namespace fbo {

struct ClientData {
  Mat A;      // d_y×d_y, SPD: ∇²_yy g_i
  Mat B;      // d_x×d_y: ∇²_xy g_i
  Vec c;      // d_y
  Mat D;      // d_y×d_y, PSD
  Vec y_ref;  // d_y
  Mat E;      // d_x×d_x, PSD
  Vec x_ref;  // d_x

  bool operator==(const ClientData&) const = default;
};

struct BilevelInstance {
  std::size_t d_x = 0;
  std::size_t d_y = 0;
  std::vector<ClientData> clients;
  Vec p;  // client weights, positive, sum to one

  std::size_t n() const { return clients.size(); }
  bool operator==(const BilevelInstance&) const = default;
};

struct SmoothnessConstants {
  double mu_g = 0.0;
  double L1 = 0.0;
  double Lf_cap = 0.0;

  bool operator==(const SmoothnessConstants&) const = default;
};

struct NoiseModel {
  double sigma_f = 0.0;
  double sigma_g = 0.0;
  double sigma_gg = 0.0;
  bool enabled = false;

  void validate() const {
    if (!(sigma_f >= 0.0)) throw ValidationError("sigma_f: must be >= 0");
    if (!(sigma_g >= 0.0)) throw ValidationError("sigma_g: must be >= 0");
    if (!(sigma_gg >= 0.0)) throw ValidationError("sigma_gg: must be >= 0");
  }
  bool operator==(const NoiseModel&) const = default;
};

enum class WeightProfile { kUniform, kRandom };

struct InstanceSpec {
  std::size_t n = 1;
  std::size_t d_x = 1;
  std::size_t d_y = 1;
  double mu_g_target = 1.0;
  double L1_target = 4.0;
  double heterogeneity = 0.5;  // 0 ⇒ identical clients
  WeightProfile weight_profile = WeightProfile::kUniform;

  bool operator==(const InstanceSpec&) const = default;
};

/// Noise source for one oracle evaluation context. Each purpose draws from its
/// own stream so composed oracles (∇_v R_i, ∇̄f_i) use independent samples.
/// Passing nullptr instead of a StochasticDraws selects exact mode.
struct StochasticDraws {
  NoiseModel noise;
  SmoothnessConstants bounds;
  RngStream g_stream;
  RngStream f_stream;
  RngStream hess_stream;
};

namespace detail {

inline double eigen_min(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline double eigen_max(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

inline double spectral_norm(const Mat& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(m);
  return svd.singularValues()(0);
}

inline bool is_symmetric(const Mat& m, double tol = 1e-12) {
  return m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * std::max(1.0, m.cwiseAbs().maxCoeff());
}

inline Vec gaussian_vector(std::size_t d, double stddev, RngStream& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec out(static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < out.size(); ++k) out(k) = stddev * normal(rng);
  return out;
}

inline void check_client(const BilevelInstance& inst, std::size_t i) {
  if (i >= inst.n()) throw ValidationError("client index " + std::to_string(i) + " out of range (n=" + std::to_string(inst.n()) + ")");
}

inline void check_dim(const Vec& v, std::size_t d, const char* name) {
  if (static_cast<std::size_t>(v.size()) != d) {
    throw ValidationError(std::string(name) + ": dimension " + std::to_string(v.size()) + " != expected " + std::to_string(d));
  }
}

inline Mat random_orthogonal(std::size_t d, RngStream& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat g(d, d);
  for (Eigen::Index r = 0; r < g.rows(); ++r)
    for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = normal(rng);
  Eigen::HouseholderQR<Mat> qr(g);
  return qr.householderQ() * Mat::Identity(d, d);
}

inline Mat random_symmetric(std::size_t d, double lo, double hi, RngStream& rng) {
  std::uniform_real_distribution<double> unif(lo, hi);
  Mat q = random_orthogonal(d, rng);
  Vec lambda(d);
  for (Eigen::Index k = 0; k < lambda.size(); ++k) lambda(k) = unif(rng);
  Mat m = q * lambda.asDiagonal() * q.transpose();
  return 0.5 * (m + m.transpose());
}

inline Mat random_bounded(std::size_t rows, std::size_t cols, double smax, RngStream& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.2, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = normal(rng);
  const double s = spectral_norm(m);
  return s > 0.0 ? Mat(m * (smax * unif(rng) / s)) : m;
}

inline Vec random_uniform_vec(std::size_t d, double half_width, RngStream& rng) {
  std::uniform_real_distribution<double> unif(-half_width, half_width);
  Vec v(d);
  for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = unif(rng);
  return v;
}

}  // namespace detail

/// Checks every structural invariant: dimensions, weights on the simplex, A_i
/// symmetric positive definite, D_i and E_i symmetric PSD.
inline void validate_instance(const BilevelInstance& inst) {
  if (inst.d_x < 1) throw ValidationError("d_x: must be >= 1");
  if (inst.d_y < 1) throw ValidationError("d_y: must be >= 1");
  if (inst.n() < 1) throw ValidationError("n: must be >= 1");
  if (static_cast<std::size_t>(inst.p.size()) != inst.n()) throw ValidationError("weights: expected " + std::to_string(inst.n()) + " entries");
  if ((inst.p.array() <= 0.0).any() || !inst.p.allFinite()) throw ValidationError("weights: every p_i must be > 0");
  if (std::abs(inst.p.sum() - 1.0) > 1e-12) throw ValidationError("weights: must sum to 1 (got " + format_double(inst.p.sum()) + ")");
  const auto dx = static_cast<Eigen::Index>(inst.d_x);
  const auto dy = static_cast<Eigen::Index>(inst.d_y);
  for (std::size_t i = 0; i < inst.n(); ++i) {
    const auto& c = inst.clients[i];
    const std::string tag = "client " + std::to_string(i) + ": ";
    if (c.A.rows() != dy || c.A.cols() != dy) throw ValidationError(tag + "A must be d_y x d_y");
    if (c.B.rows() != dx || c.B.cols() != dy) throw ValidationError(tag + "B must be d_x x d_y");
    if (c.c.size() != dy) throw ValidationError(tag + "c must have d_y entries");
    if (c.D.rows() != dy || c.D.cols() != dy) throw ValidationError(tag + "D must be d_y x d_y");
    if (c.y_ref.size() != dy) throw ValidationError(tag + "y_ref must have d_y entries");
    if (c.E.rows() != dx || c.E.cols() != dx) throw ValidationError(tag + "E must be d_x x d_x");
    if (c.x_ref.size() != dx) throw ValidationError(tag + "x_ref must have d_x entries");
    if (!c.A.allFinite() || !detail::is_symmetric(c.A)) throw ValidationError(tag + "A must be symmetric");
    if (!(detail::eigen_min(c.A) > 0.0)) throw ValidationError(tag + "A must be positive definite");
    if (!c.D.allFinite() || !detail::is_symmetric(c.D)) throw ValidationError(tag + "D must be symmetric");
    if (!c.E.allFinite() || !detail::is_symmetric(c.E)) throw ValidationError(tag + "E must be symmetric");
    if (detail::eigen_min(c.D) < -1e-12 * std::max(1.0, c.D.norm())) throw ValidationError(tag + "D must be PSD");
    if (detail::eigen_min(c.E) < -1e-12 * std::max(1.0, c.E.norm())) throw ValidationError(tag + "E must be PSD");
  }
}

/// mu_g = min_i λ_min(A_i); L1 = max_i max(λ_max(A_i), σ_max(B_i), λ_max(D_i), λ_max(E_i)).
inline SmoothnessConstants compute_smoothness(const BilevelInstance& inst, double Lf_cap) {
  if (!(Lf_cap > 0.0)) throw ValidationError("Lf_cap: must be > 0");
  SmoothnessConstants sc{std::numeric_limits<double>::infinity(), 0.0, Lf_cap};
  for (const auto& c : inst.clients) {
    sc.mu_g = std::min(sc.mu_g, detail::eigen_min(c.A));
    sc.L1 = std::max({sc.L1, detail::eigen_max(c.A), detail::spectral_norm(c.B), detail::eigen_max(c.D), detail::eigen_max(c.E)});
  }
  if (!(sc.mu_g > 0.0)) throw ValidationError("instance: mu_g must be > 0");
  return sc;
}

inline BilevelInstance make_synthetic_instance(const InstanceSpec& spec, std::uint64_t seed) {
  if (spec.n < 1) throw ValidationError("n: must be >= 1");
  if (spec.d_x < 1) throw ValidationError("d_x: must be >= 1");
  if (spec.d_y < 1) throw ValidationError("d_y: must be >= 1");
  if (!(spec.mu_g_target > 0.0)) throw ValidationError("mu_g: must be > 0");
  if (!(spec.mu_g_target <= spec.L1_target)) throw ValidationError("mu_g: must be <= L1 (" + format_double(spec.mu_g_target) + " > " + format_double(spec.L1_target) + ")");
  if (!(spec.heterogeneity >= 0.0 && spec.heterogeneity <= 1.0)) throw ValidationError("heterogeneity: must lie in [0,1]");

  const std::size_t dx = spec.d_x, dy = spec.d_y;
  const double lo = spec.mu_g_target, hi = spec.L1_target, h = spec.heterogeneity;

  auto draw_client = [&](RngStream& rng) {
    ClientData c;
    c.A = detail::random_symmetric(dy, lo, hi, rng);
    c.B = detail::random_bounded(dx, dy, hi, rng);
    c.c = detail::random_uniform_vec(dy, 1.0, rng);
    c.D = detail::random_symmetric(dy, 0.0, hi, rng);
    c.y_ref = detail::random_uniform_vec(dy, 1.0, rng);
    c.E = detail::random_symmetric(dx, 0.0, hi, rng);
    c.x_ref = detail::random_uniform_vec(dx, 1.0, rng);
    return c;
  };

  RngStream base_rng = rng_stream(seed, 0, kServerStream, Purpose::kInstance, 0);
  const ClientData base = draw_client(base_rng);

  BilevelInstance inst;
  inst.d_x = dx;
  inst.d_y = dy;
  inst.clients.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    RngStream rng = rng_stream(seed, 0, i, Purpose::kInstance, 0);
    const ClientData own = draw_client(rng);
    // Convex blends keep every spectrum inside the target bounds.
    ClientData c;
    c.A = (1.0 - h) * base.A + h * own.A;
    c.B = (1.0 - h) * base.B + h * own.B;
    c.c = (1.0 - h) * base.c + h * own.c;
    c.D = (1.0 - h) * base.D + h * own.D;
    c.y_ref = (1.0 - h) * base.y_ref + h * own.y_ref;
    c.E = (1.0 - h) * base.E + h * own.E;
    c.x_ref = (1.0 - h) * base.x_ref + h * own.x_ref;
    if (h == 0.0) c = base;
    inst.clients.push_back(std::move(c));
  }

  inst.p = Vec::Constant(static_cast<Eigen::Index>(spec.n), 1.0 / static_cast<double>(spec.n));
  if (spec.weight_profile == WeightProfile::kRandom) {
    RngStream rng = rng_stream(seed, 1, kServerStream, Purpose::kInstance, 0);
    std::uniform_real_distribution<double> unif(0.5, 1.5);
    for (Eigen::Index i = 0; i < inst.p.size(); ++i) inst.p(i) = unif(rng);
    inst.p /= inst.p.sum();
  }
  validate_instance(inst);
  return inst;
}

/// One client, d_x = d_y = 1: A=2, B=1, c=0, D=1, y_ref=1, E=0, x_ref=0.
/// y*(x) = −x/2 and Φ(x) = ½(x/2+1)², minimized at x = −2.
inline BilevelInstance canonical_1d_instance() {
  BilevelInstance inst;
  inst.d_x = 1;
  inst.d_y = 1;
  ClientData c;
  c.A = Mat::Constant(1, 1, 2.0);
  c.B = Mat::Constant(1, 1, 1.0);
  c.c = Vec::Zero(1);
  c.D = Mat::Constant(1, 1, 1.0);
  c.y_ref = Vec::Constant(1, 1.0);
  c.E = Mat::Zero(1, 1);
  c.x_ref = Vec::Zero(1);
  inst.clients.push_back(c);
  inst.p = Vec::Ones(1);
  return inst;
}

// ---------------------------------------------------------------------------
// Oracles. `draws == nullptr` selects exact mode.

inline Vec grad_y_g(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y,
                    StochasticDraws* draws = nullptr) {
  detail::check_client(inst, i);
  detail::check_dim(x, inst.d_x, "x");
  detail::check_dim(y, inst.d_y, "y");
  const auto& c = inst.clients[i];
  Vec g = c.A * y + c.B.transpose() * x + c.c;
  if (draws && draws->noise.enabled && draws->noise.sigma_g > 0.0) {
    g += detail::gaussian_vector(inst.d_y, draws->noise.sigma_g / std::sqrt(static_cast<double>(inst.d_y)), draws->g_stream);
  }
  return g;
}

inline Vec grad_x_f(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y,
                    StochasticDraws* draws = nullptr) {
  detail::check_client(inst, i);
  detail::check_dim(x, inst.d_x, "x");
  detail::check_dim(y, inst.d_y, "y");
  const auto& c = inst.clients[i];
  Vec g = c.E * (x - c.x_ref);
  if (draws && draws->noise.enabled && draws->noise.sigma_f > 0.0) {
    g += detail::gaussian_vector(inst.d_x, draws->noise.sigma_f / std::sqrt(static_cast<double>(inst.d_x)), draws->f_stream);
  }
  return g;
}

/// In stochastic mode the sample is norm-clipped to Lf_cap so the per-sample
/// bound ‖∇_y f‖ ≤ L_f holds.
inline Vec grad_y_f(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y,
                    StochasticDraws* draws = nullptr) {
  detail::check_client(inst, i);
  detail::check_dim(x, inst.d_x, "x");
  detail::check_dim(y, inst.d_y, "y");
  const auto& c = inst.clients[i];
  Vec g = c.D * (y - c.y_ref);
  if (draws && draws->noise.enabled) {
    if (draws->noise.sigma_f > 0.0) {
      g += detail::gaussian_vector(inst.d_y, draws->noise.sigma_f / std::sqrt(static_cast<double>(inst.d_y)), draws->f_stream);
    }
    const double norm = g.norm();
    if (norm > draws->bounds.Lf_cap) g *= draws->bounds.Lf_cap / norm;
  }
  return g;
}

/// Sampled ∇²_yy g_i: A_i plus a symmetric Gaussian perturbation with
/// E‖Ξ‖_F² = σ_gg², eigenvalue-clipped into [mu_g, L1]. Clipping is a
/// Frobenius projection onto a convex set containing A_i, so the deviation
/// from A_i never grows.
inline Mat sample_hessian_yy(const BilevelInstance& inst, std::size_t i, StochasticDraws& draws) {
  const auto& A = inst.clients[i].A;
  const auto d = static_cast<double>(inst.d_y);
  const double s = draws.noise.sigma_gg * std::sqrt(2.0 / (d * (d + 1.0)));
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat g(A.rows(), A.cols());
  for (Eigen::Index r = 0; r < g.rows(); ++r)
    for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = s * normal(draws.hess_stream);
  Mat sampled = A + 0.5 * (g + g.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sampled);
  Vec lambda = es.eigenvalues().cwiseMax(draws.bounds.mu_g).cwiseMin(draws.bounds.L1);
  Mat out = es.eigenvectors() * lambda.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

inline Vec hvp_yy_g(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y, const Vec& v,
                    StochasticDraws* draws = nullptr) {
  detail::check_client(inst, i);
  detail::check_dim(x, inst.d_x, "x");
  detail::check_dim(y, inst.d_y, "y");
  detail::check_dim(v, inst.d_y, "v");
  if (draws && draws->noise.enabled) return sample_hessian_yy(inst, i, *draws) * v;
  return inst.clients[i].A * v;
}

inline Vec jvp_xy_g(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y, const Vec& v,
                    StochasticDraws* draws = nullptr) {
  detail::check_client(inst, i);
  detail::check_dim(x, inst.d_x, "x");
  detail::check_dim(y, inst.d_y, "y");
  detail::check_dim(v, inst.d_y, "v");
  Vec out = inst.clients[i].B * v;
  if (draws && draws->noise.enabled && draws->noise.sigma_gg > 0.0) {
    out += detail::gaussian_vector(inst.d_x, draws->noise.sigma_gg / std::sqrt(static_cast<double>(inst.d_x)), draws->hess_stream);
  }
  return out;
}

/// ∇_v R_i = ∇²_yy g_i v − ∇_y f_i.
inline Vec grad_v_R(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y, const Vec& v,
                    StochasticDraws* draws = nullptr) {
  Vec hv = hvp_yy_g(inst, i, x, y, v, draws);
  return hv - grad_y_f(inst, i, x, y, draws);
}

/// ∇̄f_i(x,y,v) = ∇_x f_i − ∇²_xy g_i v.
inline Vec local_hypergrad_estimate(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y,
                                    const Vec& v, StochasticDraws* draws = nullptr) {
  Vec gx = grad_x_f(inst, i, x, y, draws);
  return gx - jvp_xy_g(inst, i, x, y, v, draws);
}

inline double f_value(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y) {
  const auto& c = inst.clients[i];
  const Vec dy = y - c.y_ref;
  const Vec dx = x - c.x_ref;
  return 0.5 * dy.dot(c.D * dy) + 0.5 * dx.dot(c.E * dx);
}

inline double g_value(const BilevelInstance& inst, std::size_t i, const Vec& x, const Vec& y) {
  const auto& c = inst.clients[i];
  return 0.5 * y.dot(c.A * y) + x.dot(c.B * y) + c.c.dot(y);
}

/// ∇_y F(x,y) = Σ p_i ∇_y f_i, the quantity Lf_cap bounds.
inline Vec weighted_grad_y_f(const BilevelInstance& inst, const Vec& x, const Vec& y) {
  Vec out = Vec::Zero(static_cast<Eigen::Index>(inst.d_y));
  for (std::size_t i = 0; i < inst.n(); ++i) out += inst.p(static_cast<Eigen::Index>(i)) * grad_y_f(inst, i, x, y);
  return out;
}

/// 10 × ‖∇_y F(x⁰, y⁰)‖, falling back to 1 when that gradient vanishes.
inline double default_Lf_cap(const BilevelInstance& inst, const Vec& x0, const Vec& y0) {
  const double norm = weighted_grad_y_f(inst, x0, y0).norm();
  return norm > 0.0 ? 10.0 * norm : 1.0;
}

}  // namespace fbo
