#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fbo/oracle.hpp"
#include "test_support.hpp"

using namespace fbo;
using fbo::testing::random_instance;
using fbo::testing::random_vec;
using fbo::testing::reference_solution;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }
oracle::WeightVector unit() { return oracle::WeightVector(Vec::Ones(1)); }

}  // namespace

TEST(CanonicalOracle, StationaryPointAndValues) {
  const auto inst = canonical_1d_instance();
  EXPECT_DOUBLE_EQ(oracle::ystar(inst, unit(), v1(0))(0), 0.0);
  EXPECT_DOUBLE_EQ(oracle::ystar(inst, unit(), v1(2))(0), -1.0);
  EXPECT_DOUBLE_EQ(oracle::vstar(inst, unit(), v1(0))(0), -0.5);
  EXPECT_DOUBLE_EQ(oracle::hypergrad_exact(inst, unit(), v1(0))(0), 0.5);
  EXPECT_NEAR(oracle::hypergrad_exact(inst, unit(), v1(-2))(0), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(oracle::phi_value(inst, unit(), v1(0)), 0.5);
  EXPECT_NEAR(oracle::phi_value(inst, unit(), v1(-2)), 0.0, 1e-30);
  EXPECT_NEAR(oracle::finite_diff_hypergrad(inst, unit(), v1(0))(0), 0.5, 1e-8);
}

TEST(Oracle, MatchesExplicitInverseReference) {
  std::mt19937_64 gen(11);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto inst = random_instance(seed);
    const Vec x = random_vec(inst.d_x, gen);
    const auto sol = oracle::solve_at(inst, oracle::WeightVector(inst.p), x);
    const auto ref = reference_solution(inst, inst.p, x);
    EXPECT_LT(relative_error(sol.ystar, ref.ystar), 1e-10) << seed;
    EXPECT_LT(relative_error(sol.vstar, ref.vstar), 1e-10) << seed;
    EXPECT_LT(relative_error(sol.hypergrad, ref.hypergrad), 1e-10) << seed;
    EXPECT_NEAR(sol.phi, ref.phi, 1e-10 * std::max(1.0, std::abs(ref.phi))) << seed;
  }
}

TEST(Oracle, SurrogateAtOptimumEqualsHypergradient) {
  std::mt19937_64 gen(12);
  for (std::uint64_t seed = 100; seed < 130; ++seed) {
    const auto inst = random_instance(seed);
    const oracle::WeightVector w(inst.p);
    const Vec x = random_vec(inst.d_x, gen);
    const auto sol = oracle::solve_at(inst, w, x);
    EXPECT_LT(relative_error(oracle::surrogate_hypergrad(inst, w, x, sol.ystar, sol.vstar), sol.hypergrad), 1e-10);
    EXPECT_LT(oracle::lower_level_residual(inst, w, x, sol.ystar).norm(), 1e-10 * std::max(1.0, sol.ystar.norm()) * 10);
    EXPECT_LT(oracle::linear_system_residual(inst, w, x, sol.ystar, sol.vstar).norm(), 1e-9);
  }
}

TEST(Oracle, FiniteDifferencesAgreeAcrossSteps) {
  const auto inst = random_instance(7, 4, 5);
  const oracle::WeightVector w(inst.p);
  std::mt19937_64 gen(13);
  const Vec x = random_vec(inst.d_x, gen);
  const Vec exact = oracle::hypergrad_exact(inst, w, x);
  // Φ is quadratic, so central differences are exact up to rounding; the
  // rounding error grows as h shrinks.
  for (double h : {1e-3, 1e-4, 1e-5, 1e-6}) {
    EXPECT_LT(relative_error(oracle::finite_diff_hypergrad(inst, w, x, h), exact), 1e-6) << h;
  }
  EXPECT_LT(relative_error(oracle::finite_diff_hypergrad(inst, w, x, 1e-7), exact), 1e-5);
}

TEST(Oracle, VstarNormBoundedByLfOverMu) {
  std::mt19937_64 gen(14);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = random_instance(seed);
    const oracle::WeightVector w(inst.p);
    const Vec x = random_vec(inst.d_x, gen);
    const Vec y = oracle::ystar(inst, w, x);
    Vec fy = Vec::Zero(static_cast<Eigen::Index>(inst.d_y));
    for (std::size_t i = 0; i < inst.n(); ++i) fy += w[i] * grad_y_f(inst, i, x, y);
    const auto b = compute_smoothness(inst, std::max(fy.norm(), 1e-300));
    EXPECT_LE(oracle::vstar(inst, w, x).norm(), b.Lf_cap / b.mu_g * (1 + 1e-12)) << seed;
  }
}

TEST(Oracle, ReweightingMovesTheStationaryPoint) {
  const auto inst = fbo::testing::two_client_mismatch_instance();
  Vec w(2);
  w << 1.0 / 6.0, 5.0 / 6.0;
  const oracle::WeightVector wt(w), p(inst.p);
  const Vec x0 = Vec::Zero(1);
  // Φ̃ is quadratic in x, so one Newton step with the FD curvature lands on its
  // stationary point.
  const double g0 = oracle::hypergrad_exact(inst, wt, x0)(0);
  const double g1 = oracle::hypergrad_exact(inst, wt, v1(1))(0);
  const Vec xs = v1(-g0 / (g1 - g0));
  EXPECT_NEAR(oracle::hypergrad_exact(inst, wt, xs)(0), 0.0, 1e-12);
  EXPECT_GT(oracle::hypergrad_exact(inst, p, xs).squaredNorm(), 1e-2);
}

TEST(Oracle, SingularWeightedHessianIsRejected) {
  auto inst = canonical_1d_instance();
  inst.clients[0].A(0, 0) = 0.0;
  EXPECT_THROW(oracle::solve_at(inst, unit(), v1(0)), SingularSystemError);

  BilevelInstance two;
  two.d_x = 1;
  two.d_y = 2;
  ClientData c;
  c.A = Eigen::Vector2d(1.0, 1e-14).asDiagonal();
  c.B = Mat::Zero(1, 2);
  c.c = Vec::Zero(2);
  c.D = Mat::Identity(2, 2);
  c.y_ref = Vec::Zero(2);
  c.E = Mat::Zero(1, 1);
  c.x_ref = Vec::Zero(1);
  two.clients = {c};
  two.p = Vec::Ones(1);
  EXPECT_THROW(oracle::solve_at(two, unit(), v1(0)), SingularSystemError);
}

TEST(Oracle, WeightVectorValidation) {
  EXPECT_THROW(oracle::WeightVector{Vec()}, ValidationError);
  Vec bad(2);
  bad << 0.5, 0.6;
  EXPECT_THROW(oracle::WeightVector{bad}, ValidationError);
  bad << -0.5, 1.5;
  EXPECT_THROW(oracle::WeightVector{bad}, ValidationError);
  Vec ok(4);
  ok << 0.1, 0.2, 0.3, 0.4;
  const oracle::WeightVector w(ok);
  EXPECT_DOUBLE_EQ(w.beta_min(), 0.4);
  EXPECT_DOUBLE_EQ(w.beta_max(), 1.6);
  EXPECT_THROW(oracle::solve_at(canonical_1d_instance(), w, v1(0)), ValidationError);
}

TEST(BruteAggregate, UniformWeightsPicksEachClientFairly) {
  std::vector<Vec> e;
  for (int i = 0; i < 4; ++i) e.push_back(Vec::Unit(4, i));
  const Vec p = Vec::Constant(4, 0.25);
  for (std::size_t P = 1; P <= 4; ++P) {
    const Vec agg = oracle::expected_aggregate_brute(e, p, P);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(agg(i), 0.25, 1e-15) << P;
  }
}

TEST(BruteAggregate, FullParticipationIsTheWeightedSum) {
  std::vector<Vec> c{v1(1.0), v1(2.0)};
  Vec p(2);
  p << 0.3, 0.7;
  EXPECT_NEAR(oracle::expected_aggregate_brute(c, p, 2)(0), 1.7, 1e-15);
  EXPECT_NEAR(oracle::expected_aggregate_brute(c, p, 1)(0), 1.7, 1e-15);
}

TEST(BruteAggregate, GuardsAgainstLargeN) {
  std::vector<Vec> c(13, v1(1.0));
  EXPECT_THROW(oracle::expected_aggregate_brute(c, Vec::Constant(13, 1.0 / 13), 2), ValidationError);
}
