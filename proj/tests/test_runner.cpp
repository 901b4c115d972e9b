#include <gtest/gtest.h>

#include <sstream>

#include "fbo/runner.hpp"
#include "test_support.hpp"

using namespace fbo;

namespace {

RunConfig canonical_config(std::size_t T) {
  RunConfig cfg;
  cfg.instance.kind = InstanceSource::Kind::kCanonical1d;
  cfg.instance.spec.n = 1;
  cfg.P = 1;
  cfg.T = T;
  cfg.steps = {0.4, 0.4, 0.5, 0.4, 0.4, 0.5, 0.0};
  return cfg;
}

RunConfig noisy_synthetic_config() {
  RunConfig cfg;
  cfg.instance.spec = InstanceSpec{6, 3, 3, 1.0, 4.0, 0.7, WeightProfile::kRandom};
  cfg.instance.seed = 3;
  cfg.P = 3;
  cfg.T = 60;
  cfg.tau = TauProfile::uniform(1, 4);
  cfg.coef = {CoefficientSchedule::Kind::kGeometric, 0.5, 1.0, 0.8};
  cfg.steps = {0.05, 0.05, 0.05, 0.1, 0.1, 0.1, 0.0};
  cfg.noise = {0.1, 0.1, 0.1, true};
  cfg.seed = 21;
  return cfg;
}

std::string csv_of(const RunReport& rep) {
  std::ostringstream os;
  write_metrics_csv(os, rep.metrics);
  return os.str();
}

}  // namespace

TEST(Runner, CanonicalConvergesToStationaryPoint) {
  const auto rep = run(canonical_config(300));
  EXPECT_NEAR(rep.final_state.x(0), -2.0, 1e-6);
  EXPECT_LT(rep.metrics.back().grad_phi_sq, 1e-10);
  EXPECT_EQ(rep.metrics.size(), 301u);
}

TEST(Runner, ShroFboOnCanonicalAlsoConverges) {
  auto cfg = canonical_config(300);
  cfg.algorithm = Algorithm::kShroFBO;
  const auto rep = run(cfg);
  EXPECT_LT(rep.metrics.back().grad_phi_sq, 1e-10);
}

TEST(Runner, StartingAtStationaryTripleStaysPut) {
  auto cfg = canonical_config(5);
  cfg.x0 = {-2.0};
  cfg.y0 = {1.0};
  const auto rep = run(cfg);
  EXPECT_DOUBLE_EQ(rep.final_state.x(0), -2.0);
  EXPECT_DOUBLE_EQ(rep.final_state.y(0), 1.0);
  EXPECT_DOUBLE_EQ(rep.final_state.v(0), 0.0);
  for (const auto& row : rep.metrics) EXPECT_LT(row.grad_phi_sq, 1e-30);
}

TEST(Runner, RowZeroIsTheInitialState) {
  const auto rep = run(canonical_config(3));
  const auto& r0 = rep.metrics.front();
  EXPECT_EQ(r0.t, 0u);
  EXPECT_EQ(r0.samples, 0u);
  EXPECT_DOUBLE_EQ(r0.grad_phi_sq, 0.25);
  EXPECT_DOUBLE_EQ(r0.phi, 0.5);
  EXPECT_EQ(r0.max_local_v_norm, 0.0);
}

TEST(Runner, SampleAccounting) {
  auto cfg = noisy_synthetic_config();
  const auto rep = run(cfg);
  std::size_t expected = 0;
  const auto inst = resolve_instance(cfg);
  for (std::size_t t = 0; t < cfg.T; ++t) {
    const auto plan = plan_round(inst.n(), cfg.P, t, cfg.tau, cfg.seed);
    for (auto i : plan.selected) expected += kSamplesPerLocalStep * plan.tau[i];
  }
  EXPECT_EQ(rep.total_samples, expected);
  EXPECT_EQ(rep.metrics.back().samples, expected);
  for (std::size_t k = 1; k < rep.metrics.size(); ++k) EXPECT_GT(rep.metrics[k].samples, rep.metrics[k - 1].samples);
}

TEST(Runner, RunningMinimumIsNonincreasing) {
  const auto rep = run(noisy_synthetic_config());
  ASSERT_EQ(rep.running_min_grad_phi_sq.size(), rep.metrics.size());
  for (std::size_t k = 1; k < rep.metrics.size(); ++k) {
    EXPECT_LE(rep.running_min_grad_phi_sq[k], rep.running_min_grad_phi_sq[k - 1]);
    EXPECT_LE(rep.running_min_grad_phitilde_sq[k], rep.running_min_grad_phitilde_sq[k - 1]);
    EXPECT_LE(rep.running_min_grad_phi_sq[k], rep.metrics[k].grad_phi_sq);
  }
  EXPECT_EQ(rep.min_grad_phi_sq, rep.running_min_grad_phi_sq.back());
}

TEST(Runner, NoInvariantViolationsUnderNoise) {
  const auto rep = run(noisy_synthetic_config());
  EXPECT_EQ(rep.projection_violations, 0u);
  EXPECT_EQ(rep.local_v_violations, 0u);
  for (const auto& row : rep.metrics) EXPECT_LE(row.max_local_v_norm, rep.local_v_bound);
}

TEST(Runner, MetricsCadenceKeepsTheLastRound) {
  auto cfg = canonical_config(10);
  cfg.metrics_every = 4;
  const auto rep = run(cfg);
  std::vector<std::size_t> ts;
  for (const auto& r : rep.metrics) ts.push_back(r.t);
  EXPECT_EQ(ts, (std::vector<std::size_t>{0, 4, 8, 10}));
}

TEST(Runner, WorkerCountDoesNotChangeOutput) {
  const auto cfg = noisy_synthetic_config();
  const auto inst = resolve_instance(cfg);
  const std::string one = csv_of(run(cfg, inst, {1, {}, {}}));
  EXPECT_EQ(one, csv_of(run(cfg, inst, {4, {}, {}})));
  EXPECT_EQ(one, csv_of(run(cfg, inst, {3, {}, {}})));
}

TEST(Runner, SeedChangesNoisyTrajectory) {
  auto cfg = noisy_synthetic_config();
  const std::string a = csv_of(run(cfg));
  cfg.seed = 22;
  EXPECT_NE(a, csv_of(run(cfg)));
}

TEST(Runner, StreamedRowsMatchReport) {
  std::vector<MetricsRow> streamed;
  const auto rep = run(canonical_config(7), RunOptions{1, [&](const MetricsRow& r) { streamed.push_back(r); }, {}});
  ASSERT_EQ(streamed.size(), rep.metrics.size());
  for (std::size_t k = 0; k < streamed.size(); ++k) EXPECT_EQ(streamed[k].grad_phi_sq, rep.metrics[k].grad_phi_sq);
}

TEST(Runner, DivergenceReportsTheRound) {
  auto cfg = canonical_config(2000);
  cfg.steps.gamma_y = 10.0;
  try {
    run(cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.round(), 0);
    EXPECT_LT(e.round(), 2000);
    EXPECT_NE(std::string(e.what()).find("round " + std::to_string(e.round())), std::string::npos);
  }
}

TEST(Runner, RejectsPLargerThanN) {
  auto cfg = noisy_synthetic_config();
  cfg.P = 7;
  try {
    validate_config(cfg);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("P=7"), std::string::npos);
    EXPECT_NE(msg.find("n=6"), std::string::npos);
  }
}

TEST(Runner, ExpectedReweightingForUniformTaus) {
  Vec p(2);
  p << 0.5, 0.5;
  const auto w = expected_reweighting(p, TauProfile::listed({1, 5}), CoefficientSchedule{});
  EXPECT_NEAR(w[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(w[1], 5.0 / 6.0, 1e-15);
  const auto u = expected_reweighting(p, TauProfile::uniform(1, 3), CoefficientSchedule{});
  EXPECT_NEAR(u[0], 0.5, 1e-15);
}

TEST(Runner, DefaultGammaHeuristic) { EXPECT_DOUBLE_EQ(default_gamma_x(0.5, 4, 2.0, 50), 0.5 * std::sqrt(4.0 / 100.0)); }

TEST(Sweep, SingleFullParticipationCellMatchesPlainRun) {
  auto cfg = noisy_synthetic_config();
  cfg.T = 20;
  const auto inst = resolve_instance(cfg);
  const auto table = sweep(cfg, inst, "P", {6}, {cfg.seed});
  ASSERT_EQ(table.cells.size(), 1u);
  ASSERT_TRUE(table.cells[0].reports[0].has_value());
  auto plain = cfg;
  plain.P = 6;
  EXPECT_EQ(csv_of(*table.cells[0].reports[0]), csv_of(run(plain, inst)));
}

TEST(Sweep, SeedsOnlySweepGivesOneRunPerSeed) {
  auto cfg = noisy_synthetic_config();
  cfg.T = 10;
  const auto inst = resolve_instance(cfg);
  const auto table = sweep(cfg, inst, "T", {10}, {1, 2, 3});
  ASSERT_EQ(table.cells.size(), 1u);
  EXPECT_EQ(table.cells[0].reports.size(), 3u);
  std::vector<double> mins;
  for (const auto& r : table.cells[0].reports) mins.push_back(r->min_grad_phitilde_sq);
  EXPECT_DOUBLE_EQ(table.cells[0].min_grad_phitilde_sq.median, quartiles(mins).median);
}

TEST(Sweep, FailedRunIsRecordedAndSweepContinues) {
  auto cfg = canonical_config(50);
  const auto inst = resolve_instance(cfg);
  cfg.steps.gamma_y = 10.0;
  auto table = sweep(cfg, inst, "T", {1, 2000}, {0});
  ASSERT_EQ(table.cells.size(), 2u);
  EXPECT_TRUE(table.cells[0].reports[0].has_value());
  EXPECT_FALSE(table.cells[1].reports[0].has_value());
  EXPECT_FALSE(table.cells[1].errors[0].empty());
}

TEST(Sweep, SweepValueValidation) {
  const auto cfg = canonical_config(5);
  EXPECT_THROW(apply_sweep_value(cfg, "P", 1.5), ValidationError);
  EXPECT_THROW(apply_sweep_value(cfg, "gamma", 1), ValidationError);
  const auto s = apply_sweep_value(cfg, "sigma", 0.2);
  EXPECT_TRUE(s.noise.enabled);
  EXPECT_EQ(s.noise.sigma_gg, 0.2);
}

TEST(Quartiles, LinearInterpolation) {
  const auto q = quartiles({4, 1, 3, 2, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_DOUBLE_EQ(q.q1, 1.75);
  EXPECT_DOUBLE_EQ(q.median, 2.5);
  EXPECT_DOUBLE_EQ(q.q3, 3.25);
  EXPECT_TRUE(std::isnan(quartiles({}).median));
}
