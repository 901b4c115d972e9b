#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "fbo/cli.hpp"
#include "test_support.hpp"

using namespace fbo;
namespace fs = std::filesystem;

namespace {

constexpr const char* kCanonical = R"(# canonical 1-D problem
algorithm = simfbo
instance = canonical_1d
P = 1
T = 200
eta_y = 0.4
eta_v = 0.4
eta_x = 0.5
gamma_y = 0.4
gamma_v = 0.4
gamma_x = 0.5
seed = 3
)";

constexpr const char* kSynthetic = R"(algorithm = shrofbo
instance = synthetic
n = 4
d_x = 2
d_y = 3
instance_seed = 5
P = 2
T = 30
tau_profile = uniform
tau_lo = 1
tau_hi = 3
stepsize_preset = heterogeneous
noise = on
sigma_f = 0.1
sigma_g = 0.1
sigma_gg = 0.1
seed = 9
)";

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  std::vector<const char*> argv{"fbo"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::main_entry(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path write_file(const fs::path& dir, const std::string& name, const std::string& text) {
  const auto p = dir / name;
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, PresetSuppliesStepsizes) {
  const auto cfg = parse_config_string(kSynthetic);
  EXPECT_EQ(cfg.algorithm, Algorithm::kShroFBO);
  EXPECT_DOUBLE_EQ(cfg.steps.eta_y, 0.03);
  EXPECT_DOUBLE_EQ(cfg.steps.gamma_x, 0.01);
  EXPECT_TRUE(cfg.noise.enabled);
  EXPECT_EQ(cfg.tau, TauProfile::uniform(1, 3));
}

TEST(Config, UnknownAndDuplicateKeysAreRejected) {
  EXPECT_THROW(parse_config_string(std::string(kCanonical) + "colour = blue\n"), ValidationError);
  EXPECT_THROW(parse_config_string(std::string(kCanonical) + "T = 5\n"), ValidationError);
}

TEST(Config, MissingStepsizesAreRejected) {
  EXPECT_THROW(parse_config_string("algorithm = simfbo\ninstance = canonical_1d\nP = 1\nT = 5\n"), ValidationError);
}

TEST(Config, TextRoundTrip) {
  for (const char* text : {kCanonical, kSynthetic}) {
    const auto cfg = parse_config_string(text);
    EXPECT_EQ(parse_config_string(to_config_text(cfg)), cfg);
  }
}

TEST(Config, PLargerThanNNamesBoth) {
  try {
    parse_config_string(std::string(kSynthetic).replace(std::string(kSynthetic).find("P = 2"), 5, "P = 5"));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("P=5"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("n=4"), std::string::npos);
  }
}

TEST(Cli, MissingConfigIsAValidationError) {
  const auto r = invoke({"run", "--config", "/nonexistent/fbo.cfg"});
  EXPECT_EQ(r.code, cli::kExitValidation);
  EXPECT_NE(r.err.find("/nonexistent/fbo.cfg"), std::string::npos);
}

TEST(Cli, BadSubcommandIsAValidationError) {
  EXPECT_EQ(invoke({"frobnicate", "--config", "x"}).code, cli::kExitValidation);
  EXPECT_EQ(invoke({"run"}).code, cli::kExitValidation);
}

TEST(Cli, PLargerThanNExitsWithValidationCode) {
  const auto dir = fbo::testing::temp_dir("cli_p");
  std::string text = kSynthetic;
  text.replace(text.find("P = 2"), 5, "P = 5");
  const auto r = invoke({"run", "--config", write_file(dir, "c.cfg", text).string(), "--out", dir.string()});
  EXPECT_EQ(r.code, cli::kExitValidation);
  EXPECT_NE(r.err.find("P=5"), std::string::npos);
}

TEST(Cli, PrintConfigRoundTrips) {
  const auto dir = fbo::testing::temp_dir("cli_print");
  const auto r = invoke({"print-config", "--config", write_file(dir, "c.cfg", kSynthetic).string()});
  ASSERT_EQ(r.code, cli::kExitOk);
  EXPECT_EQ(parse_config_string(r.out), parse_config_string(kSynthetic));
}

TEST(Cli, CheckGradientsPassesOnCanonical) {
  const auto dir = fbo::testing::temp_dir("cli_check");
  const auto r = invoke({"check-gradients", "--config", write_file(dir, "c.cfg", kCanonical).string()});
  EXPECT_EQ(r.code, cli::kExitOk) << r.out << r.err;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_NE(r.out.find("PASS hypergrad_vs_finite_diff"), std::string::npos);
}

TEST(Cli, CheckGradientsPassesWhenEverythingIsZeroAtTheOrigin) {
  const auto dir = fbo::testing::temp_dir("cli_zero");
  BilevelInstance inst;
  inst.d_x = 2;
  inst.d_y = 2;
  ClientData c;
  c.A = Mat::Identity(2, 2);
  c.B = Mat::Zero(2, 2);
  c.c = Vec::Zero(2);
  c.D = Mat::Zero(2, 2);
  c.y_ref = Vec::Zero(2);
  c.E = Mat::Zero(2, 2);
  c.x_ref = Vec::Zero(2);
  inst.clients = {c};
  inst.p = Vec::Ones(1);
  save_instance(dir / "zero.inst", inst);
  const std::string cfg = "algorithm = simfbo\ninstance = file\ninstance_file = " + (dir / "zero.inst").string() +
                          "\nP = 1\nT = 1\nstepsize_preset = mnist_mlp\n";
  const auto r = invoke({"check-gradients", "--config", write_file(dir, "c.cfg", cfg).string()});
  EXPECT_EQ(r.code, cli::kExitOk) << r.out;
}

TEST(Cli, CheckGradientsFailsOnNonFiniteInstance) {
  const auto dir = fbo::testing::temp_dir("cli_nan");
  auto inst = canonical_1d_instance();
  inst.clients[0].B(0, 0) = std::numeric_limits<double>::quiet_NaN();
  save_instance(dir / "nan.inst", inst);
  const std::string cfg = "algorithm = simfbo\ninstance = file\ninstance_file = " + (dir / "nan.inst").string() +
                          "\nP = 1\nT = 1\nstepsize_preset = mnist_mlp\n";
  const auto r = invoke({"check-gradients", "--config", write_file(dir, "c.cfg", cfg).string()});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, RunWritesMetricsAndSummary) {
  const auto dir = fbo::testing::temp_dir("cli_run");
  const auto cfg = write_file(dir, "c.cfg", kCanonical);
  const auto r = invoke({"run", "--config", cfg.string(), "--out", (dir / "out").string(), "--quiet"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_TRUE(r.out.empty());
  EXPECT_FALSE(fs::exists(dir / "out" / "metrics.csv.partial"));
  const std::string csv = slurp(dir / "out" / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
  const auto summary = nlohmann::json::parse(slurp(dir / "out" / "summary.json"));
  EXPECT_EQ(summary["status"], "ok");
  EXPECT_EQ(summary["rounds"], 200);
  EXPECT_LT(summary["min_grad_phi_sq"].get<double>(), 1e-10);
  EXPECT_EQ(summary["projection_violations"], 0);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  const auto dir = fbo::testing::temp_dir("cli_repeat");
  const auto cfg = write_file(dir, "c.cfg", kSynthetic);
  ASSERT_EQ(invoke({"run", "--config", cfg.string(), "--out", (dir / "a").string(), "--quiet"}).code, 0);
  ASSERT_EQ(invoke({"run", "--config", cfg.string(), "--out", (dir / "b").string(), "--quiet"}).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  ASSERT_EQ(invoke({"run", "--config", cfg.string(), "--out", (dir / "c").string(), "--seed", "10", "--quiet"}).code, 0);
  EXPECT_NE(slurp(dir / "a" / "metrics.csv"), slurp(dir / "c" / "metrics.csv"));
}

TEST(Cli, DivergenceKeepsPartialMetricsAndNamesTheRound) {
  const auto dir = fbo::testing::temp_dir("cli_diverge");
  std::string text = kCanonical;
  text.replace(text.find("gamma_y = 0.4"), 13, "gamma_y = 10 ");
  text.replace(text.find("T = 200"), 7, "T = 2000");
  const auto r = invoke({"run", "--config", write_file(dir, "c.cfg", text).string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_FALSE(fs::exists(dir / "out" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "metrics.csv.partial"));
  const auto summary = nlohmann::json::parse(slurp(dir / "out" / "summary.json"));
  EXPECT_EQ(summary["status"], "diverged");
  const long round = summary["divergence_round"].get<long>();
  EXPECT_GE(round, 0);
  EXPECT_NE(r.err.find("round " + std::to_string(round)), std::string::npos);
}

TEST(Cli, SweepWritesOneCsvPerCellAndAnAggregate) {
  const auto dir = fbo::testing::temp_dir("cli_sweep");
  const std::string text = std::string(kSynthetic) + "sweep_param = P\nsweep_values = 2,4\nsweep_seeds = 1,2\n";
  const auto r = invoke({"sweep", "--config", write_file(dir, "c.cfg", text).string(), "--out", dir.string(), "--quiet"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  for (const char* v : {"2", "4"})
    for (const char* s : {"1", "2"})
      EXPECT_TRUE(fs::exists(dir / (std::string("sweep_P=") + v + "_seed=" + s + ".csv"))) << v << s;
  const std::string agg = slurp(dir / "sweep.csv");
  EXPECT_EQ(std::count(agg.begin(), agg.end(), '\n'), 3);
  const auto summary = nlohmann::json::parse(slurp(dir / "sweep_summary.json"));
  EXPECT_EQ(summary["cells"].size(), 2u);
}

TEST(Cli, SweepWithoutParameterIsRejected) {
  const auto dir = fbo::testing::temp_dir("cli_sweep_bad");
  const auto r = invoke({"sweep", "--config", write_file(dir, "c.cfg", kCanonical).string(), "--out", dir.string()});
  EXPECT_EQ(r.code, cli::kExitValidation);
}
