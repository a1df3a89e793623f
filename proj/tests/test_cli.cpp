#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>

#include "rollcar/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("rollcar_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Runs the CLI with arguments; returns its exit status.
int run(const std::string& args) {
  const std::string cmd = std::string(ROLLCAR_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

std::string slurp(const std::string& p) { return rollcar::util::read_file(p); }

void expect_same_tree(const std::string& a, const std::string& b) {
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const auto other = fs::path(b) / e.path().filename();
    ASSERT_TRUE(fs::exists(other)) << other;
    EXPECT_EQ(slurp(e.path().string()), slurp(other.string())) << e.path().filename();
    ++files;
  }
  EXPECT_EQ(files, static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator{})));
}

// One simulated dataset shared by the fit tests.
const std::string& simulated() {
  static const std::string dir = [] {
    const auto d = path("sim");
    EXPECT_EQ(run("simulate --preset a --seed 3 --out " + d), 0);
    return d;
  }();
  return dir;
}

const std::string kShort = " --chains 2 --iters 300 --burnin 100";

}  // namespace

TEST(Cli, SimulateIsDeterministic) {
  const auto a = simulated(), b = path("sim_again");
  ASSERT_EQ(run("simulate --preset a --seed 3 --out " + b), 0);
  expect_same_tree(a, b);
  auto truth = json::parse(slurp(a + "/truth.json"));
  EXPECT_EQ(truth["beta0"].get<double>(), 15.0);
  auto m = json::parse(slurp(a + "/manifest.json"));
  EXPECT_EQ(m["command"], "simulate");
  EXPECT_EQ(m["sessions"], 245);
  EXPECT_EQ(m["seed"], 3);
}

TEST(Cli, UnknownPresetWritesNothing) {
  const auto d = path("bad_preset");
  EXPECT_EQ(run("simulate --preset z --seed 1 --out " + d), 1);
  EXPECT_FALSE(fs::exists(d));
}

TEST(Cli, FitOutputsAndManifestRerun) {
  const auto d = path("fit_lgm");
  ASSERT_EQ(run("fit --data " + simulated() + "/dataset.csv --model lgm --seed 5 --out " + d + kShort), 0);
  for (const char* f : {"chain_1.csv", "chain_2.csv", "summary.json", "summary.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(fs::path(d) / f)) << f;
  EXPECT_FALSE(fs::exists(fs::path(d) / "weights.csv"));
  auto s = json::parse(slurp(d + "/summary.json"));
  for (const auto& q : s["quantities"]) EXPECT_NE(q["name"].get<std::string>().rfind("gamma[", 0), 0u);

  const auto again = path("fit_lgm_again");
  ASSERT_EQ(run("fit --config " + d + "/manifest.json --out " + again), 0);
  expect_same_tree(d, again);
}

TEST(Cli, FitCarWritesWeights) {
  const auto d = path("fit_car");
  ASSERT_EQ(run("fit --data " + simulated() + "/dataset.csv --model car --seed 5 --out " + d + kShort), 0);
  EXPECT_TRUE(fs::exists(fs::path(d) / "weights.csv"));
  auto s = json::parse(slurp(d + "/summary.json"));
  std::size_t gammas = 0;
  for (const auto& q : s["quantities"]) gammas += q["name"].get<std::string>().rfind("gamma[", 0) == 0 ? 1 : 0;
  EXPECT_EQ(gammas, 245u);
}

TEST(Cli, ErrorsMapToExitCodes) {
  EXPECT_EQ(run("fit --data /nonexistent.csv --model lgm --out " + path("x1")), 2);
  EXPECT_FALSE(fs::exists(path("x1")));
  EXPECT_EQ(run("fit --data " + simulated() + "/dataset.csv --model glmm --out " + path("x2")), 1);
  EXPECT_EQ(run("fit --data " + simulated() + "/dataset.csv --model lgm --iters 10 --burnin 20 --out " + path("x3")),
            1);
  EXPECT_EQ(run("nosuchcommand"), 1);
}

TEST(Cli, CompareAndDiagnose) {
  const auto data = simulated() + "/dataset.csv";
  const auto lgm = path("cmp_lgm"), car = path("cmp_car");
  ASSERT_EQ(run("fit --data " + data + " --model lgm --seed 1 --out " + lgm + kShort), 0);
  ASSERT_EQ(run("fit --data " + data + " --model car --seed 1 --out " + car + kShort), 0);
  const auto out = path("cmp");
  ASSERT_EQ(run("compare " + lgm + "/summary.json " + car + "/summary.json --out " + out), 0);
  const auto table = slurp(out + "/comparison.csv");
  EXPECT_LT(table.find("\ncar,"), table.find("\nlgm,"));

  EXPECT_EQ(run("compare " + lgm + "/summary.json --out " + path("cmp1")), 1);

  const auto other = path("sim_other"), other_fit = path("fit_other");
  ASSERT_EQ(run("simulate --preset a --seed 4 --out " + other), 0);
  ASSERT_EQ(run("fit --data " + other + "/dataset.csv --model lgm --seed 1 --out " + other_fit + kShort), 0);
  EXPECT_EQ(run("compare " + lgm + "/summary.json " + other_fit + "/summary.json --out " + path("cmp2")), 1);

  const auto diag = path("diag");
  ASSERT_EQ(run("diagnose " + car + " --out " + diag), 0);
  const auto d = slurp(diag + "/diagnostics.csv");
  EXPECT_EQ(d.rfind("quantity,mean,sd,hpd_lo,hpd_hi,psrf\n", 0), 0u);
  EXPECT_NE(d.find("\nbeta1,"), std::string::npos);
  EXPECT_EQ(run("diagnose " + data + " --out " + path("diag_bad")), 2);
}

TEST(Cli, ReplicateIsByteIdentical) {
  const auto a = path("rep_a"), b = path("rep_b");
  const std::string args = "replicate --preset b --seed 2 --replicates 2 --models lgm,car --iters 120 --burnin 40";
  ASSERT_EQ(run(args + " --out " + a), 0);
  ASSERT_EQ(run(args + " --out " + b), 0);
  expect_same_tree(a, b);
  const auto table = slurp(a + "/table.csv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  EXPECT_EQ(run("replicate --preset b --seed 2 --replicates 1 --out " + path("rep_c")), 1);
}
