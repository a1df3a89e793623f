// End-to-end acceptance checks.  Prints one PASS/FAIL line per criterion
// and exits nonzero if any fails.
//
//   acceptance [--workdir DIR]

#include <sys/wait.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rollcar/diagnostics.hpp"
#include "rollcar/simstudy.hpp"

namespace fs = std::filesystem;
using namespace rollcar;

namespace {

fs::path g_work;

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ROLLCAR_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(util::read_file(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

double num(const std::string& s) {
  auto v = util::parse_double(s);
  if (!v) throw IoError("not a number: '" + s + "'");
  return *v;
}

// table.csv row -> (mean_b0, mcse, sd_b0, mcse, mean_b1, mcse, sd_b1, mcse, dbar, mcse)
std::map<std::string, std::vector<double>> read_table(const fs::path& dir) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& r : read_csv((dir / "table.csv").string())) {
    std::vector<double> v;
    for (std::size_t k = 1; k < r.size(); ++k) v.push_back(num(r[k]));
    out[r[0]] = v;
  }
  return out;
}

enum Col { MeanB0 = 0, SdB0 = 2, MeanB1 = 4, Dbar = 8 };

// Replicate run of a preset through the CLI (cached per preset and tag).
fs::path replicate_run(const std::string& preset, const std::string& tag) {
  const auto dir = g_work / ("replicate_" + preset + "_" + tag);
  if (!fs::exists(dir / "manifest.json")) {
    fs::remove_all(dir);
    const int rc = run_cli("replicate --preset " + preset + " --seed 7 --out " + dir.string());
    if (rc != 0) throw IoError("replicate --preset " + preset + " exited with status " + std::to_string(rc));
  }
  return dir;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

struct Result {
  bool pass;
  std::string detail;
};

// ---- criteria ----------------------------------------------------------

Result c1_car_recovery() {
  auto t = read_table(replicate_run("a", "1"));
  const auto& car = t.at("car");
  const bool ok = std::abs(car[MeanB0] - 15.0) <= 0.10 && std::abs(car[MeanB1] + 0.5) <= 0.03;
  return {ok, "car beta0 " + fmt(car[MeanB0]) + ", beta1 " + fmt(car[MeanB1])};
}

Result c2_sd_ordering() {
  std::map<std::string, std::map<std::string, double>> sd;  // replicate -> model -> sd_b0
  for (const auto& r : read_csv((replicate_run("a", "1") / "replicates.csv").string()))
    if (r[2] == "1") sd[r[0]][r[1]] = num(r[4]);
  int ordered = 0;
  for (auto& [rep, m] : sd)
    if (m.count("lgm") && m.count("hlm") && m.count("car") && m["lgm"] < m["hlm"] && m["hlm"] < m["car"]) ++ordered;
  return {ordered >= 16, std::to_string(ordered) + " of " + std::to_string(sd.size()) + " replicates ordered"};
}

Result c3_dbar_ordering() {
  auto t = read_table(replicate_run("a", "1"));
  auto d = [&](const char* m) { return t.at(m)[Dbar]; };
  auto se = [&](const char* m) { return t.at(m)[Dbar + 1]; };
  bool ok = std::abs(d("lgm") - d("pmm")) <= 2.0 * std::max(se("lgm"), se("pmm"));
  for (const char* lo : {"hlm", "car", "car+pmm"})
    for (const char* hi : {"lgm", "pmm"}) ok = ok && d(hi) - d(lo) > 5.0 * std::max(se(hi), se(lo));
  std::string detail;
  for (const char* m : {"lgm", "hlm", "car", "pmm", "car+pmm"})
    detail += std::string(detail.empty() ? "" : ", ") + m + " " + fmt(d(m)) + " (" + fmt(se(m)) + ")";
  return {ok, "Dbar " + detail};
}

Result c4_pattern_mixture_bias() {
  auto t = read_table(replicate_run("d", "1"));
  bool ok = true;
  std::string detail;
  for (const char* m : {"lgm", "hlm", "car"}) {
    ok = ok && std::abs(t.at(m)[MeanB1]) < 0.40;
    detail += std::string(m) + " " + fmt(t.at(m)[MeanB1]) + ", ";
  }
  const double cp = t.at("car+pmm")[MeanB1];
  ok = ok && std::abs(cp + 0.5) <= 0.05;
  return {ok, "beta1 " + detail + "car+pmm " + fmt(cp)};
}

Result c5_conjugate_oracle() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto data = simulate_replicate(scenario_preset("a"), seed, 0).dataset;
    auto spec = ModelSpec::from_name("lgm");
    spec.client_effects = false;
    spec.fixed_sigma2_eps = 2.0;
    McmcConfig cfg;
    cfg.n_iter = 4000;
    cfg.burn_in = 100;
    cfg.seed = seed;
    cfg.monitor = {};
    auto ps = run_chains(data, spec, cfg);
    Eigen::Matrix2d prec = Eigen::Matrix2d::Zero();
    Eigen::Vector2d rhs = Eigen::Vector2d::Zero();
    for (const auto& o : data.observations) {
      Eigen::Vector2d x(1.0, o.time_weeks);
      prec += x * x.transpose() / 2.0;
      rhs += x * *o.outcome / 2.0;
    }
    prec(0, 0) += 1.0 / spec.hyper.sigma2_beta0;
    prec(1, 1) += 1.0 / spec.hyper.sigma2_beta1;
    const Eigen::Matrix2d cov = prec.inverse();
    const Eigen::Vector2d mean = cov * rhs;
    int k = 0;
    for (const char* name : {"beta0", "beta1"}) {
      auto d = ps.pooled(name);
      const double n = static_cast<double>(d.size());
      double m = 0.0, v = 0.0;
      for (double x : d) m += x;
      m /= n;
      for (double x : d) v += (x - m) * (x - m);
      v /= n - 1.0;
      worst = std::max(worst, std::abs(m - mean[k]) / std::sqrt(cov(k, k) / n));
      worst = std::max(worst, std::abs(v - cov(k, k)) / (std::sqrt(2.0 / n) * cov(k, k)));
      ++k;
    }
  }
  return {worst <= 3.0, "largest deviation " + fmt(worst) + " Monte Carlo SEs"};
}

Result c6_car_conditional() {
  Rng rng(606);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t S = 2 + rng.index(5);
    std::vector<Edge> edges;
    for (std::size_t a = 0; a < S; ++a)
      for (std::size_t b = a + 1; b < S; ++b)
        if (rng.uniform() < 0.6) edges.push_back({a, b, 0.2 + rng.uniform()});
    if (edges.empty()) edges.push_back({0, 1, 1.0});
    std::vector<std::string> labels;
    std::vector<std::size_t> groups(S, 0), uos(S);
    for (std::size_t s = 0; s < S; ++s) {
      labels.push_back(std::to_string(s));
      uos[s] = s;
    }
    SessionGraph g(ClusterUnit::Session, labels, groups, uos, edges);
    const double delta = 0.3 + 2.0 * rng.uniform();
    std::vector<double> u(S);
    for (auto& x : u) x = rng.normal(0.0, 2.0);
    // Schur complement of the proper field with precision (D - W) / delta + I
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(S, S);
    for (const auto& e : edges) {
      Q(e.a, e.b) -= e.w / delta;
      Q(e.b, e.a) -= e.w / delta;
      Q(e.a, e.a) += e.w / delta;
      Q(e.b, e.b) += e.w / delta;
    }
    const Eigen::MatrixXd Sigma = (Q + Eigen::MatrixXd::Identity(S, S)).inverse();
    for (std::size_t s = 0; s < S; ++s) {
      auto m = car_conditional(s, u, g, delta);
      if (!m) continue;
      std::vector<Eigen::Index> rest;
      for (std::size_t j = 0; j < S; ++j)
        if (j != s) rest.push_back(static_cast<Eigen::Index>(j));
      const auto r = static_cast<Eigen::Index>(rest.size());
      Eigen::MatrixXd Srr(r, r);
      Eigen::VectorXd Ssr(r), ur(r);
      for (Eigen::Index a = 0; a < r; ++a) {
        Ssr[a] = Sigma(s, rest[a]);
        ur[a] = u[rest[a]];
        for (Eigen::Index b = 0; b < r; ++b) Srr(a, b) = Sigma(rest[a], rest[b]);
      }
      const Eigen::VectorXd k = Srr.ldlt().solve(Ssr);
      const double prec = 1.0 / (Sigma(s, s) - Ssr.dot(k)) - 1.0;
      const double mean = k.dot(ur) * (prec + 1.0) / prec;
      worst = std::max(worst, std::abs(m->variance * prec - 1.0));
      worst = std::max(worst, std::abs(m->mean - mean) / std::max(1.0, std::abs(mean)));
    }
  }
  return {worst <= 1e-10, "largest relative error " + fmt(worst)};
}

Result c7_recentering() {
  auto data = simulate_replicate(scenario_preset("a"), 7, 0).dataset;
  auto cfg = desk_scale_mcmc(7);
  cfg.track_recentering = true;
  auto ps = run_chains(data, ModelSpec::from_name("car"), cfg);
  return {ps.max_recenter_change <= 1e-10, "largest predictor change " + fmt(ps.max_recenter_change)};
}

Result c8_diagnostics_calibration() {
  Rng rng(808);
  // PSRF on independent draws, and the identical-chain value
  std::vector<std::vector<double>> chains(4, std::vector<double>(2000));
  for (auto& c : chains)
    for (auto& x : c) x = rng.normal();
  const double r = gelman_rubin(chains).value;
  const double same = gelman_rubin({chains[0], chains[0]}).value;
  bool ok = r >= 0.99 && r <= 1.05 && std::abs(same - std::sqrt(1999.0 / 2000.0)) < 1e-12;
  // HPD of a standard normal and of a known discrete sample
  std::vector<double> z(40000);
  for (auto& x : z) x = rng.normal();
  auto [lo, hi] = hpd_interval(z, 0.95);
  std::vector<double> seq;
  for (int i = 1; i <= 100; ++i) seq.push_back(i);
  ok = ok && std::abs(lo + 1.96) < 0.1 && std::abs(hi - 1.96) < 0.1 &&
       hpd_interval(seq, 0.95) == std::make_pair(1.0, 95.0);
  // Dbar is the draw mean; pD of a 2-parameter fixed-variance model near 2
  auto data = simulate_replicate(scenario_preset("a"), 8, 0).dataset;
  auto spec = ModelSpec::from_name("lgm");
  spec.client_effects = false;
  spec.fixed_sigma2_eps = 2.0;
  McmcConfig cfg;
  cfg.n_iter = 4000;
  cfg.burn_in = 100;
  cfg.monitor = {};
  auto ps = run_chains(data, spec, cfg);
  auto s = summarize(ps, data);
  auto dev = ps.pooled("deviance");
  double m = 0.0;
  for (double d : dev) m += d;
  m /= static_cast<double>(dev.size());
  ok = ok && std::abs(s.deviance.dbar - m) <= 1e-9 * std::abs(m) && std::abs(s.deviance.pd - 2.0) <= 0.4;
  return {ok, "psrf " + fmt(r) + ", hpd [" + fmt(lo) + ", " + fmt(hi) + "], pD " + fmt(s.deviance.pd)};
}

Result c9_imputation_coverage() {
  auto data = simulate_replicate(scenario_preset("a"), 9, 0).dataset;
  Rng rng(909);
  std::map<std::size_t, double> truth;
  for (std::size_t k = 0; k < data.observations.size(); ++k)
    if (rng.uniform() < 0.10) {
      truth[k] = *data.observations[k].outcome;
      data.observations[k].outcome.reset();
    }
  auto cfg = desk_scale_mcmc(9);
  cfg.monitor = {"imputed"};
  auto ps = run_chains(data, ModelSpec::from_name("car"), cfg);
  std::size_t covered = 0;
  for (const auto& [k, y] : truth) {
    auto d = ps.pooled("y_missing[" + std::to_string(k) + "]");
    double m = 0.0, v = 0.0;
    for (double x : d) m += x;
    m /= static_cast<double>(d.size());
    for (double x : d) v += (x - m) * (x - m);
    v /= static_cast<double>(d.size() - 1);
    if (std::abs(y - m) <= 3.0 * std::sqrt(v)) ++covered;
  }
  const double frac = static_cast<double>(covered) / static_cast<double>(truth.size());
  return {frac >= 0.95, std::to_string(covered) + " of " + std::to_string(truth.size()) + " masked cells covered"};
}

Result c10_reproducible_replicate() {
  const auto a = replicate_run("a", "1"), b = replicate_run("a", "2");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const auto other = b / e.path().filename();
    if (!fs::exists(other) || util::read_file(e.path().string()) != util::read_file(other.string()))
      return {false, e.path().filename().string() + " differs"};
    ++files;
  }
  const auto nb = static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator{}));
  return {files == nb, std::to_string(files) + " files byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  g_work = fs::temp_directory_path() / "rollcar_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--workdir DIR]\n";
      return 2;
    }
  }
  // start clean so every run exercises the CLI end to end
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Result()>>> criteria = {
      {"car recovers intercept and slope (scenario a)", c1_car_recovery},
      {"posterior SD ordering lgm < hlm < car", c2_sd_ordering},
      {"Dbar separates models without session effects", c3_dbar_ordering},
      {"pattern mixture removes slope bias (scenario d)", c4_pattern_mixture_bias},
      {"conjugate linear-model oracle", c5_conjugate_oracle},
      {"CAR conditional matches dense oracle", c6_car_conditional},
      {"recentering leaves predictors unchanged", c7_recentering},
      {"PSRF, HPD and Dbar calibration", c8_diagnostics_calibration},
      {"masked outcomes covered by imputation", c9_imputation_coverage},
      {"replicate runs are byte-identical", c10_reproducible_replicate},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Result r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    if (!r.pass) ++failed;
    std::cout << (r.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << r.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
