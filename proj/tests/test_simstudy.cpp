#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "rollcar/simstudy.hpp"

using namespace rollcar;

namespace {

SimScenario noiseless(Generator g) {
  auto sc = scenario_preset(g == Generator::LgmCar ? "a" : "d");
  sc.truth.sigma2_eps = 0.0;
  sc.truth.client_effect_var = 0.0;
  sc.truth.session_var = 0.0;
  return sc;
}

}  // namespace

TEST(Attendance, BrightTemplateBands) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    auto ds = generate_attendance(AttendanceTemplate::bright(), rng);
    EXPECT_EQ(ds.S(), 245u);
    EXPECT_EQ(ds.G(), 4u);
    EXPECT_GE(ds.n(), 119u);
    EXPECT_LE(ds.n(), 145u);
    EXPECT_GE(ds.observations.size(), 1326u);
    EXPECT_LE(ds.observations.size(), 1620u);
    int short_stay = 0;
    for (int c : ds.sessions_per_client()) short_stay += c < 8 ? 1 : 0;
    EXPECT_EQ(short_stay, 36);
    // every client enters at a module start; time advances half a week per session
    for (const auto& o : ds.observations) {
      EXPECT_GE(o.time_weeks, 0.0);
      EXPECT_LE(o.time_weeks, 7.5);
    }
  }
}

TEST(Attendance, NoDropoutNoMisses) {
  AttendanceTemplate t;
  t.groups = {16};
  t.module_length = 16;
  t.target_clients = 3;
  t.entry_capacity = 3;
  t.dropout_hazard = 0.0;
  t.miss_probability = 0.0;
  t.short_stay_clients.reset();
  Rng rng(4);
  auto ds = generate_attendance(t, rng);
  ASSERT_EQ(ds.n(), 3u);
  for (int c : ds.sessions_per_client()) EXPECT_EQ(c, 16);
  std::set<double> times;
  for (const auto& o : ds.observations) times.insert(o.time_weeks);
  EXPECT_EQ(*times.begin(), 0.0);
  EXPECT_EQ(*times.rbegin(), 7.5);
  EXPECT_EQ(times.size(), 16u);
}

TEST(Attendance, Deterministic) {
  Rng a(9), b(9), c(10);
  auto t = AttendanceTemplate::bright();
  const auto da = format_dataset(generate_attendance(t, a));
  EXPECT_EQ(da, format_dataset(generate_attendance(t, b)));
  EXPECT_NE(da, format_dataset(generate_attendance(t, c)));
}

TEST(Attendance, Infeasible) {
  AttendanceTemplate t;
  t.target_clients = 1000;
  Rng rng(1);
  EXPECT_THROW(generate_attendance(t, rng), ValidationError);

  AttendanceTemplate u;
  u.dropout_hazard = 0.0;
  u.miss_probability = 0.0;
  u.short_stay_clients = 132;
  u.max_attempts = 3;
  EXPECT_THROW(generate_attendance(u, rng), ValidationError);

  AttendanceTemplate v;
  v.miss_probability = 1.0;
  EXPECT_THROW(v.validate(), ConfigError);
}

TEST(Attendance, TemplateJsonRoundTrip) {
  auto t = AttendanceTemplate::bright();
  t.short_stay_clients.reset();
  t.groups = {8, 12};
  auto back = template_from_json(template_to_json(t));
  EXPECT_EQ(template_to_json(back).dump(), template_to_json(t).dump());
  EXPECT_FALSE(back.short_stay_clients);
}

TEST(SessionCovariance, Structure) {
  auto ds = testing_helpers::plan_dataset({3, 2}, {{0, 1, 3}, {1, 1, 2}});
  auto c0 = session_covariance(0.0, ds).dense(ds.S());
  EXPECT_TRUE(c0.isApprox(Eigen::MatrixXd::Identity(5, 5)));
  auto c = session_covariance(0.5, ds);
  auto d = c.dense(ds.S());
  Eigen::MatrixXd want(5, 5);
  want << 1, .5, .25, 0, 0,  //
      .5, 1, .5, 0, 0,       //
      .25, .5, 1, 0, 0,      //
      0, 0, 0, 1, .5,        //
      0, 0, 0, .5, 1;
  EXPECT_TRUE(d.isApprox(want, 1e-15));
  EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(d).info(), Eigen::Success);
  EXPECT_THROW(session_covariance(1.0, ds), ConfigError);
  EXPECT_THROW(session_covariance(-0.1, ds), ConfigError);
}

TEST(Outcomes, NoiselessGrowthCurve) {
  auto sc = noiseless(Generator::LgmCar);
  auto sim = simulate_replicate(sc, 3, 0);
  for (const auto& o : sim.dataset.observations) EXPECT_NEAR(*o.outcome, 15.0 - 0.5 * o.time_weeks, 1e-12);
}

TEST(Outcomes, NoiselessPatternMixture) {
  auto sc = noiseless(Generator::PmmCar);
  auto sim = simulate_replicate(sc, 3, 0);
  const auto& ds = sim.dataset;
  ASSERT_TRUE(ds.has_patterns());
  bool seen1 = false, seen0 = false;
  for (const auto& o : ds.observations) {
    if (o.time_weeks != 0.0) continue;
    if (*ds.clients[o.client].pattern == 1) {
      EXPECT_NEAR(*o.outcome, 45.29, 0.01);
      seen1 = true;
    } else {
      EXPECT_NEAR(*o.outcome, 15.0 - 0.273 * 41.67, 1e-9);
      seen0 = true;
    }
  }
  EXPECT_TRUE(seen1 && seen0);
  auto truth = truth_to_json(sc);
  EXPECT_NEAR(truth["beta0_star"].get<double>() + 0.273 * 41.67, 15.0, 1e-12);
  EXPECT_NEAR(truth["beta1_star"].get<double>() + 0.273 * -1.83, -0.5, 1e-12);
}

TEST(Outcomes, SessionEffectLagOneCorrelation) {
  auto skeleton = testing_helpers::plan_dataset({40}, {{0, 1, 40}});
  auto sc = scenario_preset("c");
  ASSERT_DOUBLE_EQ(sc.rho, 0.5);
  double sxy = 0.0, sxx = 0.0;
  Rng rng(11);
  for (int rep = 0; rep < 200; ++rep) {
    auto sim = generate_outcomes(skeleton, sc, rng);
    for (std::size_t s = 0; s + 1 < sim.gamma.size(); ++s) {
      sxy += sim.gamma[s] * sim.gamma[s + 1];
      sxx += sim.gamma[s] * sim.gamma[s];
    }
  }
  EXPECT_NEAR(sxy / sxx, 0.5, 0.03);
}

TEST(Outcomes, EveryOtherSessionMask) {
  EXPECT_TRUE(measured_by_design(1, 4, false));
  EXPECT_FALSE(measured_by_design(2, 4, false));
  EXPECT_TRUE(measured_by_design(3, 4, false));
  EXPECT_FALSE(measured_by_design(4, 4, false));
  EXPECT_TRUE(measured_by_design(5, 4, false));
  EXPECT_TRUE(measured_by_design(4, 4, true));

  auto sc = scenario_preset("a");
  sc.mask_every_other = true;
  auto sim = simulate_replicate(sc, 5, 1);
  const auto& ds = sim.dataset;
  std::vector<double> last(ds.n(), -1.0);
  for (const auto& o : ds.observations) last[o.client] = std::max(last[o.client], o.time_weeks);
  std::size_t missing = 0;
  for (const auto& o : ds.observations) {
    const bool measured = measured_by_design(ds.sessions[o.session].order, 4, o.time_weeks == last[o.client]);
    EXPECT_EQ(o.outcome.has_value(), measured);
    missing += o.outcome ? 0 : 1;
  }
  EXPECT_GT(missing, 0u);
  EXPECT_EQ(missing, ds.missing_cells().size());
}

TEST(Presets, Panels) {
  for (const auto& n : scenario_preset_names()) {
    auto sc = scenario_preset(n);
    EXPECT_EQ(sc.analysis_models.size(), 5u);
    EXPECT_EQ(sc.replicates, 20);
  }
  EXPECT_EQ(scenario_preset("b").rho, 0.25);
  EXPECT_EQ(scenario_preset("e").generator, Generator::PmmCar);
  EXPECT_EQ(scenario_preset("a").analysis_models[4].name(), "car+pmm");
  EXPECT_THROW(scenario_preset("z"), ConfigError);
}

TEST(RunScenario, ShapeAndDeterminism) {
  auto sc = scenario_preset("d");
  sc.replicates = 2;
  sc.analysis_models = {ModelSpec::from_name("lgm"), ModelSpec::from_name("car+pmm")};
  McmcConfig cfg = desk_scale_mcmc(7);
  cfg.n_iter = 150;
  cfg.burn_in = 50;
  auto t = run_scenario(sc, cfg);
  ASSERT_EQ(t.rows.size(), 2u);
  ASSERT_EQ(t.fits.size(), 2u);
  EXPECT_EQ(t.rows[1].model, "car+pmm");
  EXPECT_EQ(t.rows[0].used, 2u);
  const auto table = format_replication_table(t);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  const auto reps = format_replicate_fits(t);
  EXPECT_EQ(std::count(reps.begin(), reps.end(), '\n'), 5);
  EXPECT_NEAR(t.rows[0].mean_b0.mean, 0.5 * (t.fits[0][0].mean_b0 + t.fits[1][0].mean_b0), 1e-12);
  EXPECT_EQ(format_replicate_fits(run_scenario(sc, cfg, 2)), reps);

  sc.replicates = 1;
  EXPECT_THROW(run_scenario(sc, cfg), ConfigError);
}
