#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "rollcar/data.hpp"
#include "rollcar/diagnostics.hpp"
#include "rollcar/error.hpp"
#include "rollcar/models.hpp"
#include "rollcar/rng.hpp"
#include "rollcar/sampler.hpp"
#include "rollcar/util.hpp"

namespace rollcar {

// Rolling-admission attendance process.  Clients enter at the first
// session of a module, stay for up to sessions_per_client offered
// sessions, may drop out at each later module boundary, and miss
// individual sessions while enrolled.
struct AttendanceTemplate {
  std::vector<int> groups = {36, 40, 40, 129};
  int module_length = 4;
  int sessions_per_client = 16;
  int sessions_per_week = 2;
  int target_clients = 132;
  int entry_capacity = 6;  // most clients admitted at one module start
  double dropout_hazard = 0.17;
  double miss_probability = 0.035;
  // When set, attendance is redrawn until exactly this many clients attend
  // fewer than short_stay_threshold sessions.
  std::optional<int> short_stay_clients = 36;
  int short_stay_threshold = 8;
  int max_attempts = 10000;

  // Calibrated so that about 73% of clients attend at least 8 sessions
  // (96 of 132 with the exact short-stay count) and about 45% attend 13 or
  // more; the design carries roughly 1430-1480 observations.
  static AttendanceTemplate bright() { return AttendanceTemplate{}; }

  void validate() const {
    if (groups.empty()) throw ConfigError("attendance template has no groups");
    for (int g : groups)
      if (g < 1) throw ConfigError("group session counts must be positive");
    if (module_length < 1 || sessions_per_client < 1 || sessions_per_week < 1 || target_clients < 1 ||
        entry_capacity < 1)
      throw ConfigError("attendance template counts must be positive");
    if (dropout_hazard < 0.0 || dropout_hazard > 1.0 || miss_probability < 0.0 || miss_probability >= 1.0)
      throw ConfigError("attendance probabilities out of range");
    if (short_stay_clients && (*short_stay_clients < 0 || *short_stay_clients > target_clients))
      throw ConfigError("short_stay_clients must lie in [0, target_clients]");
    if (short_stay_threshold < 1 || max_attempts < 1) throw ConfigError("attendance template counts must be positive");
  }
};

inline nlohmann::json template_to_json(const AttendanceTemplate& t) {
  return {{"groups", t.groups},
          {"module_length", t.module_length},
          {"sessions_per_client", t.sessions_per_client},
          {"sessions_per_week", t.sessions_per_week},
          {"target_clients", t.target_clients},
          {"entry_capacity", t.entry_capacity},
          {"dropout_hazard", t.dropout_hazard},
          {"miss_probability", t.miss_probability},
          {"short_stay_clients", t.short_stay_clients ? nlohmann::json(*t.short_stay_clients) : nlohmann::json(nullptr)},
          {"short_stay_threshold", t.short_stay_threshold},
          {"max_attempts", t.max_attempts}};
}

inline AttendanceTemplate template_from_json(const nlohmann::json& j) {
  AttendanceTemplate t;
  t.groups = j.value("groups", t.groups);
  t.module_length = j.value("module_length", t.module_length);
  t.sessions_per_client = j.value("sessions_per_client", t.sessions_per_client);
  t.sessions_per_week = j.value("sessions_per_week", t.sessions_per_week);
  t.target_clients = j.value("target_clients", t.target_clients);
  t.entry_capacity = j.value("entry_capacity", t.entry_capacity);
  t.dropout_hazard = j.value("dropout_hazard", t.dropout_hazard);
  t.miss_probability = j.value("miss_probability", t.miss_probability);
  if (j.contains("short_stay_clients")) {
    if (j.at("short_stay_clients").is_null()) t.short_stay_clients.reset();
    else t.short_stay_clients = j.at("short_stay_clients").get<int>();
  }
  t.short_stay_threshold = j.value("short_stay_threshold", t.short_stay_threshold);
  t.max_attempts = j.value("max_attempts", t.max_attempts);
  t.validate();
  return t;
}

namespace detail {

inline Dataset draw_attendance(const AttendanceTemplate& tpl, Rng& rng) {
  struct Entry {
    int group;
    int order;
  };
  std::vector<Entry> entries;
  for (int g = 0; g < static_cast<int>(tpl.groups.size()); ++g)
    for (int o = 1; o <= tpl.groups[g]; o += tpl.module_length) entries.push_back({g, o});
  const int E = static_cast<int>(entries.size());
  const int base = tpl.target_clients / E;
  const int extra = tpl.target_clients % E;
  if (base + (extra > 0 ? 1 : 0) > tpl.entry_capacity)
    throw ValidationError("infeasible attendance template: " + std::to_string(tpl.target_clients) +
                          " clients over " + std::to_string(E) + " module starts exceeds capacity " +
                          std::to_string(tpl.entry_capacity) + " per module");
  std::vector<int> entrants(E, base);
  {
    std::vector<int> idx(E);
    std::iota(idx.begin(), idx.end(), 0);
    for (int k = 0; k < extra; ++k) {
      const auto j = k + static_cast<int>(rng.index(static_cast<std::size_t>(E - k)));
      std::swap(idx[k], idx[j]);
      ++entrants[idx[k]];
    }
  }

  auto session_id = [](int g, int o) { return "g" + std::to_string(g + 1) + "s" + std::to_string(o); };
  std::vector<SessionRecord> sessions;
  for (int g = 0; g < static_cast<int>(tpl.groups.size()); ++g)
    for (int o = 1; o <= tpl.groups[g]; ++o)
      sessions.push_back({session_id(g, o), std::to_string(g + 1), o, (o - 1) / tpl.module_length + 1});

  struct Attend {
    int client;
    int group;
    int order;
    int entry;
  };
  std::vector<Attend> attended;
  std::vector<ClientRecord> clients;
  // session -> clients who entered at its module start
  std::map<std::pair<int, int>, std::vector<int>> module_entrants;
  int next_client = 0;
  for (int e = 0; e < E; ++e) {
    const auto [g, start] = entries[e];
    for (int k = 0; k < entrants[e]; ++k) {
      const int c = next_client++;
      clients.push_back({"c" + std::to_string(c + 1), {}, std::nullopt});
      module_entrants[{g, start}].push_back(c);
      const int last = std::min(start + tpl.sessions_per_client - 1, tpl.groups[g]);
      for (int o = start; o <= last; ++o) {
        const int pos = o - start;
        if (pos > 0 && pos % tpl.module_length == 0 && rng.bernoulli(tpl.dropout_hazard)) break;
        if (pos == 0 || !rng.bernoulli(tpl.miss_probability)) attended.push_back({c, g, o, start});
      }
    }
  }
  // every session keeps at least one attendee: the clients admitted at its
  // module start are still enrolled during their first module
  {
    std::map<std::pair<int, int>, int> count;
    for (const auto& a : attended) ++count[{a.group, a.order}];
    for (int g = 0; g < static_cast<int>(tpl.groups.size()); ++g) {
      for (int o = 1; o <= tpl.groups[g]; ++o) {
        if (count[{g, o}] > 0) continue;
        const int start = o - (o - 1) % tpl.module_length;
        for (int c : module_entrants[{g, start}]) attended.push_back({c, g, o, start});
      }
    }
  }
  std::vector<ObservationRecord> obs;
  obs.reserve(attended.size());
  for (const auto& a : attended)
    obs.push_back({clients[a.client].id, session_id(a.group, a.order),
                   static_cast<double>(a.order - a.entry) / tpl.sessions_per_week, std::nullopt});
  return build_dataset(std::move(sessions), std::move(clients), obs, {});
}

}  // namespace detail

// Dataset with attendance and times but no outcomes.
inline Dataset generate_attendance(const AttendanceTemplate& tpl, Rng& rng) {
  tpl.validate();
  for (int attempt = 0; attempt < tpl.max_attempts; ++attempt) {
    Dataset ds = detail::draw_attendance(tpl, rng);
    if (!tpl.short_stay_clients) return ds;
    int short_stay = 0;
    for (int c : ds.sessions_per_client()) short_stay += c < tpl.short_stay_threshold ? 1 : 0;
    if (short_stay == *tpl.short_stay_clients) return ds;
  }
  throw ValidationError("attendance template could not reach " + std::to_string(*tpl.short_stay_clients) +
                        " short-stay clients in " + std::to_string(tpl.max_attempts) + " attempts");
}

// Block-diagonal AR(1) covariance of the session effects: within a group,
// Cov(g_s, g_j) = rho^|order(s) - order(j)|.
struct SessionCovariance {
  std::vector<std::vector<std::size_t>> blocks;  // session indices per group
  std::vector<Eigen::MatrixXd> matrices;

  Eigen::MatrixXd dense(std::size_t S) const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(S, S);
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (std::size_t i = 0; i < blocks[b].size(); ++i)
        for (std::size_t j = 0; j < blocks[b].size(); ++j) m(blocks[b][i], blocks[b][j]) = matrices[b](i, j);
    return m;
  }
};

inline SessionCovariance session_covariance(double rho, const Dataset& ds) {
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("session correlation rho must lie in [0, 1)");
  SessionCovariance out;
  out.blocks.assign(ds.G(), {});
  for (std::size_t s = 0; s < ds.S(); ++s) out.blocks[ds.sessions[s].group].push_back(s);
  for (const auto& block : out.blocks) {
    const auto m = block.size();
    Eigen::MatrixXd c(m, m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const int lag = std::abs(ds.sessions[block[i]].order - ds.sessions[block[j]].order);
        c(i, j) = lag == 0 ? 1.0 : std::pow(rho, lag);
      }
    out.matrices.push_back(std::move(c));
  }
  return out;
}

enum class Generator { LgmCar, PmmCar };

struct Truth {
  double beta0 = 15.0;
  double beta1 = -0.5;
  double client_effect_var = 0.25;  // both b0 and b1, independent
  double sigma2_eps = 1.0;
  double session_var = 1.0;
  double Delta0 = 41.67;
  double Delta1 = -1.83;
  double pi = 0.273;
  int pattern_threshold = 8;
};

struct SimScenario {
  std::string name;
  Generator generator = Generator::LgmCar;
  double rho = 0.0;
  Truth truth;
  AttendanceTemplate attendance;
  int replicates = 20;
  std::vector<ModelSpec> analysis_models;
  bool mask_every_other = false;
};

inline std::vector<std::string> scenario_preset_names() { return {"a", "b", "c", "d", "e", "f"}; }

// Panels of the model-comparison study: a-c generate from the growth model
// with correlated session effects (rho 0, .25, .5), d-f add two known
// missing-data patterns.  All five analysis models use Type 1 closeness
// and hyperparameter choice 7.
inline SimScenario scenario_preset(const std::string& name) {
  const auto names = scenario_preset_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("unknown scenario preset '" + name + "' (expected one of a, b, c, d, e, f)");
  const auto idx = static_cast<int>(it - names.begin());
  SimScenario sc;
  sc.name = name;
  sc.generator = idx < 3 ? Generator::LgmCar : Generator::PmmCar;
  sc.rho = 0.25 * (idx % 3);
  for (const char* m : {"lgm", "hlm", "car", "pmm", "car+pmm"}) {
    auto spec = ModelSpec::from_name(m);
    spec.hyper = Hyperparameters::choice7();
    sc.analysis_models.push_back(spec);
  }
  return sc;
}

// Desk-scale sampler settings: 2 chains x 2000 retained draws.
inline McmcConfig desk_scale_mcmc(std::uint64_t seed) {
  McmcConfig cfg;
  cfg.n_chains = 2;
  cfg.n_iter = 3000;
  cfg.burn_in = 1000;
  cfg.thin = 1;
  cfg.seed = seed;
  cfg.monitor = {};
  return cfg;
}

inline nlohmann::json truth_to_json(const SimScenario& sc) {
  const auto& t = sc.truth;
  nlohmann::json j = {{"scenario", sc.name},
                      {"generator", sc.generator == Generator::LgmCar ? "lgm_car" : "pmm_car"},
                      {"rho", sc.rho},
                      {"beta0", t.beta0},
                      {"beta1", t.beta1},
                      {"client_effect_var", t.client_effect_var},
                      {"sigma2_eps", t.sigma2_eps},
                      {"session_var", t.session_var},
                      {"pattern_threshold", t.pattern_threshold},
                      {"mask_every_other", sc.mask_every_other},
                      {"attendance", template_to_json(sc.attendance)}};
  if (sc.generator == Generator::PmmCar) {
    j["Delta0"] = t.Delta0;
    j["Delta1"] = t.Delta1;
    j["pi"] = t.pi;
    j["beta0_star"] = t.beta0 - t.pi * t.Delta0;
    j["beta1_star"] = t.beta1 - t.pi * t.Delta1;
  }
  return j;
}

struct SimulatedData {
  Dataset dataset;
  std::vector<double> gamma;  // realized session effects
  std::vector<std::string> warnings;
};

// True when the outcome at this attended session is recorded under the
// every-other-session protocol.
inline bool measured_by_design(int order, int module_length, bool last_for_client) {
  return last_for_client || ((order - 1) % module_length) % 2 == 0;
}

inline SimulatedData generate_outcomes(const Dataset& skeleton, const SimScenario& sc, Rng& rng) {
  const auto& t = sc.truth;
  SimulatedData out;
  out.dataset = derive_pattern_indicators(skeleton, t.pattern_threshold);
  auto& ds = out.dataset;

  // session effects
  out.gamma.assign(ds.S(), 0.0);
  const auto cov = session_covariance(sc.rho, ds);
  const double gsd = std::sqrt(t.session_var);
  for (std::size_t b = 0; b < cov.blocks.size(); ++b) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov.matrices[b]);
    if (llt.info() != Eigen::Success) throw NumericalError("session covariance is not positive definite");
    Eigen::VectorXd z(cov.blocks[b].size());
    for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = rng.normal();
    Eigen::VectorXd g = llt.matrixL() * z;
    for (std::size_t k = 0; k < cov.blocks[b].size(); ++k) out.gamma[cov.blocks[b][k]] = gsd * g[k];
  }
  // client effects
  const double csd = std::sqrt(t.client_effect_var);
  std::vector<double> b0(ds.n()), b1(ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i) {
    b0[i] = csd * rng.normal();
    b1[i] = csd * rng.normal();
  }
  const bool pmm = sc.generator == Generator::PmmCar;
  const double beta0 = pmm ? t.beta0 - t.pi * t.Delta0 : t.beta0;
  const double beta1 = pmm ? t.beta1 - t.pi * t.Delta1 : t.beta1;
  if (pmm) {
    std::size_t ones = 0;
    for (const auto& c : ds.clients) ones += *c.pattern == 1 ? 1 : 0;
    if (ones == 0 || ones == ds.n()) out.warnings.push_back("only one missing-data pattern is present");
  }

  std::vector<double> last_time(ds.n(), -1.0);
  for (const auto& o : ds.observations) last_time[o.client] = std::max(last_time[o.client], o.time_weeks);
  const double esd = std::sqrt(t.sigma2_eps);
  for (auto& o : ds.observations) {
    double y = beta0 + beta1 * o.time_weeks + b0[o.client] + b1[o.client] * o.time_weeks + out.gamma[o.session];
    if (pmm && *ds.clients[o.client].pattern == 1) y += t.Delta0 + t.Delta1 * o.time_weeks;
    y += esd * rng.normal();
    o.outcome = y;
    if (sc.mask_every_other &&
        !measured_by_design(ds.sessions[o.session].order, sc.attendance.module_length,
                            o.time_weeks == last_time[o.client]))
      o.outcome.reset();
  }
  return out;
}

struct ReplicateFit {
  bool ok = false;
  std::string error;
  double mean_b0 = 0.0, sd_b0 = 0.0, mean_b1 = 0.0, sd_b1 = 0.0, dbar = 0.0;
};

struct ReplicationCell {
  double mean = 0.0;
  double mcse = 0.0;
};

struct ReplicationRow {
  std::string model;
  std::size_t used = 0;
  std::size_t excluded = 0;
  ReplicationCell mean_b0, sd_b0, mean_b1, sd_b1, dbar;
};

struct ReplicationTable {
  std::string scenario;
  std::vector<std::string> models;
  std::vector<std::vector<ReplicateFit>> fits;  // [replicate][model]
  std::vector<ReplicationRow> rows;
};

// Posterior mean/SD of the (marginal) intercept and slope plus Dbar.
inline ReplicateFit fit_replicate(const Dataset& ds, const ModelSpec& spec, const McmcConfig& cfg) {
  ReplicateFit f;
  try {
    auto ps = run_chains(ds, spec, cfg);
    auto moments = [](const std::vector<double>& v) {
      double m = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - m) * (x - m);
      return std::make_pair(m, std::sqrt(ss / static_cast<double>(v.size() - 1)));
    };
    std::tie(f.mean_b0, f.sd_b0) = moments(ps.pooled("beta0"));
    std::tie(f.mean_b1, f.sd_b1) = moments(ps.pooled("beta1"));
    f.dbar = moments(ps.pooled("deviance")).first;
    f.ok = true;
  } catch (const NumericalError& e) {
    f.error = e.what();
  }
  return f;
}

inline SimulatedData simulate_replicate(const SimScenario& sc, std::uint64_t seed, int replicate) {
  Rng att(seed, {stream::kReplicate, static_cast<std::uint64_t>(replicate), stream::kAttendance});
  Rng out(seed, {stream::kReplicate, static_cast<std::uint64_t>(replicate), stream::kOutcomes});
  auto skeleton = generate_attendance(sc.attendance, att);
  return generate_outcomes(skeleton, sc, out);
}

inline ReplicationTable run_scenario(const SimScenario& sc, const McmcConfig& mcmc, int threads = 1) {
  if (sc.replicates < 2) throw ConfigError("run_scenario needs at least 2 replicates");
  if (sc.analysis_models.empty()) throw ConfigError("scenario has no analysis models");
  mcmc.validate();
  ReplicationTable table;
  table.scenario = sc.name;
  for (const auto& m : sc.analysis_models) table.models.push_back(m.name());
  table.fits.assign(static_cast<std::size_t>(sc.replicates), {});

  auto work = [&](int r) {
    const auto data = simulate_replicate(sc, mcmc.seed, r);
    std::vector<ReplicateFit> fits;
    for (std::size_t m = 0; m < sc.analysis_models.size(); ++m) {
      McmcConfig cfg = mcmc;
      cfg.threads = 1;
      cfg.seed = Rng(mcmc.seed, {stream::kReplicate, static_cast<std::uint64_t>(r), stream::kFit, m}).engine()();
      fits.push_back(fit_replicate(data.dataset, sc.analysis_models[m], cfg));
    }
    table.fits[static_cast<std::size_t>(r)] = std::move(fits);
  };

  const int workers = std::max(1, std::min(threads, sc.replicates));
  if (workers == 1) {
    for (int r = 0; r < sc.replicates; ++r) work(r);
  } else {
    std::mutex mu;
    int next = 0;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(sc.replicates));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        while (true) {
          int r;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= sc.replicates) return;
            r = next++;
          }
          try {
            work(r);
          } catch (...) {
            errors[static_cast<std::size_t>(r)] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  for (std::size_t m = 0; m < table.models.size(); ++m) {
    ReplicationRow row;
    row.model = table.models[m];
    std::vector<double> mb0, sb0, mb1, sb1, dbar;
    for (const auto& rep : table.fits) {
      const auto& f = rep[m];
      if (!f.ok) {
        ++row.excluded;
        continue;
      }
      mb0.push_back(f.mean_b0);
      sb0.push_back(f.sd_b0);
      mb1.push_back(f.mean_b1);
      sb1.push_back(f.sd_b1);
      dbar.push_back(f.dbar);
    }
    row.used = mb0.size();
    auto cell = [](const std::vector<double>& v) {
      ReplicationCell c;
      if (v.empty()) return ReplicationCell{std::nan(""), std::nan("")};
      for (double x : v) c.mean += x;
      c.mean /= static_cast<double>(v.size());
      c.mcse = v.size() >= 2 ? mc_standard_error(v) : std::nan("");
      return c;
    };
    row.mean_b0 = cell(mb0);
    row.sd_b0 = cell(sb0);
    row.mean_b1 = cell(mb1);
    row.sd_b1 = cell(sb1);
    row.dbar = cell(dbar);
    table.rows.push_back(row);
  }
  return table;
}

inline std::string format_replication_table(const ReplicationTable& t) {
  std::string out = "model,mean_b0,mcse,sd_b0,mcse,mean_b1,mcse,sd_b1,mcse,dbar,mcse\n";
  auto cell = [](const ReplicationCell& c) { return util::format_double(c.mean) + "," + util::format_double(c.mcse); };
  for (const auto& r : t.rows)
    out += r.model + "," + cell(r.mean_b0) + "," + cell(r.sd_b0) + "," + cell(r.mean_b1) + "," + cell(r.sd_b1) + "," +
           cell(r.dbar) + "\n";
  return out;
}

inline std::string format_replicate_fits(const ReplicationTable& t) {
  std::string out = "replicate,model,ok,mean_b0,sd_b0,mean_b1,sd_b1,dbar\n";
  for (std::size_t r = 0; r < t.fits.size(); ++r)
    for (std::size_t m = 0; m < t.models.size(); ++m) {
      const auto& f = t.fits[r][m];
      out += std::to_string(r) + "," + t.models[m] + "," + (f.ok ? "1" : "0") + "," + util::format_double(f.mean_b0) +
             "," + util::format_double(f.sd_b0) + "," + util::format_double(f.mean_b1) + "," +
             util::format_double(f.sd_b1) + "," + util::format_double(f.dbar) + "\n";
    }
  return out;
}

}  // namespace rollcar
