// rollcar: simulate, fit, diagnose, compare and replicate from the shell.
//
// Every command resolves its settings (config file first, flags on top),
// validates them, computes everything in memory and only then creates the
// output directory.  Each output directory gets a manifest.json whose
// "config" block can be fed back through --config to reproduce the run.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "rollcar/data.hpp"
#include "rollcar/diagnostics.hpp"
#include "rollcar/error.hpp"
#include "rollcar/graph.hpp"
#include "rollcar/models.hpp"
#include "rollcar/sampler.hpp"
#include "rollcar/simstudy.hpp"
#include "rollcar/util.hpp"
#include "rollcar/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rollcar;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kNumerical = 3 };

// Flags shared by several commands.  Unset optionals leave the config file
// (or the built-in default) in charge.
struct Flags {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> preset;
  std::optional<std::string> model;
  std::optional<int> closeness;
  std::optional<std::string> unit;
  std::optional<std::string> hyper;
  std::optional<int> chains;
  std::optional<long> iters;
  std::optional<long> burnin;
  std::optional<int> thin;
  std::optional<int> threads;
  std::optional<int> replicates;
  std::optional<int> replicate_index;
  std::optional<std::string> data;
  std::optional<double> level;
  std::optional<double> psrf_threshold;
  std::optional<int> pattern_threshold;
  std::vector<std::string> monitor;
  std::vector<std::string> models;
  std::vector<std::string> inputs;
  bool mask_every_other = false;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(util::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config '" + path + "' must be a JSON object");
  // A manifest from an earlier run carries its settings under "config".
  if (j.contains("config") && j.at("config").is_object()) return j.at("config");
  return j;
}

template <class T>
void overlay(json& cfg, const char* key, const std::optional<T>& v) {
  if (v) cfg[key] = *v;
}

void overlay_common(json& cfg, const Flags& f) {
  overlay(cfg, "seed", f.seed);
  overlay(cfg, "preset", f.preset);
  overlay(cfg, "model", f.model);
  overlay(cfg, "closeness", f.closeness);
  overlay(cfg, "unit", f.unit);
  overlay(cfg, "hyper", f.hyper);
  overlay(cfg, "chains", f.chains);
  overlay(cfg, "iters", f.iters);
  overlay(cfg, "burnin", f.burnin);
  overlay(cfg, "thin", f.thin);
  overlay(cfg, "replicates", f.replicates);
  overlay(cfg, "replicate", f.replicate_index);
  overlay(cfg, "data", f.data);
  overlay(cfg, "level", f.level);
  overlay(cfg, "psrf_threshold", f.psrf_threshold);
  overlay(cfg, "pattern_threshold", f.pattern_threshold);
  if (!f.monitor.empty()) cfg["monitor"] = f.monitor;
  if (!f.models.empty()) cfg["models"] = f.models;
  if (f.mask_every_other) cfg["mask_every_other"] = true;
}

template <class T>
T get_or(const json& cfg, const char* key, T fallback) {
  if (!cfg.contains(key)) return fallback;
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

int threads_of(const json& cfg, const Flags& f) {
  const int t = f.threads.value_or(get_or<int>(cfg, "threads", 1));
  if (t < 1) throw ConfigError("--threads must be at least 1");
  return t;
}

McmcConfig mcmc_from(const json& cfg, McmcConfig base) {
  base.seed = get_or<std::uint64_t>(cfg, "seed", base.seed);
  base.n_chains = get_or<int>(cfg, "chains", base.n_chains);
  base.n_iter = get_or<long>(cfg, "iters", base.n_iter);
  base.burn_in = get_or<long>(cfg, "burnin", base.burn_in);
  base.thin = get_or<int>(cfg, "thin", base.thin);
  if (cfg.contains("monitor")) base.monitor = get_or<std::vector<std::string>>(cfg, "monitor", {});
  for (const auto& m : base.monitor)
    if (m != "gamma" && m != "imputed") throw ConfigError("unknown monitor group '" + m + "' (expected gamma or imputed)");
  base.validate();
  return base;
}

json mcmc_to_json(const McmcConfig& m) {
  return {{"seed", m.seed},     {"chains", m.n_chains}, {"iters", m.n_iter},
          {"burnin", m.burn_in}, {"thin", m.thin},       {"monitor", m.monitor}};
}

void check_out(const std::string& out) {
  if (out.empty()) throw ConfigError("--out DIR is required");
  if (fs::exists(out) && !fs::is_directory(out)) throw ConfigError("--out '" + out + "' exists and is not a directory");
}

void make_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory '" + out + "': " + ec.message());
}

json manifest(const std::string& command, const json& config, const std::vector<std::string>& outputs) {
  json m = {{"tool", "rollcar"},
            {"version", kVersion},
            {"libraries",
             {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
            {"command", command},
            {"config", config},
            {"config_hash", util::hex64(util::fnv1a(config.dump()))},
            {"outputs", outputs}};
  if (config.contains("seed")) m["seed"] = config.at("seed");
  return m;
}

void write_outputs(const std::string& dir, const std::string& command, const json& config,
                   const std::vector<std::pair<std::string, std::string>>& files, json extra = json::object()) {
  make_out(dir);
  std::vector<std::string> names;
  for (const auto& [name, text] : files) {
    util::write_file((fs::path(dir) / name).string(), text);
    names.push_back(name);
  }
  names.push_back("manifest.json");
  json m = manifest(command, config, names);
  for (auto& [k, v] : extra.items()) m[k] = v;
  util::write_file((fs::path(dir) / "manifest.json").string(), m.dump(2) + "\n");
}

// Spec fields recognised in a flat config object.
ModelSpec spec_from_config(const json& cfg) {
  json s = json::object();
  for (const char* key : {"model", "family", "pattern_mixture", "closeness", "unit", "hyper", "weights"})
    if (cfg.contains(key)) s[key] = cfg.at(key);
  return spec_from_json(s);
}

json spec_config(const ModelSpec& spec) {
  json j = {{"model", spec.name()},
            {"closeness", to_string(spec.closeness)},
            {"unit", to_string(spec.unit)},
            {"hyper", hyper_to_json(spec.hyper)}};
  if (spec.closeness == Closeness::Custom) j["weights"] = spec_to_json(spec).at("weights");
  return j;
}

// ---- simulate ----------------------------------------------------------

int cmd_simulate(const Flags& f) {
  json cfg = load_config(f.config_path);
  overlay_common(cfg, f);
  check_out(f.out);
  if (!cfg.contains("preset")) throw ConfigError("simulate needs --preset (one of a, b, c, d, e, f)");
  SimScenario sc = scenario_preset(get_or<std::string>(cfg, "preset", ""));
  sc.rho = get_or<double>(cfg, "rho", sc.rho);
  sc.mask_every_other = get_or<bool>(cfg, "mask_every_other", false);
  if (cfg.contains("attendance")) sc.attendance = template_from_json(cfg.at("attendance"));
  const auto seed = get_or<std::uint64_t>(cfg, "seed", 1);
  const int rep = get_or<int>(cfg, "replicate", 0);
  if (rep < 0) throw ConfigError("--replicate must be nonnegative");
  if (!(sc.rho >= 0.0 && sc.rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");

  const auto sim = simulate_replicate(sc, seed, rep);
  json resolved = {{"preset", sc.name},
                   {"seed", seed},
                   {"replicate", rep},
                   {"rho", sc.rho},
                   {"mask_every_other", sc.mask_every_other},
                   {"attendance", template_to_json(sc.attendance)}};
  json truth = truth_to_json(sc);
  truth["seed"] = seed;
  truth["replicate"] = rep;
  const auto& ds = sim.dataset;
  json extra = {{"data_hash", dataset_hash(ds)},
                {"sessions", ds.S()},
                {"clients", ds.n()},
                {"observations", ds.observations.size()},
                {"warnings", sim.warnings}};
  write_outputs(f.out, "simulate", resolved, {{"dataset.csv", format_dataset(ds)}, {"truth.json", truth.dump(2) + "\n"}},
                extra);
  for (const auto& w : sim.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "simulated preset " << sc.name << ": " << ds.S() << " sessions, " << ds.n() << " clients, "
            << ds.observations.size() << " observations -> " << f.out << "\n";
  return kOk;
}

// ---- fit ---------------------------------------------------------------

int cmd_fit(const Flags& f) {
  json cfg = load_config(f.config_path);
  overlay_common(cfg, f);
  check_out(f.out);
  if (!cfg.contains("data")) throw ConfigError("fit needs --data FILE");
  const auto data_path = get_or<std::string>(cfg, "data", "");
  const ModelSpec spec = spec_from_config(cfg);
  McmcConfig mcmc = mcmc_from(cfg, McmcConfig{});
  mcmc.threads = threads_of(cfg, f);
  const double level = get_or<double>(cfg, "level", 0.95);
  const double threshold = get_or<double>(cfg, "psrf_threshold", 1.1);
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("--level must lie in (0, 1)");
  if (!(threshold > 1.0)) throw ConfigError("--psrf-threshold must exceed 1");

  const int pattern_threshold = get_or<int>(cfg, "pattern_threshold", 8);
  if (pattern_threshold < 1) throw ConfigError("pattern_threshold must be at least 1");

  Dataset ds = load_dataset(data_path);
  // Summaries carry the hash of the file as read so that fits with and
  // without derived patterns remain comparable.
  const std::string input_hash = dataset_hash(ds);
  const bool derived_patterns = spec.pattern_mixture && !ds.has_patterns();
  if (derived_patterns) ds = derive_pattern_indicators(std::move(ds), pattern_threshold);
  const SessionGraph graph = build_graph(ds, spec);
  auto ps = run_chains(ds, graph, spec, mcmc);
  ps.data_hash = input_hash;
  const auto summary = summarize(ps, ds, level, threshold);

  json resolved = spec_config(spec);
  resolved["data"] = data_path;
  resolved.update(mcmc_to_json(mcmc));
  resolved["level"] = level;
  resolved["psrf_threshold"] = threshold;
  resolved["pattern_threshold"] = pattern_threshold;

  std::vector<std::pair<std::string, std::string>> files;
  for (std::size_t c = 0; c < ps.chains(); ++c)
    files.emplace_back("chain_" + std::to_string(c + 1) + ".csv", format_chain_draws(ps, c));
  files.emplace_back("summary.json", summary_to_json(summary).dump(2) + "\n");
  files.emplace_back("summary.csv", format_summary_csv(summary));
  if (spec.has_structured_effects()) files.emplace_back("weights.csv", format_weights_csv(graph));
  json extra = {{"data_hash", ps.data_hash},
                {"clamps", ps.clamps},
                {"islands", graph.island_count()},
                {"derived_patterns", derived_patterns}};
  write_outputs(f.out, "fit", resolved, files, extra);

  const auto& b1 = summary.at("beta1");
  std::cout << spec.name() << ": Dbar " << util::format_double(summary.deviance.dbar) << ", pD "
            << util::format_double(summary.deviance.pd) << ", beta1 " << util::format_double(b1.mean) << " ["
            << util::format_double(b1.hpd_lo) << ", " << util::format_double(b1.hpd_hi) << "]\n";
  if (!summary.converged)
    std::cerr << "warning: PSRF above " << util::format_double(threshold) << " for at least one quantity (converged: false)\n";
  return kOk;
}

// ---- diagnose ----------------------------------------------------------

// Re-summarizes per-chain draw files written by fit (no deviance terms,
// which need the dataset).
int cmd_diagnose(const Flags& f) {
  json cfg = load_config(f.config_path);
  overlay_common(cfg, f);
  check_out(f.out);
  std::vector<std::string> inputs = f.inputs;
  if (inputs.empty() && cfg.contains("inputs")) inputs = get_or<std::vector<std::string>>(cfg, "inputs", {});
  if (inputs.size() == 1 && fs::is_directory(inputs[0])) {
    const fs::path dir = inputs[0];
    inputs.clear();
    for (int c = 1; fs::exists(dir / ("chain_" + std::to_string(c) + ".csv")); ++c)
      inputs.push_back((dir / ("chain_" + std::to_string(c) + ".csv")).string());
    if (inputs.empty()) throw IoError("no chain_<k>.csv files in '" + dir.string() + "'");
  }
  if (inputs.empty()) throw ConfigError("diagnose needs a fit directory or chain CSV files");
  const double level = get_or<double>(cfg, "level", 0.95);
  const double threshold = get_or<double>(cfg, "psrf_threshold", 1.1);
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("--level must lie in (0, 1)");

  std::vector<ChainDraws> chains;
  for (const auto& p : inputs) {
    try {
      chains.push_back(parse_chain_draws(util::read_file(p)));
    } catch (const ParseError& e) {
      throw IoError(p + ": " + e.what());
    }
  }
  for (const auto& c : chains)
    if (c.names != chains.front().names) throw ValidationError("chain files monitor different quantities");

  FitSummary s;
  s.chains = chains.size();
  s.draws_per_chain = chains.front().draws.front().size();
  s.hpd_level = level;
  s.psrf_threshold = threshold;
  for (std::size_t q = 0; q < chains.front().names.size(); ++q) {
    std::vector<std::vector<double>> per;
    for (const auto& c : chains) per.push_back(c.draws[q]);
    s.quantities.push_back(summarize_quantity(chains.front().names[q], per, level));
    const auto& r = s.quantities.back().psrf;
    if (r && *r > threshold) s.converged = false;
  }
  json resolved = {{"inputs", inputs}, {"level", level}, {"psrf_threshold", threshold}};
  write_outputs(f.out, "diagnose", resolved, {{"diagnostics.csv", format_summary_csv(s)}},
                {{"converged", s.converged}});
  std::cout << s.quantities.size() << " quantities over " << s.chains << " chains; converged: "
            << (s.converged ? "true" : "false") << "\n";
  return kOk;
}

// ---- compare -----------------------------------------------------------

int cmd_compare(const Flags& f) {
  json cfg = load_config(f.config_path);
  check_out(f.out);
  std::vector<std::string> inputs = f.inputs;
  if (inputs.empty() && cfg.contains("inputs")) inputs = get_or<std::vector<std::string>>(cfg, "inputs", {});
  if (inputs.size() < 2) throw ConfigError("compare needs at least 2 summary files");
  std::vector<NamedSummary> fits;
  for (const auto& p : inputs) {
    json j;
    try {
      j = json::parse(util::read_file(p));
    } catch (const json::exception& e) {
      throw IoError("'" + p + "' is not valid JSON: " + e.what());
    }
    fits.push_back(NamedSummary{p, summary_from_json(j)});
  }
  const auto table = compare_summaries(fits);
  write_outputs(f.out, "compare", {{"inputs", inputs}}, {{"comparison.csv", table}});
  std::cout << table;
  return kOk;
}

// ---- replicate ---------------------------------------------------------

int cmd_replicate(const Flags& f) {
  json cfg = load_config(f.config_path);
  overlay_common(cfg, f);
  check_out(f.out);
  if (!cfg.contains("preset")) throw ConfigError("replicate needs --preset (one of a, b, c, d, e, f)");
  SimScenario sc = scenario_preset(get_or<std::string>(cfg, "preset", ""));
  sc.replicates = get_or<int>(cfg, "replicates", sc.replicates);
  if (sc.replicates < 2) throw ConfigError("--replicates must be at least 2");
  if (cfg.contains("attendance")) sc.attendance = template_from_json(cfg.at("attendance"));
  if (cfg.contains("models")) {
    sc.analysis_models.clear();
    for (const auto& m : get_or<std::vector<std::string>>(cfg, "models", {})) {
      auto spec = ModelSpec::from_name(m);
      spec.hyper = Hyperparameters::choice7();
      sc.analysis_models.push_back(spec);
    }
    if (sc.analysis_models.empty()) throw ConfigError("--models must name at least one model");
  }
  // Closeness, unit and hyperparameters apply to every analysis model.
  for (auto& spec : sc.analysis_models) {
    json s = spec_config(spec);
    for (const char* key : {"closeness", "unit", "hyper"})
      if (cfg.contains(key)) s[key] = cfg.at(key);
    if (!spec.has_session_effects()) s["unit"] = "session";
    spec = spec_from_json(s);
  }
  McmcConfig mcmc = mcmc_from(cfg, desk_scale_mcmc(get_or<std::uint64_t>(cfg, "seed", 1)));
  const int threads = threads_of(cfg, f);

  const auto table = run_scenario(sc, mcmc, threads);

  json models = json::array();
  for (const auto& spec : sc.analysis_models) models.push_back(spec_config(spec));
  json resolved = {{"preset", sc.name}, {"replicates", sc.replicates}, {"attendance", template_to_json(sc.attendance)},
                   {"analysis_models", models}};
  resolved.update(mcmc_to_json(mcmc));
  std::vector<std::string> names;
  for (const auto& spec : sc.analysis_models) names.push_back(spec.name());
  resolved["models"] = names;
  json excluded = json::object();
  for (const auto& r : table.rows) excluded[r.model] = r.excluded;
  write_outputs(f.out, "replicate", resolved,
                {{"table.csv", format_replication_table(table)},
                 {"replicates.csv", format_replicate_fits(table)},
                 {"truth.json", truth_to_json(sc).dump(2) + "\n"}},
                {{"excluded_replicates", excluded}});
  std::cout << format_replication_table(table);
  for (const auto& r : table.rows)
    if (r.excluded > 0) std::cerr << "warning: " << r.model << ": " << r.excluded << " replicate(s) excluded after a chain abort\n";
  return kOk;
}

void add_mcmc_flags(CLI::App* c, Flags& f) {
  c->add_option("--chains", f.chains, "Number of chains");
  c->add_option("--iters", f.iters, "Iterations per chain, burn-in included");
  c->add_option("--burnin", f.burnin, "Burn-in iterations");
  c->add_option("--thin", f.thin, "Keep every k-th post-burn-in draw");
  c->add_option("--threads", f.threads, "Worker threads");
}

void add_model_flags(CLI::App* c, Flags& f) {
  c->add_option("--closeness", f.closeness, "Closeness type")->check(CLI::IsMember({1, 2}));
  c->add_option("--unit", f.unit, "Clustering unit")->check(CLI::IsMember({"session", "module"}));
  c->add_option("--hyper", f.hyper, "Hyperparameter preset")->check(CLI::IsMember({"choice7", "choice8"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian growth models with CAR session effects for rolling-group data"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Flags f;

  auto* sim = app.add_subcommand("simulate", "Generate one synthetic dataset from a scenario preset");
  sim->add_option("--preset", f.preset, "Scenario preset (a-f)");
  sim->add_option("--replicate", f.replicate_index, "Replicate index within the seed's stream");
  sim->add_flag("--mask-every-other", f.mask_every_other, "Mark non-measurement sessions missing");

  auto* fit = app.add_subcommand("fit", "Fit one model by Gibbs sampling");
  fit->add_option("--data", f.data, "Dataset CSV");
  fit->add_option("--model", f.model, "Model")->check(CLI::IsMember({"lgm", "hlm", "car", "pmm", "hlm+pmm", "car+pmm"}));
  add_model_flags(fit, f);
  add_mcmc_flags(fit, f);
  fit->add_option("--monitor", f.monitor, "Optional quantity groups: gamma, imputed")->delimiter(',');
  fit->add_option("--level", f.level, "HPD level");
  fit->add_option("--psrf-threshold", f.psrf_threshold, "Convergence threshold");
  fit->add_option("--pattern-threshold", f.pattern_threshold,
                  "Sessions below which a client is short-stay, when the data has no R column");

  auto* diag = app.add_subcommand("diagnose", "PSRF and HPD summaries from per-chain draw files");
  diag->add_option("inputs", f.inputs, "Fit output directory, or chain CSV files");
  diag->add_option("--level", f.level, "HPD level");
  diag->add_option("--psrf-threshold", f.psrf_threshold, "Convergence threshold");

  auto* cmp = app.add_subcommand("compare", "Rank fit summaries by posterior mean deviance");
  cmp->add_option("inputs", f.inputs, "summary.json files");

  auto* rep = app.add_subcommand("replicate", "Run a simulation scenario and tabulate replicate averages");
  rep->add_option("--preset", f.preset, "Scenario preset (a-f)");
  rep->add_option("--replicates", f.replicates, "Number of replicates");
  rep->add_option("--models", f.models, "Analysis models (default: lgm,hlm,car,pmm,car+pmm)")->delimiter(',');
  add_model_flags(rep, f);
  add_mcmc_flags(rep, f);

  for (auto* c : {sim, fit, diag, cmp, rep}) {
    c->add_option("--config", f.config_path, "JSON config (or an earlier manifest.json); flags win");
    c->add_option("--out", f.out, "Output directory");
    if (c != cmp && c != diag) c->add_option("--seed", f.seed, "Random seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*sim) return cmd_simulate(f);
    if (*fit) return cmd_fit(f);
    if (*diag) return cmd_diagnose(f);
    if (*cmp) return cmd_compare(f);
    if (*rep) return cmd_replicate(f);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    if (!e.snapshot().empty()) std::cerr << e.snapshot() << "\n";
    return kNumerical;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
