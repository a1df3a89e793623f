#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rollcar/data.hpp"
#include "rollcar/error.hpp"
#include "rollcar/graph.hpp"

namespace rollcar {

enum class Family { LGM, HLM, CAR };
enum class Closeness { Type1, Type2, Custom };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::LGM: return "lgm";
    case Family::HLM: return "hlm";
    case Family::CAR: return "car";
  }
  return "?";
}

inline std::string to_string(Closeness c) {
  switch (c) {
    case Closeness::Type1: return "type1";
    case Closeness::Type2: return "type2";
    case Closeness::Custom: return "custom";
  }
  return "?";
}

// Prior settings.  Gamma(a, b) has mean a / b; every Gamma prior is placed
// on a precision.  beta0 is flat; sigma2_beta0 is the variance of the
// numerically flat normal surrogate used where a proper density is needed.
struct Hyperparameters {
  double psi_y0 = 1.0, psi_y1 = 1.0;    // 1/sigma2_eps
  double psi_00 = 1.0, psi_01 = 1.0;    // 1/sigma2_0
  double psi_10 = 1.0, psi_11 = 1.0;    // 1/sigma2_1
  double psi_nu0 = 0.1, psi_nu1 = 0.1;  // 1/sigma2_nu
  double d0 = 0.1, d1 = 0.2;            // 1/delta
  double sigma2_beta0 = 1e8;
  double sigma2_beta1 = 1e4;
  double sigma2_beta = 1e4;
  double delta0_mean = 0.0, delta0_var = 10.0;
  double delta1_mean = 0.0, delta1_var = 10.0;
  double pi_a = 1.0, pi_b = 1.0;

  // Equal prior weight on structured and unstructured session variance.
  static Hyperparameters choice7() { return Hyperparameters{}; }

  // Independent priors on the two session components, more mass near zero
  // for delta.
  static Hyperparameters choice8() {
    Hyperparameters h;
    h.psi_nu0 = 1.0;
    h.psi_nu1 = 1.0;
    h.d0 = 0.5;
    h.d1 = 0.0005;
    return h;
  }

  static Hyperparameters preset(const std::string& name) {
    if (name == "choice7") return choice7();
    if (name == "choice8") return choice8();
    throw ConfigError("unknown hyperparameter preset '" + name + "' (expected choice7 or choice8)");
  }

  void validate() const {
    const double positive[] = {psi_y0, psi_y1, psi_00, psi_01, psi_10,     psi_11,     psi_nu0,
                               psi_nu1, d0,    d1,     sigma2_beta0, sigma2_beta1, sigma2_beta,
                               delta0_var, delta1_var, pi_a, pi_b};
    for (double v : positive)
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("hyperparameters must be finite and strictly positive");
  }

  bool operator==(const Hyperparameters&) const = default;
};

// Analysis model.  The six configurations used in practice are lgm, hlm,
// car, pmm (= lgm + pattern mixture), hlm+pmm and car+pmm.
struct ModelSpec {
  Family family = Family::CAR;
  bool pattern_mixture = false;
  Closeness closeness = Closeness::Type1;
  ClusterUnit unit = ClusterUnit::Session;
  Hyperparameters hyper;
  std::vector<Edge> custom_weights;  // Closeness::Custom only, over units

  // Testing hooks: drop the client growth effects, or pin sigma2_eps.
  bool client_effects = true;
  std::optional<double> fixed_sigma2_eps;

  bool has_session_effects() const { return family != Family::LGM; }
  bool has_structured_effects() const { return family == Family::CAR; }

  std::string name() const {
    std::string base = family == Family::LGM && pattern_mixture ? "pmm" : to_string(family);
    if (pattern_mixture && family != Family::LGM) base += "+pmm";
    return base;
  }

  static ModelSpec from_name(const std::string& name) {
    ModelSpec m;
    if (name == "lgm") m.family = Family::LGM;
    else if (name == "hlm") m.family = Family::HLM;
    else if (name == "car") m.family = Family::CAR;
    else if (name == "pmm") { m.family = Family::LGM; m.pattern_mixture = true; }
    else if (name == "hlm+pmm") { m.family = Family::HLM; m.pattern_mixture = true; }
    else if (name == "car+pmm") { m.family = Family::CAR; m.pattern_mixture = true; }
    else throw ConfigError("unknown model '" + name + "' (expected lgm, hlm, car, pmm, hlm+pmm or car+pmm)");
    return m;
  }

  void validate() const {
    hyper.validate();
    if (closeness == Closeness::Custom && family != Family::CAR)
      throw ConfigError("custom closeness weights only apply to the car family");
    if (family == Family::LGM && unit != ClusterUnit::Session)
      throw ConfigError("lgm has no session effects; clustering unit must be left at session");
    if (fixed_sigma2_eps && !(*fixed_sigma2_eps > 0.0))
      throw ConfigError("fixed sigma2_eps must be positive");
  }
};

inline nlohmann::json hyper_to_json(const Hyperparameters& h) {
  return {{"psi_y0", h.psi_y0},       {"psi_y1", h.psi_y1},           {"psi_00", h.psi_00},
          {"psi_01", h.psi_01},       {"psi_10", h.psi_10},           {"psi_11", h.psi_11},
          {"psi_nu0", h.psi_nu0},     {"psi_nu1", h.psi_nu1},         {"d0", h.d0},
          {"d1", h.d1},               {"sigma2_beta0", h.sigma2_beta0}, {"sigma2_beta1", h.sigma2_beta1},
          {"sigma2_beta", h.sigma2_beta}, {"delta0_mean", h.delta0_mean}, {"delta0_var", h.delta0_var},
          {"delta1_mean", h.delta1_mean}, {"delta1_var", h.delta1_var}, {"pi_a", h.pi_a},
          {"pi_b", h.pi_b}};
}

// Accepts a preset name ("choice7"), or an object optionally carrying a
// "preset" key plus per-field overrides.
inline Hyperparameters hyper_from_json(const nlohmann::json& j) {
  if (j.is_string()) return Hyperparameters::preset(j.get<std::string>());
  if (!j.is_object()) throw ConfigError("hyper must be a preset name or an object");
  Hyperparameters h = j.contains("preset") ? Hyperparameters::preset(j.at("preset").get<std::string>())
                                           : Hyperparameters{};
  const std::pair<const char*, double*> fields[] = {
      {"psi_y0", &h.psi_y0},   {"psi_y1", &h.psi_y1},       {"psi_00", &h.psi_00},
      {"psi_01", &h.psi_01},   {"psi_10", &h.psi_10},       {"psi_11", &h.psi_11},
      {"psi_nu0", &h.psi_nu0}, {"psi_nu1", &h.psi_nu1},     {"d0", &h.d0},
      {"d1", &h.d1},           {"sigma2_beta0", &h.sigma2_beta0}, {"sigma2_beta1", &h.sigma2_beta1},
      {"sigma2_beta", &h.sigma2_beta}, {"delta0_mean", &h.delta0_mean}, {"delta0_var", &h.delta0_var},
      {"delta1_mean", &h.delta1_mean}, {"delta1_var", &h.delta1_var}, {"pi_a", &h.pi_a},
      {"pi_b", &h.pi_b}};
  for (auto& [key, dst] : fields)
    if (j.contains(key)) *dst = j.at(key).get<double>();
  h.validate();
  return h;
}

inline nlohmann::json spec_to_json(const ModelSpec& m) {
  nlohmann::json j = {{"family", to_string(m.family)},
                      {"pattern_mixture", m.pattern_mixture},
                      {"closeness", to_string(m.closeness)},
                      {"unit", to_string(m.unit)},
                      {"hyper", hyper_to_json(m.hyper)}};
  if (m.closeness == Closeness::Custom) {
    auto w = nlohmann::json::array();
    for (const auto& e : m.custom_weights) w.push_back({e.a, e.b, e.w});
    j["weights"] = w;
  }
  if (!m.client_effects) j["client_effects"] = false;
  if (m.fixed_sigma2_eps) j["fixed_sigma2_eps"] = *m.fixed_sigma2_eps;
  return j;
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  try {
    ModelSpec m;
    if (j.contains("model")) {
      m = ModelSpec::from_name(j.at("model").get<std::string>());
    } else {
      const auto fam = j.value("family", std::string("car"));
      m = ModelSpec::from_name(fam);
      m.pattern_mixture = j.value("pattern_mixture", false);
    }
    if (j.contains("pattern_mixture")) m.pattern_mixture = j.at("pattern_mixture").get<bool>();
    if (j.contains("closeness")) {
      const auto& c = j.at("closeness");
      std::string cs = c.is_number() ? std::to_string(c.get<int>()) : c.get<std::string>();
      if (cs == "type1" || cs == "1") m.closeness = Closeness::Type1;
      else if (cs == "type2" || cs == "2") m.closeness = Closeness::Type2;
      else if (cs == "custom") m.closeness = Closeness::Custom;
      else throw ConfigError("unknown closeness '" + cs + "'");
    }
    if (j.contains("unit")) {
      const auto u = j.at("unit").get<std::string>();
      if (u == "session") m.unit = ClusterUnit::Session;
      else if (u == "module") m.unit = ClusterUnit::Module;
      else throw ConfigError("unknown unit '" + u + "'");
    }
    if (j.contains("hyper")) m.hyper = hyper_from_json(j.at("hyper"));
    if (j.contains("weights"))
      for (const auto& t : j.at("weights"))
        m.custom_weights.push_back(Edge{t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>(), t.at(2).get<double>()});
    m.client_effects = j.value("client_effects", true);
    if (j.contains("fixed_sigma2_eps")) m.fixed_sigma2_eps = j.at("fixed_sigma2_eps").get<double>();
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
}

// Every sampled quantity.  Under pattern mixture, beta0/beta1 hold the
// pattern-0 (starred) coefficients.  u and nu are indexed by clustering
// unit; unit_of_session maps dataset sessions onto them.
struct ParameterState {
  double beta0 = 0.0;
  double beta1 = 0.0;
  std::vector<double> beta_cov;
  std::vector<double> b0, b1;
  std::vector<double> u, nu;
  double sigma2_eps = 1.0, sigma2_0 = 1.0, sigma2_1 = 1.0, sigma2_nu = 1.0, delta = 1.0;
  double Delta0 = 0.0, Delta1 = 0.0;
  double pi = 0.0;
  bool pattern_mixture = false;
  std::map<std::size_t, double> imputed;  // observation index -> drawn outcome
  std::vector<std::size_t> unit_of_session;

  double gamma(std::size_t unit) const { return u.empty() ? 0.0 : u[unit] + nu[unit]; }
  double session_effect(std::size_t session) const {
    return unit_of_session.empty() || u.empty() ? 0.0 : gamma(unit_of_session[session]);
  }
};

// Zero-valued state shaped for a dataset and model.
inline ParameterState zero_state(const Dataset& ds, const ModelSpec& spec, std::size_t units,
                                 std::vector<std::size_t> unit_of_session) {
  ParameterState st;
  st.beta_cov.assign(ds.K(), 0.0);
  st.b0.assign(ds.n(), 0.0);
  st.b1.assign(ds.n(), 0.0);
  if (spec.has_session_effects()) {
    st.u.assign(units, 0.0);
    st.nu.assign(units, 0.0);
    st.unit_of_session = std::move(unit_of_session);
  }
  st.pattern_mixture = spec.pattern_mixture;
  return st;
}

// Fixed part of the predictor: beta0 + beta1 t + X beta (+ pattern shift).
inline double fixed_predictor(const ParameterState& st, const Dataset& ds, const Observation& obs) {
  const auto& client = ds.clients[obs.client];
  double eta = st.beta0 + st.beta1 * obs.time_weeks;
  for (std::size_t k = 0; k < st.beta_cov.size(); ++k) eta += st.beta_cov[k] * client.covariates[k];
  if (st.pattern_mixture) {
    if (!client.pattern) throw ConfigError("pattern-mixture model requires pattern indicators");
    if (*client.pattern == 1) eta += st.Delta0 + st.Delta1 * obs.time_weeks;
  }
  return eta;
}

inline double linear_predictor(const ParameterState& st, const Dataset& ds, const Observation& obs) {
  return fixed_predictor(st, ds, obs) + st.b0[obs.client] + st.b1[obs.client] * obs.time_weeks +
         st.session_effect(obs.session);
}

// -2 log likelihood of the observed outcomes under the growth submodel.
inline double deviance(const ParameterState& st, const Dataset& ds) {
  const double log_norm = std::log(2.0 * std::numbers::pi * st.sigma2_eps);
  double d = 0.0;
  for (const auto& o : ds.observations) {
    if (!o.observed()) continue;
    const double r = *o.outcome - linear_predictor(st, ds, o);
    d += log_norm + r * r / st.sigma2_eps;
  }
  return d;
}

// Marginal intercept and slope implied by a pattern-mixture draw.
inline std::pair<double, double> marginalize_pmm(const ParameterState& st) {
  if (!st.pattern_mixture) throw ConfigError("marginalize_pmm called on a non pattern-mixture state");
  return {st.beta0 + st.pi * st.Delta0, st.beta1 + st.pi * st.Delta1};
}

// sum_{s<j} w_sj (u_s - u_j)^2
inline double car_pairwise_sum(const std::vector<double>& u, const SessionGraph& graph) {
  double q = 0.0;
  for (const auto& e : graph.edges()) {
    const double d = u[e.a] - u[e.b];
    q += e.w * d * d;
  }
  return q;
}

// Log of the intrinsic CAR density, up to a constant.
inline double car_log_density(const std::vector<double>& u, const SessionGraph& graph, double delta) {
  const double rank = static_cast<double>(graph.size() - graph.island_count());
  return -0.5 * rank * std::log(delta) - car_pairwise_sum(u, graph) / (2.0 * delta);
}

namespace detail {
inline double log_normal_density(double x, double mean, double var) {
  const double r = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + r * r / var);
}
inline double log_gamma_density(double x, double shape, double rate) {
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}
}  // namespace detail

// Joint log prior (hierarchical terms included), up to an additive constant.
inline double log_prior(const ParameterState& st, const ModelSpec& spec, const SessionGraph* graph = nullptr) {
  const auto& h = spec.hyper;
  const double variances[] = {st.sigma2_eps, st.sigma2_0, st.sigma2_1, st.sigma2_nu, st.delta};
  for (double v : variances)
    if (!(v > 0.0)) throw ConfigError("log_prior: variance components must be positive");
  using detail::log_gamma_density;
  using detail::log_normal_density;

  double lp = log_normal_density(st.beta1, 0.0, h.sigma2_beta1);
  for (double b : st.beta_cov) lp += log_normal_density(b, 0.0, h.sigma2_beta);
  if (!spec.fixed_sigma2_eps) lp += log_gamma_density(1.0 / st.sigma2_eps, h.psi_y0, h.psi_y1);
  if (spec.client_effects) {
    lp += log_gamma_density(1.0 / st.sigma2_0, h.psi_00, h.psi_01);
    lp += log_gamma_density(1.0 / st.sigma2_1, h.psi_10, h.psi_11);
    for (double b : st.b0) lp += log_normal_density(b, 0.0, st.sigma2_0);
    for (double b : st.b1) lp += log_normal_density(b, 0.0, st.sigma2_1);
  }
  if (spec.has_session_effects()) {
    lp += log_gamma_density(1.0 / st.sigma2_nu, h.psi_nu0, h.psi_nu1);
    for (double v : st.nu) lp += log_normal_density(v, 0.0, st.sigma2_nu);
  }
  if (spec.has_structured_effects()) {
    if (!graph) throw ConfigError("log_prior: car family requires a session graph");
    lp += log_gamma_density(1.0 / st.delta, h.d0, h.d1);
    lp += car_log_density(st.u, *graph, st.delta);
  }
  if (spec.pattern_mixture) {
    lp += log_normal_density(st.Delta0, h.delta0_mean, h.delta0_var);
    lp += log_normal_density(st.Delta1, h.delta1_mean, h.delta1_var);
    if (st.pi <= 0.0 || st.pi >= 1.0) return -INFINITY;
    lp += (h.pi_a - 1.0) * std::log(st.pi) + (h.pi_b - 1.0) * std::log1p(-st.pi) -
          (std::lgamma(h.pi_a) + std::lgamma(h.pi_b) - std::lgamma(h.pi_a + h.pi_b));
  }
  return lp;
}

}  // namespace rollcar
