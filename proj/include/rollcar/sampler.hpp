#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "rollcar/data.hpp"
#include "rollcar/error.hpp"
#include "rollcar/graph.hpp"
#include "rollcar/models.hpp"
#include "rollcar/rng.hpp"

namespace rollcar {

struct McmcConfig {
  int n_chains = 2;
  long n_iter = 5000;
  long burn_in = 2500;
  int thin = 1;
  std::uint64_t seed = 1;
  // Optional quantity groups: "gamma" (per-unit session effects) and
  // "imputed" (every missing cell).  Scalars and deviance are always kept.
  std::vector<std::string> monitor = {"gamma"};
  bool overdispersed_starts = true;
  int threads = 1;
  // Record the largest change in any linear predictor caused by recentering.
  bool track_recentering = false;

  long retained() const { return thin > 0 ? (n_iter - burn_in) / thin : 0; }

  bool monitors(const std::string& group) const {
    return std::find(monitor.begin(), monitor.end(), group) != monitor.end();
  }

  void validate() const {
    if (n_chains < 1) throw ConfigError("n_chains must be at least 1");
    if (thin < 1) throw ConfigError("thin must be at least 1");
    if (burn_in < 0 || burn_in >= n_iter) throw ConfigError("burn_in must lie in [0, n_iter)");
    if (retained() < 2) throw ConfigError("fewer than 2 retained draws per chain");
    if (threads < 1) throw ConfigError("threads must be at least 1");
  }
};

inline constexpr double kVarianceFloor = 1e-10;
inline constexpr double kVarianceCeiling = 1e10;

// Graph matching the model's closeness and unit choices; an edgeless
// graph over sessions for families without structured effects.
inline SessionGraph build_graph(const Dataset& ds, const ModelSpec& spec) {
  if (spec.family == Family::CAR) {
    switch (spec.closeness) {
      case Closeness::Type1: return build_type1_weights(ds, spec.unit);
      case Closeness::Type2: return build_type2_weights(ds, spec.unit);
      case Closeness::Custom: return build_custom_weights(ds, spec.unit, spec.custom_weights);
    }
  }
  auto layout = unit_layout(ds, spec.family == Family::LGM ? ClusterUnit::Session : spec.unit);
  return SessionGraph(spec.unit, std::move(layout.labels), std::move(layout.unit_group),
                      std::move(layout.unit_of_session), {});
}

// Flattened view of the data used inside sweeps.
struct ModelData {
  const Dataset* ds = nullptr;
  const SessionGraph* graph = nullptr;
  ModelSpec spec;

  // observed outcomes
  std::vector<std::size_t> obs_index;  // into ds->observations
  std::vector<std::size_t> client, unit;
  std::vector<double> t, y;
  std::vector<int> pattern;

  // missing outcomes
  std::vector<std::size_t> missing;  // into ds->observations

  std::vector<double> client_count, client_sum_t, client_sum_t2;
  std::vector<double> unit_count;
  std::size_t n_pattern1 = 0;

  std::size_t p = 0;  // fixed-effect dimension
  Eigen::MatrixXd xtx;
  Eigen::VectorXd prior_precision, prior_mean;

  std::vector<std::vector<std::size_t>> island_members;  // islands with >= 2 units

  std::size_t n_clients() const { return ds->n(); }
  std::size_t n_units() const { return graph->size(); }
  std::size_t K() const { return ds->K(); }
  std::size_t n_obs() const { return y.size(); }
};

namespace detail {

// Row of the fixed-effect design: [1, t, x_1..x_K, (R, R t)].
inline void design_row(const ModelData& md, std::size_t client, double t, int pattern, double* row) {
  row[0] = 1.0;
  row[1] = t;
  const auto& x = md.ds->clients[client].covariates;
  for (std::size_t k = 0; k < x.size(); ++k) row[2 + k] = x[k];
  if (md.spec.pattern_mixture) {
    row[2 + x.size()] = pattern;
    row[3 + x.size()] = pattern * t;
  }
}

inline double clamp_variance(double v, long& clamps) {
  if (!std::isfinite(v)) return v;
  if (v < kVarianceFloor) {
    ++clamps;
    return kVarianceFloor;
  }
  if (v > kVarianceCeiling) {
    ++clamps;
    return kVarianceCeiling;
  }
  return v;
}

}  // namespace detail

inline ModelData make_model_data(const Dataset& ds, const SessionGraph& graph, const ModelSpec& spec) {
  spec.validate();
  if (spec.pattern_mixture && !ds.has_patterns())
    throw ConfigError("pattern-mixture model requires pattern indicators (derive them first)");
  if (graph.unit_of_session().size() != ds.S()) throw ConfigError("graph does not match dataset sessions");
  ModelData md;
  md.ds = &ds;
  md.graph = &graph;
  md.spec = spec;
  md.client_count.assign(ds.n(), 0.0);
  md.client_sum_t.assign(ds.n(), 0.0);
  md.client_sum_t2.assign(ds.n(), 0.0);
  md.unit_count.assign(graph.size(), 0.0);
  for (std::size_t k = 0; k < ds.observations.size(); ++k) {
    const auto& o = ds.observations[k];
    if (!o.observed()) {
      md.missing.push_back(k);
      continue;
    }
    const std::size_t unit = graph.unit_of_session()[o.session];
    md.obs_index.push_back(k);
    md.client.push_back(o.client);
    md.unit.push_back(unit);
    md.t.push_back(o.time_weeks);
    md.y.push_back(*o.outcome);
    md.pattern.push_back(ds.clients[o.client].pattern.value_or(0));
    md.client_count[o.client] += 1.0;
    md.client_sum_t[o.client] += o.time_weeks;
    md.client_sum_t2[o.client] += o.time_weeks * o.time_weeks;
    md.unit_count[unit] += 1.0;
  }
  for (const auto& c : ds.clients) md.n_pattern1 += c.pattern.value_or(0) == 1 ? 1 : 0;

  const auto& h = spec.hyper;
  md.p = 2 + ds.K() + (spec.pattern_mixture ? 2 : 0);
  md.xtx = Eigen::MatrixXd::Zero(md.p, md.p);
  Eigen::VectorXd row(md.p);
  for (std::size_t i = 0; i < md.n_obs(); ++i) {
    detail::design_row(md, md.client[i], md.t[i], md.pattern[i], row.data());
    md.xtx.noalias() += row * row.transpose();
  }
  md.prior_precision = Eigen::VectorXd::Zero(md.p);
  md.prior_mean = Eigen::VectorXd::Zero(md.p);
  md.prior_precision[0] = 1.0 / h.sigma2_beta0;
  md.prior_precision[1] = 1.0 / h.sigma2_beta1;
  for (std::size_t k = 0; k < ds.K(); ++k) md.prior_precision[2 + k] = 1.0 / h.sigma2_beta;
  if (spec.pattern_mixture) {
    md.prior_precision[2 + ds.K()] = 1.0 / h.delta0_var;
    md.prior_precision[3 + ds.K()] = 1.0 / h.delta1_var;
    md.prior_mean[2 + ds.K()] = h.delta0_mean;
    md.prior_mean[3 + ds.K()] = h.delta1_mean;
  }

  std::vector<std::vector<std::size_t>> members(graph.island_count());
  for (std::size_t s = 0; s < graph.size(); ++s) members[graph.islands().component[s]].push_back(s);
  for (auto& m : members)
    if (m.size() >= 2) md.island_members.push_back(std::move(m));
  return md;
}

// Fixed-effect vector laid out as the design row.
inline Eigen::VectorXd fixed_effects(const ParameterState& st, const ModelData& md) {
  Eigen::VectorXd b(md.p);
  b[0] = st.beta0;
  b[1] = st.beta1;
  for (std::size_t k = 0; k < md.K(); ++k) b[2 + k] = st.beta_cov[k];
  if (md.spec.pattern_mixture) {
    b[2 + md.K()] = st.Delta0;
    b[3 + md.K()] = st.Delta1;
  }
  return b;
}

inline void set_fixed_effects(ParameterState& st, const ModelData& md, const Eigen::VectorXd& b) {
  st.beta0 = b[0];
  st.beta1 = b[1];
  for (std::size_t k = 0; k < md.K(); ++k) st.beta_cov[k] = b[2 + k];
  if (md.spec.pattern_mixture) {
    st.Delta0 = b[2 + md.K()];
    st.Delta1 = b[3 + md.K()];
  }
}

// Fixed part of the predictor for every observed outcome.
inline std::vector<double> fixed_part(const ParameterState& st, const ModelData& md) {
  std::vector<double> eta(md.n_obs());
  std::vector<double> client_shift(md.n_clients(), 0.0);
  for (std::size_t i = 0; i < md.n_clients(); ++i) {
    const auto& x = md.ds->clients[i].covariates;
    for (std::size_t k = 0; k < x.size(); ++k) client_shift[i] += st.beta_cov[k] * x[k];
  }
  const bool pmm = md.spec.pattern_mixture;
  for (std::size_t i = 0; i < md.n_obs(); ++i) {
    double e = st.beta0 + st.beta1 * md.t[i] + client_shift[md.client[i]];
    if (pmm && md.pattern[i] == 1) e += st.Delta0 + st.Delta1 * md.t[i];
    eta[i] = e;
  }
  return eta;
}

// Individual full-conditional updates.  Each is exposed so it can be
// checked against a grid evaluation of its target density.
namespace gibbs {

// Normal draw given prior and data precision-weighted pieces:
// variance = 1 / (prior_prec + data_prec), mean = variance * (prior_prec *
// prior_mean + data_prec * data_estimate), with data_prec * data_estimate
// supplied as data_weighted_sum.
inline double normal_conditional(Rng& rng, double prior_prec, double prior_mean, double data_prec,
                                 double data_weighted_sum) {
  const double prec = prior_prec + data_prec;
  const double mean = (prior_prec * prior_mean + data_weighted_sum) / prec;
  return rng.normal(mean, std::sqrt(1.0 / prec));
}

// Joint normal draw of beta (and Delta under pattern mixture).
inline void fixed_effects(ParameterState& st, const ModelData& md, Rng& rng) {
  const double tau = 1.0 / st.sigma2_eps;
  Eigen::VectorXd xtr = Eigen::VectorXd::Zero(md.p);
  std::vector<double> client_r(md.n_clients(), 0.0);
  double r_sum = 0.0, rt_sum = 0.0, r1_sum = 0.0, rt1_sum = 0.0;
  for (std::size_t i = 0; i < md.n_obs(); ++i) {
    const std::size_t c = md.client[i];
    const double t = md.t[i];
    const double r = md.y[i] - st.b0[c] - st.b1[c] * t - st.gamma(md.unit[i]);
    r_sum += r;
    rt_sum += r * t;
    client_r[c] += r;
    if (md.pattern[i] == 1) {
      r1_sum += r;
      rt1_sum += r * t;
    }
  }
  xtr[0] = r_sum;
  xtr[1] = rt_sum;
  for (std::size_t c = 0; c < md.n_clients(); ++c) {
    const auto& x = md.ds->clients[c].covariates;
    for (std::size_t k = 0; k < x.size(); ++k) xtr[2 + k] += x[k] * client_r[c];
  }
  if (md.spec.pattern_mixture) {
    xtr[2 + md.K()] = r1_sum;
    xtr[3 + md.K()] = rt1_sum;
  }
  Eigen::MatrixXd prec = tau * md.xtx;
  prec.diagonal() += md.prior_precision;
  Eigen::VectorXd rhs = tau * xtr + md.prior_precision.cwiseProduct(md.prior_mean);
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success) throw NumericalError("fixed-effect precision is not positive definite");
  Eigen::VectorXd mean = llt.solve(rhs);
  Eigen::VectorXd z(md.p);
  for (std::size_t k = 0; k < md.p; ++k) z[k] = rng.normal();
  // L L' = prec, so L'^{-1} z has covariance prec^{-1}.
  Eigen::VectorXd draw = mean + llt.matrixU().solve(z);
  set_fixed_effects(st, md, draw);
}

// Maps a client's (sum r, sum t r) onto the fixed-effect design: the design
// row is [1, t, x, R, R t] = [1, t] * A', so X'r = A (sum r, sum t r).
inline void design_loading(const ModelData& md, std::size_t c, Eigen::MatrixXd& A) {
  A.setZero();
  A(0, 0) = 1.0;
  A(1, 1) = 1.0;
  const auto& x = md.ds->clients[c].covariates;
  for (std::size_t k = 0; k < x.size(); ++k) A(2 + k, 0) = x[k];
  if (md.spec.pattern_mixture && md.ds->clients[c].pattern.value_or(0) == 1) {
    A(2 + x.size(), 0) = 1.0;
    A(3 + x.size(), 1) = 1.0;
  }
}

// Blocked update of (beta, b): beta is drawn with the client growth effects
// integrated out, then each client's (b0_i, b1_i) jointly given beta.
// This is an exact draw from the joint conditional of the fixed and client
// effects; one-at-a-time updates of beta0 and the b0_i stall when the
// client-intercept variance dwarfs the residual variance.
inline void fixed_and_client_effects(ParameterState& st, const ModelData& md, Rng& rng) {
  const double tau = 1.0 / st.sigma2_eps;
  const std::size_t n = md.n_clients();
  std::vector<double> sr(n, 0.0), str(n, 0.0);
  for (std::size_t i = 0; i < md.n_obs(); ++i) {
    const double r = md.y[i] - st.gamma(md.unit[i]);
    sr[md.client[i]] += r;
    str[md.client[i]] += r * md.t[i];
  }
  Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(md.p, md.p);
  prec.diagonal() = md.prior_precision;
  Eigen::VectorXd rhs = md.prior_precision.cwiseProduct(md.prior_mean);
  Eigen::MatrixXd A(md.p, 2);
  std::vector<Eigen::Matrix2d> client_prec_inv(n);
  std::vector<Eigen::Matrix2d> ztz(n);
  for (std::size_t c = 0; c < n; ++c) {
    Eigen::Matrix2d zz;
    zz << md.client_count[c], md.client_sum_t[c], md.client_sum_t[c], md.client_sum_t2[c];
    ztz[c] = zz;
    Eigen::Matrix2d P = tau * zz;
    P(0, 0) += 1.0 / st.sigma2_0;
    P(1, 1) += 1.0 / st.sigma2_1;
    client_prec_inv[c] = P.inverse();
    if (md.client_count[c] == 0.0) continue;
    const Eigen::Vector2d ztr(sr[c], str[c]);
    // Z'V^{-1}Z and Z'V^{-1}r via Woodbury
    const Eigen::Matrix2d C = tau * zz - tau * tau * zz * client_prec_inv[c] * zz;
    const Eigen::Vector2d v = tau * ztr - tau * tau * zz * client_prec_inv[c] * ztr;
    design_loading(md, c, A);
    prec.noalias() += A * C * A.transpose();
    rhs.noalias() += A * v;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success) throw NumericalError("fixed-effect precision is not positive definite");
  Eigen::VectorXd z(md.p);
  for (std::size_t k = 0; k < md.p; ++k) z[k] = rng.normal();
  const Eigen::VectorXd beta = llt.solve(rhs) + llt.matrixU().solve(z);
  set_fixed_effects(st, md, beta);

  for (std::size_t c = 0; c < n; ++c) {
    design_loading(md, c, A);
    const Eigen::Vector2d ab = A.transpose() * beta;
    const Eigen::Vector2d ze = Eigen::Vector2d(sr[c], str[c]) - ztz[c] * ab;
    const Eigen::Vector2d mean = client_prec_inv[c] * (tau * ze);
    const Eigen::Matrix2d L = client_prec_inv[c].llt().matrixL();
    const Eigen::Vector2d draw = mean + L * Eigen::Vector2d(rng.normal(), rng.normal());
    st.b0[c] = draw[0];
    st.b1[c] = draw[1];
  }
}

// Sum over each unit's outcomes of y - fixed - client effects.
inline std::vector<double> unit_partial_sums(const ParameterState& st, const ModelData& md,
                                             const std::vector<double>& eta) {
  std::vector<double> sums(md.n_units(), 0.0);
  for (std::size_t i = 0; i < md.n_obs(); ++i) {
    const std::size_t c = md.client[i];
    sums[md.unit[i]] += md.y[i] - eta[i] - st.b0[c] - st.b1[c] * md.t[i];
  }
  return sums;
}

inline void unstructured_effects(ParameterState& st, const ModelData& md, const std::vector<double>& partial,
                                 Rng& rng) {
  const double tau = 1.0 / st.sigma2_eps;
  const double prec = 1.0 / st.sigma2_nu;
  for (std::size_t s = 0; s < md.n_units(); ++s) {
    st.nu[s] = normal_conditional(rng, prec, 0.0, tau * md.unit_count[s],
                                  tau * (partial[s] - md.unit_count[s] * st.u[s]));
  }
}

// Single-site update of each u_s: the CAR conditional is the prior, the
// unit's residuals the likelihood.  Isolated units stay at zero.
inline void structured_effects(ParameterState& st, const ModelData& md, const std::vector<double>& partial,
                               Rng& rng) {
  const double tau = 1.0 / st.sigma2_eps;
  for (std::size_t s = 0; s < md.n_units(); ++s) {
    auto prior = car_conditional(s, st.u, *md.graph, st.delta);
    if (!prior) {
      st.u[s] = 0.0;
      continue;
    }
    st.u[s] = normal_conditional(rng, 1.0 / prior->variance, prior->mean, tau * md.unit_count[s],
                                 tau * (partial[s] - md.unit_count[s] * st.nu[s]));
  }
}

// Conjugate Gamma(a + m/2, b + ss/2) draw of a precision, returned as a
// variance.
inline double variance_from_precision(Rng& rng, double shape, double rate, double m, double ss) {
  return 1.0 / rng.gamma(shape + 0.5 * m, rate + 0.5 * ss);
}

inline double residual_ss(const ParameterState& st, const ModelData& md, const std::vector<double>& eta) {
  double ss = 0.0;
  for (std::size_t i = 0; i < md.n_obs(); ++i) {
    const std::size_t c = md.client[i];
    const double r = md.y[i] - eta[i] - st.b0[c] - st.b1[c] * md.t[i] - st.gamma(md.unit[i]);
    ss += r * r;
  }
  return ss;
}

inline void precisions(ParameterState& st, const ModelData& md, const std::vector<double>& eta, Rng& rng,
                       long& clamps) {
  const auto& h = md.spec.hyper;
  auto sumsq = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
  };
  if (md.spec.fixed_sigma2_eps) {
    st.sigma2_eps = *md.spec.fixed_sigma2_eps;
  } else {
    st.sigma2_eps = detail::clamp_variance(
        variance_from_precision(rng, h.psi_y0, h.psi_y1, static_cast<double>(md.n_obs()), residual_ss(st, md, eta)),
        clamps);
  }
  if (md.spec.client_effects) {
    const double n = static_cast<double>(md.n_clients());
    st.sigma2_0 = detail::clamp_variance(variance_from_precision(rng, h.psi_00, h.psi_01, n, sumsq(st.b0)), clamps);
    st.sigma2_1 = detail::clamp_variance(variance_from_precision(rng, h.psi_10, h.psi_11, n, sumsq(st.b1)), clamps);
  }
  if (md.spec.has_session_effects()) {
    st.sigma2_nu = detail::clamp_variance(
        variance_from_precision(rng, h.psi_nu0, h.psi_nu1, static_cast<double>(md.n_units()), sumsq(st.nu)), clamps);
  }
}

// 1/delta ~ Gamma(d0 + (S - G)/2, d1 + sum_{s<j} w_sj (u_s - u_j)^2 / 2).
inline void car_variance(ParameterState& st, const ModelData& md, Rng& rng, long& clamps) {
  const auto& h = md.spec.hyper;
  const double rank = static_cast<double>(md.n_units() - md.graph->island_count());
  st.delta = detail::clamp_variance(
      variance_from_precision(rng, h.d0, h.d1, rank, car_pairwise_sum(st.u, *md.graph)), clamps);
}

inline void pattern_probability(ParameterState& st, const ModelData& md, Rng& rng) {
  const auto& h = md.spec.hyper;
  const double ones = static_cast<double>(md.n_pattern1);
  const double zeros = static_cast<double>(md.n_clients()) - ones;
  st.pi = rng.beta(h.pi_a + ones, h.pi_b + zeros);
}

}  // namespace gibbs

// Moves the average of the island means of u into beta0 so that u is
// centered across islands.  Units outside any multi-unit island keep
// u = 0; their nu absorbs the shift instead so the likelihood is unchanged.
inline void recenter_structured_effects(ParameterState& st, const ModelData& md) {
  if (md.island_members.empty()) return;
  double grand = 0.0;
  for (const auto& members : md.island_members) {
    double m = 0.0;
    for (auto s : members) m += st.u[s];
    grand += m / static_cast<double>(members.size());
  }
  grand /= static_cast<double>(md.island_members.size());
  for (std::size_t s = 0; s < md.n_units(); ++s) {
    if (md.graph->isolated(s)) st.nu[s] -= grand;
    else st.u[s] -= grand;
  }
  st.beta0 += grand;
}

// Posterior-predictive draw for every missing outcome.  Imputed values
// never enter the parameter updates.
inline void impute_missing_outcomes(ParameterState& st, const ModelData& md, Rng& rng) {
  const double sd = std::sqrt(st.sigma2_eps);
  for (auto k : md.missing) {
    const auto& o = md.ds->observations[k];
    st.imputed[k] = rng.normal(linear_predictor(st, *md.ds, o), sd);
  }
}

struct SweepStats {
  long clamps = 0;
  double max_recenter_change = 0.0;
};

namespace detail {
inline double max_predictor_change(const ParameterState& before, const ParameterState& after, const ModelData& md) {
  double worst = 0.0;
  for (const auto& o : md.ds->observations)
    worst = std::max(worst, std::abs(linear_predictor(before, *md.ds, o) - linear_predictor(after, *md.ds, o)));
  return worst;
}

inline bool finite_state(const ParameterState& st) {
  auto ok = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  const double scalars[] = {st.beta0, st.beta1, st.sigma2_eps, st.sigma2_0, st.sigma2_1,
                            st.sigma2_nu, st.delta, st.Delta0, st.Delta1, st.pi};
  return std::all_of(std::begin(scalars), std::end(scalars), [](double x) { return std::isfinite(x); }) &&
         ok(st.beta_cov) && ok(st.b0) && ok(st.b1) && ok(st.u) && ok(st.nu);
}

inline std::string snapshot(const ParameterState& st) {
  std::ostringstream os;
  os << "beta0=" << st.beta0 << " beta1=" << st.beta1 << " sigma2_eps=" << st.sigma2_eps
     << " sigma2_0=" << st.sigma2_0 << " sigma2_1=" << st.sigma2_1 << " sigma2_nu=" << st.sigma2_nu
     << " delta=" << st.delta << " Delta0=" << st.Delta0 << " Delta1=" << st.Delta1 << " pi=" << st.pi;
  return os.str();
}
}  // namespace detail

// One full Gibbs scan in the fixed order: fixed and client effects, nu,
// u, recentering, precisions, delta, pi, imputation.
inline void gibbs_sweep(ParameterState& st, const ModelData& md, Rng& rng, SweepStats* stats = nullptr,
                        bool track_recentering = false) {
  long clamps = 0;
  if (md.spec.client_effects) gibbs::fixed_and_client_effects(st, md, rng);
  else gibbs::fixed_effects(st, md, rng);
  auto eta = fixed_part(st, md);
  if (md.spec.has_session_effects()) {
    auto partial = gibbs::unit_partial_sums(st, md, eta);
    gibbs::unstructured_effects(st, md, partial, rng);
    if (md.spec.has_structured_effects()) {
      gibbs::structured_effects(st, md, partial, rng);
      if (track_recentering) {
        ParameterState before = st;
        recenter_structured_effects(st, md);
        if (stats)
          stats->max_recenter_change =
              std::max(stats->max_recenter_change, detail::max_predictor_change(before, st, md));
      } else {
        recenter_structured_effects(st, md);
      }
      eta = fixed_part(st, md);  // beta0 moved
    }
  }
  gibbs::precisions(st, md, eta, rng, clamps);
  if (md.spec.has_structured_effects()) gibbs::car_variance(st, md, rng, clamps);
  if (md.spec.pattern_mixture) gibbs::pattern_probability(st, md, rng);
  if (!md.missing.empty()) impute_missing_outcomes(st, md, rng);
  if (stats) stats->clamps += clamps;
  if (!detail::finite_state(st)) throw NumericalError("non-finite value in sampler state", -1, -1, detail::snapshot(st));
}

// Starting point: pooled least squares for the fixed effects, zero random
// effects, moment-based variances clamped to [1e-4, 1e4].  With
// overdispersed starts, chain c is offset by +-2 prior SDs (sign
// alternating with c).
inline ParameterState initialize_state(const ModelData& md, int chain_index, bool overdispersed) {
  const auto& ds = *md.ds;
  const auto& spec = md.spec;
  ParameterState st = zero_state(ds, spec, md.n_units(), md.graph->unit_of_session());
  if (md.n_obs() < 2) throw ValidationError("initialization needs at least two observed outcomes");
  {
    auto [lo, hi] = std::minmax_element(md.t.begin(), md.t.end());
    if (*lo == *hi) throw ValidationError("initialization: fewer than 2 distinct time points, slope is not identified");
  }
  Eigen::MatrixXd xtx = md.xtx;
  xtx.diagonal() += 1e-10 * Eigen::VectorXd::Ones(md.p);  // keeps rank-deficient designs solvable
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(md.p);
  Eigen::VectorXd row(md.p);
  for (std::size_t i = 0; i < md.n_obs(); ++i) {
    detail::design_row(md, md.client[i], md.t[i], md.pattern[i], row.data());
    xty += row * md.y[i];
  }
  set_fixed_effects(st, md, xtx.ldlt().solve(xty));

  auto clamp = [](double v) { return std::clamp(std::isfinite(v) ? v : 1.0, 1e-4, 1e4); };
  auto eta = fixed_part(st, md);
  std::vector<double> resid(md.n_obs());
  double ss = 0.0;
  for (std::size_t i = 0; i < md.n_obs(); ++i) {
    resid[i] = md.y[i] - eta[i];
    ss += resid[i] * resid[i];
  }
  auto group_mean_variance = [&](const std::vector<std::size_t>& key, std::size_t groups) {
    std::vector<double> sum(groups, 0.0), cnt(groups, 0.0);
    for (std::size_t i = 0; i < md.n_obs(); ++i) {
      sum[key[i]] += resid[i];
      cnt[key[i]] += 1.0;
    }
    double m = 0.0, m2 = 0.0, g = 0.0;
    for (std::size_t k = 0; k < groups; ++k) {
      if (cnt[k] == 0.0) continue;
      const double v = sum[k] / cnt[k];
      m += v;
      m2 += v * v;
      g += 1.0;
    }
    if (g < 2.0) return 1.0;
    m /= g;
    return (m2 - g * m * m) / (g - 1.0);
  };
  st.sigma2_eps = spec.fixed_sigma2_eps ? *spec.fixed_sigma2_eps : clamp(ss / static_cast<double>(md.n_obs()));
  st.sigma2_0 = clamp(group_mean_variance(md.client, md.n_clients()));
  {
    // spread of per-client residual slopes
    std::vector<double> sum_r(md.n_clients(), 0.0), sum_tr(md.n_clients(), 0.0);
    for (std::size_t i = 0; i < md.n_obs(); ++i) {
      sum_r[md.client[i]] += resid[i];
      sum_tr[md.client[i]] += resid[i] * md.t[i];
    }
    double m = 0.0, m2 = 0.0, g = 0.0;
    for (std::size_t c = 0; c < md.n_clients(); ++c) {
      const double n = md.client_count[c];
      if (n < 2) continue;
      const double sxx = md.client_sum_t2[c] - md.client_sum_t[c] * md.client_sum_t[c] / n;
      if (sxx <= 1e-12) continue;
      const double slope = (sum_tr[c] - sum_r[c] * md.client_sum_t[c] / n) / sxx;
      m += slope;
      m2 += slope * slope;
      g += 1.0;
    }
    st.sigma2_1 = g >= 2.0 ? clamp((m2 - m * m / g) / (g - 1.0) * 0.5) : 1.0;
  }
  if (spec.has_session_effects()) {
    st.sigma2_nu = clamp(group_mean_variance(md.unit, md.n_units()));
    st.delta = st.sigma2_nu;
  }
  if (!spec.client_effects) {
    st.sigma2_0 = 1.0;
    st.sigma2_1 = 1.0;
  }
  if (spec.pattern_mixture) {
    st.pi = std::clamp(static_cast<double>(md.n_pattern1) / static_cast<double>(md.n_clients()), 0.01, 0.99);
  }

  if (overdispersed) {
    const double sign = chain_index % 2 == 0 ? 1.0 : -1.0;
    const double sd0 = std::sqrt(st.sigma2_0), sd1 = std::sqrt(st.sigma2_1);
    st.beta0 += 2.0 * sign * sd0;
    st.beta1 += 2.0 * sign * sd1;
    if (spec.client_effects) {
      for (std::size_t c = 0; c < md.n_clients(); ++c) {
        const double alt = c % 2 == 0 ? sign : -sign;
        st.b0[c] = 2.0 * alt * sd0;
        st.b1[c] = 2.0 * alt * sd1;
      }
    }
    if (spec.has_session_effects()) {
      const double sdn = std::sqrt(st.sigma2_nu), sdu = std::sqrt(st.delta);
      for (std::size_t s = 0; s < md.n_units(); ++s) {
        const double alt = s % 2 == 0 ? sign : -sign;
        st.nu[s] = 2.0 * alt * sdn;
        if (spec.has_structured_effects() && !md.graph->isolated(s)) st.u[s] = 2.0 * alt * sdu;
      }
      if (spec.has_structured_effects()) recenter_structured_effects(st, md);
    }
  }

  // imputed cells start at the client's observed mean
  if (!md.missing.empty()) {
    std::vector<double> sum(md.n_clients(), 0.0);
    double all = 0.0;
    for (std::size_t i = 0; i < md.n_obs(); ++i) {
      sum[md.client[i]] += md.y[i];
      all += md.y[i];
    }
    all /= static_cast<double>(md.n_obs());
    for (auto k : md.missing) {
      const auto c = ds.observations[k].client;
      st.imputed[k] = md.client_count[c] > 0 ? sum[c] / md.client_count[c] : all;
    }
  }
  return st;
}

// Draws retained from all chains.  draws[chain][q] is the sequence for
// quantity names[q].
struct PosteriorSamples {
  ModelSpec spec;
  McmcConfig config;
  std::string data_hash;
  std::vector<std::string> names;
  std::vector<std::vector<std::vector<double>>> draws;
  ParameterState posterior_mean;  // averaged over every retained draw of every chain
  std::vector<long> clamps;       // per chain
  double max_recenter_change = 0.0;

  std::size_t chains() const { return draws.size(); }
  std::size_t per_chain() const { return draws.empty() || draws[0].empty() ? 0 : draws[0][0].size(); }

  std::optional<std::size_t> index_of(const std::string& name) const {
    for (std::size_t q = 0; q < names.size(); ++q)
      if (names[q] == name) return q;
    return std::nullopt;
  }

  // Draws of one quantity, chains concatenated.
  std::vector<double> pooled(const std::string& name) const {
    auto q = index_of(name);
    if (!q) throw ConfigError("quantity '" + name + "' was not monitored");
    std::vector<double> out;
    for (const auto& chain : draws) out.insert(out.end(), chain[*q].begin(), chain[*q].end());
    return out;
  }

  std::vector<std::vector<double>> by_chain(const std::string& name) const {
    auto q = index_of(name);
    if (!q) throw ConfigError("quantity '" + name + "' was not monitored");
    std::vector<std::vector<double>> out;
    for (const auto& chain : draws) out.push_back(chain[*q]);
    return out;
  }
};

namespace detail {

inline std::vector<std::string> monitored_names(const ModelData& md, const McmcConfig& cfg) {
  std::vector<std::string> names = {"beta0", "beta1"};
  for (const auto& c : md.ds->covariate_names) names.push_back("beta_" + c);
  if (md.spec.pattern_mixture) {
    for (const char* n : {"beta0_star", "beta1_star", "Delta0", "Delta1", "pi"}) names.emplace_back(n);
  }
  names.emplace_back("sigma2_eps");
  if (md.spec.client_effects) {
    names.emplace_back("sigma2_0");
    names.emplace_back("sigma2_1");
  }
  if (md.spec.has_session_effects()) names.emplace_back("sigma2_nu");
  if (md.spec.has_structured_effects()) names.emplace_back("delta");
  names.emplace_back("deviance");
  if (md.spec.has_session_effects() && cfg.monitors("gamma"))
    for (const auto& label : md.graph->labels()) names.push_back("gamma[" + label + "]");
  if (cfg.monitors("imputed"))
    for (auto k : md.missing) names.push_back("y_missing[" + std::to_string(k) + "]");
  return names;
}

inline void record(const ParameterState& st, const ModelData& md, const McmcConfig& cfg,
                   std::vector<std::vector<double>>& out) {
  std::size_t q = 0;
  auto push = [&](double v) { out[q++].push_back(v); };
  if (md.spec.pattern_mixture) {
    auto [m0, m1] = marginalize_pmm(st);
    push(m0);
    push(m1);
  } else {
    push(st.beta0);
    push(st.beta1);
  }
  for (double b : st.beta_cov) push(b);
  if (md.spec.pattern_mixture) {
    push(st.beta0);
    push(st.beta1);
    push(st.Delta0);
    push(st.Delta1);
    push(st.pi);
  }
  push(st.sigma2_eps);
  if (md.spec.client_effects) {
    push(st.sigma2_0);
    push(st.sigma2_1);
  }
  if (md.spec.has_session_effects()) push(st.sigma2_nu);
  if (md.spec.has_structured_effects()) push(st.delta);
  push(deviance(st, *md.ds));
  if (md.spec.has_session_effects() && cfg.monitors("gamma"))
    for (std::size_t s = 0; s < md.n_units(); ++s) push(st.u[s] + st.nu[s]);
  if (cfg.monitors("imputed"))
    for (auto k : md.missing) push(st.imputed.at(k));
}

struct Accumulator {
  ParameterState sum;
  long count = 0;

  void add(const ParameterState& st) {
    if (count == 0) {
      sum = st;
      count = 1;
      return;
    }
    auto acc = [](std::vector<double>& a, const std::vector<double>& b) {
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
    };
    sum.beta0 += st.beta0;
    sum.beta1 += st.beta1;
    acc(sum.beta_cov, st.beta_cov);
    acc(sum.b0, st.b0);
    acc(sum.b1, st.b1);
    acc(sum.u, st.u);
    acc(sum.nu, st.nu);
    sum.sigma2_eps += st.sigma2_eps;
    sum.sigma2_0 += st.sigma2_0;
    sum.sigma2_1 += st.sigma2_1;
    sum.sigma2_nu += st.sigma2_nu;
    sum.delta += st.delta;
    sum.Delta0 += st.Delta0;
    sum.Delta1 += st.Delta1;
    sum.pi += st.pi;
    for (auto& [k, v] : sum.imputed) v += st.imputed.at(k);
    ++count;
  }

  void merge(const Accumulator& other) {
    if (other.count == 0) return;
    if (count == 0) {
      *this = other;
      return;
    }
    const long total = count + other.count;
    add(other.sum);  // sums add the same way draws do
    count = total;
  }

  ParameterState mean() const {
    ParameterState m = sum;
    const double n = static_cast<double>(count);
    auto div = [n](std::vector<double>& a) {
      for (double& x : a) x /= n;
    };
    m.beta0 /= n;
    m.beta1 /= n;
    div(m.beta_cov);
    div(m.b0);
    div(m.b1);
    div(m.u);
    div(m.nu);
    m.sigma2_eps /= n;
    m.sigma2_0 /= n;
    m.sigma2_1 /= n;
    m.sigma2_nu /= n;
    m.delta /= n;
    m.Delta0 /= n;
    m.Delta1 /= n;
    m.pi /= n;
    for (auto& [k, v] : m.imputed) v /= n;
    return m;
  }
};

struct ChainResult {
  std::vector<std::vector<double>> draws;
  Accumulator acc;
  long clamps = 0;
  double max_recenter_change = 0.0;
};

inline ChainResult run_chain(const ModelData& md, const McmcConfig& cfg, int chain) {
  Rng rng(cfg.seed, {stream::kChain, static_cast<std::uint64_t>(chain)});
  ParameterState st = initialize_state(md, chain, cfg.overdispersed_starts);
  ChainResult out;
  const auto names = monitored_names(md, cfg);
  out.draws.assign(names.size(), {});
  for (auto& d : out.draws) d.reserve(static_cast<std::size_t>(cfg.retained()));
  SweepStats stats;
  for (long it = 0; it < cfg.n_iter; ++it) {
    try {
      gibbs_sweep(st, md, rng, &stats, cfg.track_recentering);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " (chain " + std::to_string(chain) + ", iteration " +
                               std::to_string(it) + ")",
                           chain, it, e.snapshot());
    }
    if (it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thin == 0) {
      record(st, md, cfg, out.draws);
      out.acc.add(st);
    }
  }
  out.clamps = stats.clamps;
  out.max_recenter_change = stats.max_recenter_change;
  return out;
}

}  // namespace detail

// Runs cfg.n_chains independent chains (concurrently up to cfg.threads).
// Output depends only on (data, spec, cfg minus threads).
inline PosteriorSamples run_chains(const Dataset& ds, const SessionGraph& graph, const ModelSpec& spec,
                                   const McmcConfig& cfg) {
  cfg.validate();
  const ModelData md = make_model_data(ds, graph, spec);
  std::vector<detail::ChainResult> results(static_cast<std::size_t>(cfg.n_chains));
  std::vector<std::exception_ptr> errors(results.size());
  const int workers = std::min(cfg.threads, cfg.n_chains);
  if (workers <= 1) {
    for (int c = 0; c < cfg.n_chains; ++c) results[c] = detail::run_chain(md, cfg, c);
  } else {
    std::mutex mu;
    int next = 0;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          int c;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= cfg.n_chains) return;
            c = next++;
          }
          try {
            results[c] = detail::run_chain(md, cfg, c);
          } catch (...) {
            errors[c] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  PosteriorSamples out;
  out.spec = spec;
  out.config = cfg;
  out.data_hash = dataset_hash(ds);
  out.names = detail::monitored_names(md, cfg);
  detail::Accumulator acc;
  for (auto& r : results) {
    out.draws.push_back(std::move(r.draws));
    acc.merge(r.acc);
    out.clamps.push_back(r.clamps);
    out.max_recenter_change = std::max(out.max_recenter_change, r.max_recenter_change);
  }
  out.posterior_mean = acc.mean();
  return out;
}

inline PosteriorSamples run_chains(const Dataset& ds, const ModelSpec& spec, const McmcConfig& cfg) {
  const SessionGraph graph = build_graph(ds, spec);
  return run_chains(ds, graph, spec, cfg);
}

// Long-format per-chain draw table.
inline std::string format_chain_draws(const PosteriorSamples& ps, std::size_t chain) {
  std::string out = "iter,quantity,value\n";
  const auto& d = ps.draws.at(chain);
  const std::size_t n = ps.per_chain();
  for (std::size_t it = 0; it < n; ++it) {
    const long iter = ps.config.burn_in + static_cast<long>(it + 1) * ps.config.thin;
    const std::string prefix = std::to_string(iter) + ",";
    for (std::size_t q = 0; q < ps.names.size(); ++q)
      out += prefix + ps.names[q] + "," + util::format_double(d[q][it]) + "\n";
  }
  return out;
}

// Inverse of format_chain_draws: quantity names in first-seen order and
// draws[q][iter].
struct ChainDraws {
  std::vector<std::string> names;
  std::vector<std::vector<double>> draws;
};

inline ChainDraws parse_chain_draws(const std::string& text) {
  ChainDraws out;
  std::map<std::string, std::size_t> index;
  std::size_t row = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = util::split_csv(line);
    if (row == 1) {
      if (f != std::vector<std::string>{"iter", "quantity", "value"})
        throw ParseError(row, "expected header 'iter,quantity,value'");
      continue;
    }
    if (f.size() != 3) throw ParseError(row, "expected 3 fields");
    auto v = util::parse_double(f[2]);
    if (!v) throw ParseError(row, "value '" + f[2] + "' is not a number");
    auto [it, fresh] = index.emplace(f[1], out.names.size());
    if (fresh) {
      out.names.push_back(f[1]);
      out.draws.emplace_back();
    }
    out.draws[it->second].push_back(*v);
  }
  if (out.names.empty()) throw ParseError(row, "no draws");
  for (const auto& d : out.draws)
    if (d.size() != out.draws.front().size()) throw ValidationError("quantities have different numbers of draws");
  return out;
}

}  // namespace rollcar
