#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rollcar/data.hpp"
#include "rollcar/error.hpp"
#include "rollcar/models.hpp"
#include "rollcar/sampler.hpp"
#include "rollcar/util.hpp"

namespace rollcar {

// Potential scale reduction factor, or the reason it is undefined.
struct Psrf {
  double value = std::nan("");
  std::string error;
  bool ok() const { return error.empty(); }
};

// Classic (non-split) Gelman-Rubin statistic over m >= 2 equal-length
// chains.
inline Psrf gelman_rubin(const std::vector<std::vector<double>>& chains) {
  const std::size_t m = chains.size();
  if (m < 2) return {std::nan(""), "need at least 2 chains"};
  const std::size_t n = chains[0].size();
  if (n < 10) return {std::nan(""), "need at least 10 draws per chain"};
  for (const auto& c : chains)
    if (c.size() != n) return {std::nan(""), "chains have unequal lengths"};

  std::vector<double> means(m);
  double W = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (double x : chains[j]) s += x;
    means[j] = s / static_cast<double>(n);
    double ss = 0.0;
    for (double x : chains[j]) ss += (x - means[j]) * (x - means[j]);
    W += ss / static_cast<double>(n - 1);
  }
  W /= static_cast<double>(m);
  double grand = 0.0;
  for (double mu : means) grand += mu;
  grand /= static_cast<double>(m);
  double B = 0.0;
  for (double mu : means) B += (mu - grand) * (mu - grand);
  B *= static_cast<double>(n) / static_cast<double>(m - 1);
  if (!(W > 0.0)) return {std::nan(""), "within-chain variance is zero (constant chains)"};
  const double nn = static_cast<double>(n);
  const double V = (nn - 1.0) / nn * W + B / nn;
  return {std::sqrt(V / W), {}};
}

// Narrowest window holding floor(level * m) sorted draws; ties go to the
// lowest start.
inline std::pair<double, double> hpd_interval(std::vector<double> draws, double level) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("hpd level must lie in (0, 1)");
  const std::size_t m = draws.size();
  const auto k = static_cast<std::size_t>(std::floor(level * static_cast<double>(m) + 1e-9));
  if (m < 2 || k < 2 || k > m) throw ConfigError("too few draws for an HPD interval at this level");
  std::sort(draws.begin(), draws.end());
  std::size_t best = 0;
  double width = draws[k - 1] - draws[0];
  for (std::size_t i = 1; i + k <= m; ++i) {
    const double w = draws[i + k - 1] - draws[i];
    if (w < width) {
      width = w;
      best = i;
    }
  }
  return {draws[best], draws[best + k - 1]};
}

// Replicate-level standard error: sample SD / sqrt(replicates).
inline double mc_standard_error(const std::vector<double>& estimates) {
  const std::size_t r = estimates.size();
  if (r < 2) throw ConfigError("mc_standard_error needs at least 2 replicates");
  double mean = 0.0;
  for (double x : estimates) mean += x;
  mean /= static_cast<double>(r);
  double ss = 0.0;
  for (double x : estimates) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(r - 1)) / std::sqrt(static_cast<double>(r));
}

struct DevianceSummary {
  double dbar = 0.0;
  double pd = 0.0;
  double dic = 0.0;
  bool parameterization_sensitive = false;
};

inline DevianceSummary deviance_summaries(const std::vector<double>& deviance_draws, const ParameterState& mean_state,
                                          const Dataset& ds, const ModelSpec& spec) {
  DevianceSummary out;
  if (deviance_draws.empty()) throw ConfigError("no deviance draws");
  double s = 0.0;
  for (double d : deviance_draws) s += d;
  out.dbar = s / static_cast<double>(deviance_draws.size());
  out.pd = out.dbar - deviance(mean_state, ds);
  out.dic = out.dbar + out.pd;
  out.parameterization_sensitive = spec.pattern_mixture;
  return out;
}

struct QuantitySummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double hpd_lo = 0.0;
  double hpd_hi = 0.0;
  std::optional<double> psrf;
};

struct FitSummary {
  std::string model;
  std::string data_hash;
  std::size_t chains = 0;
  std::size_t draws_per_chain = 0;
  double hpd_level = 0.95;
  std::vector<QuantitySummary> quantities;
  DevianceSummary deviance;
  double psrf_threshold = 1.1;
  bool converged = true;
  bool pattern_mixture = false;
  std::string dic_note;

  const QuantitySummary* find(const std::string& name) const {
    for (const auto& q : quantities)
      if (q.name == name) return &q;
    return nullptr;
  }
  const QuantitySummary& at(const std::string& name) const {
    auto q = find(name);
    if (!q) throw ConfigError("summary has no quantity '" + name + "'");
    return *q;
  }
};

inline QuantitySummary summarize_quantity(const std::string& name, const std::vector<std::vector<double>>& chains,
                                          double level) {
  QuantitySummary q;
  q.name = name;
  std::vector<double> pooled;
  for (const auto& c : chains) pooled.insert(pooled.end(), c.begin(), c.end());
  double s = 0.0;
  for (double x : pooled) s += x;
  q.mean = s / static_cast<double>(pooled.size());
  double ss = 0.0;
  for (double x : pooled) ss += (x - q.mean) * (x - q.mean);
  q.sd = pooled.size() > 1 ? std::sqrt(ss / static_cast<double>(pooled.size() - 1)) : 0.0;
  auto [lo, hi] = hpd_interval(pooled, level);
  q.hpd_lo = lo;
  q.hpd_hi = hi;
  auto r = gelman_rubin(chains);
  if (r.ok()) q.psrf = r.value;
  return q;
}

// Posterior summaries for every monitored quantity, plus per-pattern
// trajectories for pattern-mixture fits.
inline FitSummary summarize(const PosteriorSamples& ps, const Dataset& ds, double level = 0.95,
                            double psrf_threshold = 1.1) {
  FitSummary out;
  out.model = ps.spec.name();
  out.data_hash = ps.data_hash;
  out.chains = ps.chains();
  out.draws_per_chain = ps.per_chain();
  out.hpd_level = level;
  out.psrf_threshold = psrf_threshold;
  out.pattern_mixture = ps.spec.pattern_mixture;
  for (const auto& name : ps.names) out.quantities.push_back(summarize_quantity(name, ps.by_chain(name), level));

  if (ps.spec.pattern_mixture) {
    auto b0 = ps.by_chain("beta0_star"), b1 = ps.by_chain("beta1_star");
    auto d0 = ps.by_chain("Delta0"), d1 = ps.by_chain("Delta1");
    auto combine = [](std::vector<std::vector<double>> a, const std::vector<std::vector<double>>& b) {
      for (std::size_t c = 0; c < a.size(); ++c)
        for (std::size_t i = 0; i < a[c].size(); ++i) a[c][i] += b[c][i];
      return a;
    };
    out.quantities.push_back(summarize_quantity("pattern0_intercept", b0, level));
    out.quantities.push_back(summarize_quantity("pattern0_slope", b1, level));
    out.quantities.push_back(summarize_quantity("pattern1_intercept", combine(b0, d0), level));
    out.quantities.push_back(summarize_quantity("pattern1_slope", combine(b1, d1), level));
    out.quantities.push_back(summarize_quantity("pattern_intercept_diff", d0, level));
    out.quantities.push_back(summarize_quantity("pattern_slope_diff", d1, level));
  }

  out.deviance = deviance_summaries(ps.pooled("deviance"), ps.posterior_mean, ds, ps.spec);
  if (out.deviance.parameterization_sensitive)
    out.dic_note = "DIC is sensitive to parameterization for mixture models; compare Dbar";
  for (const auto& q : out.quantities)
    if (q.psrf && *q.psrf > psrf_threshold) out.converged = false;
  return out;
}

inline nlohmann::json summary_to_json(const FitSummary& s) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json q = nlohmann::json::array();
  for (const auto& x : s.quantities)
    q.push_back({{"name", x.name}, {"mean", x.mean}, {"sd", x.sd}, {"hpd_lo", x.hpd_lo}, {"hpd_hi", x.hpd_hi},
                 {"psrf", opt(x.psrf)}});
  nlohmann::json j = {{"model", s.model},
                      {"data_hash", s.data_hash},
                      {"chains", s.chains},
                      {"draws_per_chain", s.draws_per_chain},
                      {"hpd_level", s.hpd_level},
                      {"Dbar", s.deviance.dbar},
                      {"pD", s.deviance.pd},
                      {"DIC", s.deviance.dic},
                      {"dic_parameterization_sensitive", s.deviance.parameterization_sensitive},
                      {"psrf_threshold", s.psrf_threshold},
                      {"converged", s.converged},
                      {"pattern_mixture", s.pattern_mixture},
                      {"quantities", q}};
  if (!s.dic_note.empty()) j["dic_note"] = s.dic_note;
  return j;
}

inline FitSummary summary_from_json(const nlohmann::json& j) {
  try {
    FitSummary s;
    s.model = j.at("model").get<std::string>();
    s.data_hash = j.at("data_hash").get<std::string>();
    s.chains = j.at("chains").get<std::size_t>();
    s.draws_per_chain = j.at("draws_per_chain").get<std::size_t>();
    s.hpd_level = j.value("hpd_level", 0.95);
    s.deviance.dbar = j.at("Dbar").get<double>();
    s.deviance.pd = j.at("pD").get<double>();
    s.deviance.dic = j.at("DIC").get<double>();
    s.deviance.parameterization_sensitive = j.value("dic_parameterization_sensitive", false);
    s.psrf_threshold = j.value("psrf_threshold", 1.1);
    s.converged = j.value("converged", true);
    s.pattern_mixture = j.value("pattern_mixture", false);
    s.dic_note = j.value("dic_note", std::string());
    for (const auto& x : j.at("quantities")) {
      QuantitySummary q;
      q.name = x.at("name").get<std::string>();
      q.mean = x.at("mean").get<double>();
      q.sd = x.at("sd").get<double>();
      q.hpd_lo = x.at("hpd_lo").get<double>();
      q.hpd_hi = x.at("hpd_hi").get<double>();
      if (!x.at("psrf").is_null()) q.psrf = x.at("psrf").get<double>();
      s.quantities.push_back(std::move(q));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed fit summary: ") + e.what());
  }
}

inline std::string format_summary_csv(const FitSummary& s) {
  std::string out = "quantity,mean,sd,hpd_lo,hpd_hi,psrf\n";
  for (const auto& q : s.quantities) {
    out += q.name + "," + util::format_double(q.mean) + "," + util::format_double(q.sd) + "," +
           util::format_double(q.hpd_lo) + "," + util::format_double(q.hpd_hi) + "," +
           (q.psrf ? util::format_double(*q.psrf) : std::string("NA")) + "\n";
  }
  return out;
}

struct NamedSummary {
  std::string source;  // file name, used as the tie-break
  FitSummary summary;
};

// Model comparison table sorted by Dbar ascending.  All summaries must
// come from the same dataset.
inline std::string compare_summaries(std::vector<NamedSummary> fits) {
  if (fits.size() < 2) throw ConfigError("compare needs at least 2 fit summaries");
  for (const auto& f : fits)
    if (f.summary.data_hash != fits.front().summary.data_hash)
      throw ValidationError("summaries come from different datasets ('" + fits.front().source + "' vs '" + f.source +
                            "')");
  std::stable_sort(fits.begin(), fits.end(), [](const NamedSummary& a, const NamedSummary& b) {
    if (a.summary.deviance.dbar != b.summary.deviance.dbar) return a.summary.deviance.dbar < b.summary.deviance.dbar;
    return a.source < b.source;
  });
  std::string out = "model,source,dbar,pd,dic,beta1_mean,beta1_hpd_lo,beta1_hpd_hi,converged\n";
  for (const auto& f : fits) {
    const auto& s = f.summary;
    const auto& b1 = s.at("beta1");
    out += s.model + "," + f.source + "," + util::format_double(s.deviance.dbar) + "," +
           util::format_double(s.deviance.pd) + "," + util::format_double(s.deviance.dic) + "," +
           util::format_double(b1.mean) + "," + util::format_double(b1.hpd_lo) + "," + util::format_double(b1.hpd_hi) +
           "," + (s.converged ? "true" : "false") + "\n";
  }
  return out;
}

}  // namespace rollcar
