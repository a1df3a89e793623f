#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rollcar/data.hpp"
#include "rollcar/rng.hpp"

namespace testing_helpers {

// Rolling-group dataset: `groups[g]` sessions in group g, clients given as
// (group, first session order, sessions attended), one row per session,
// t in half weeks.  Outcomes are left empty.
struct ClientPlan {
  int group;
  int first;
  int count;
};

inline rollcar::Dataset plan_dataset(const std::vector<int>& groups, const std::vector<ClientPlan>& plan,
                                     int module_length = 4) {
  using namespace rollcar;
  std::vector<SessionRecord> sessions;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (int o = 1; o <= groups[g]; ++o)
      sessions.push_back({"g" + std::to_string(g + 1) + "s" + std::to_string(o), std::to_string(g + 1), o,
                          (o - 1) / module_length + 1});
  std::vector<ClientRecord> clients;
  std::vector<ObservationRecord> obs;
  for (std::size_t c = 0; c < plan.size(); ++c) {
    const auto id = "c" + std::to_string(c + 1);
    clients.push_back({id, {}, std::nullopt});
    for (int k = 0; k < plan[c].count; ++k)
      obs.push_back({id, "g" + std::to_string(plan[c].group + 1) + "s" + std::to_string(plan[c].first + k), 0.5 * k,
                     std::nullopt});
  }
  return build_dataset(std::move(sessions), std::move(clients), obs, {});
}

// Fills every outcome from a callback of (observation).
template <class F>
rollcar::Dataset with_outcomes(rollcar::Dataset ds, F f) {
  for (auto& o : ds.observations) o.outcome = f(o);
  return ds;
}

inline double sample_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_var(const std::vector<double>& v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace testing_helpers
