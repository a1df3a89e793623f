#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "rollcar/data.hpp"
#include "rollcar/error.hpp"
#include "rollcar/util.hpp"

namespace rollcar {

enum class ClusterUnit { Session, Module };

inline std::string to_string(ClusterUnit u) { return u == ClusterUnit::Session ? "session" : "module"; }

struct Edge {
  std::size_t a = 0;  // a < b
  std::size_t b = 0;
  double w = 0.0;
};

struct Islands {
  std::vector<std::size_t> component;  // component id per unit, numbered by first appearance
  std::size_t count = 0;
};

// Neighbourhood structure over clustering units (sessions or modules).
// Only positive weights are stored.  Symmetric by construction.
class SessionGraph {
 public:
  SessionGraph() = default;

  // unit_of_session maps each dataset session to its unit; unit_group gives
  // the rolling group of each unit.
  SessionGraph(ClusterUnit unit, std::vector<std::string> labels,
               std::vector<std::size_t> unit_group, std::vector<std::size_t> unit_of_session,
               const std::vector<Edge>& edges)
      : unit_(unit),
        labels_(std::move(labels)),
        unit_group_(std::move(unit_group)),
        unit_of_session_(std::move(unit_of_session)) {
    const std::size_t S = labels_.size();
    neighbors_.assign(S, {});
    row_sums_.assign(S, 0.0);
    std::map<std::pair<std::size_t, std::size_t>, double> merged;
    for (const auto& e : edges) {
      if (e.a >= S || e.b >= S) throw ValidationError("edge endpoint out of range");
      if (e.a == e.b) throw ValidationError("weight matrix must have a zero diagonal");
      if (!(e.w >= 0.0)) throw ValidationError("weights must be nonnegative");
      if (e.w == 0.0) continue;
      auto key = std::minmax(e.a, e.b);
      auto [it, fresh] = merged.emplace(key, e.w);
      if (!fresh && it->second != e.w) throw ValidationError("weight matrix is not symmetric");
    }
    for (const auto& [key, w] : merged) {
      edges_.push_back(Edge{key.first, key.second, w});
      neighbors_[key.first].emplace_back(key.second, w);
      neighbors_[key.second].emplace_back(key.first, w);
    }
    for (std::size_t s = 0; s < S; ++s) {
      std::sort(neighbors_[s].begin(), neighbors_[s].end());
      double sum = 0.0;
      for (const auto& nb : neighbors_[s]) sum += nb.second;
      row_sums_[s] = sum;
    }
    islands_ = find_components();
  }

  std::size_t size() const { return labels_.size(); }
  ClusterUnit unit() const { return unit_; }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::size_t>& unit_group() const { return unit_group_; }
  const std::vector<std::size_t>& unit_of_session() const { return unit_of_session_; }
  const std::vector<std::pair<std::size_t, double>>& neighbors(std::size_t s) const { return neighbors_[s]; }
  const std::vector<Edge>& edges() const { return edges_; }
  double row_sum(std::size_t s) const { return row_sums_[s]; }
  const std::vector<double>& row_sums() const { return row_sums_; }
  const Islands& islands() const { return islands_; }
  std::size_t island_count() const { return islands_.count; }

  double weight(std::size_t s, std::size_t j) const {
    for (const auto& [k, w] : neighbors_[s])
      if (k == j) return w;
    return 0.0;
  }

  bool isolated(std::size_t s) const { return neighbors_[s].empty(); }

 private:
  Islands find_components() const {
    const std::size_t S = size();
    std::vector<std::size_t> parent(S);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
      while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
      }
      return x;
    };
    for (const auto& e : edges_) {
      auto ra = find(e.a), rb = find(e.b);
      if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
    }
    Islands out;
    out.component.assign(S, 0);
    std::vector<std::size_t> id_of_root(S, S);
    for (std::size_t s = 0; s < S; ++s) {
      auto r = find(s);
      if (id_of_root[r] == S) id_of_root[r] = out.count++;
      out.component[s] = id_of_root[r];
    }
    return out;
  }

  ClusterUnit unit_ = ClusterUnit::Session;
  std::vector<std::string> labels_;
  std::vector<std::size_t> unit_group_;
  std::vector<std::size_t> unit_of_session_;
  std::vector<std::vector<std::pair<std::size_t, double>>> neighbors_;
  std::vector<double> row_sums_;
  std::vector<Edge> edges_;
  Islands islands_;
};

// Units of a dataset without any edges.  Module units are (group,
// module_index) pairs ordered by module index within group.
struct UnitLayout {
  std::vector<std::string> labels;
  std::vector<std::size_t> unit_group;
  std::vector<int> unit_order;  // session order or module index
  std::vector<std::size_t> unit_of_session;
};

inline UnitLayout unit_layout(const Dataset& ds, ClusterUnit unit) {
  UnitLayout out;
  out.unit_of_session.resize(ds.S());
  if (unit == ClusterUnit::Session) {
    for (std::size_t s = 0; s < ds.S(); ++s) {
      out.labels.push_back(ds.sessions[s].id);
      out.unit_group.push_back(ds.sessions[s].group);
      out.unit_order.push_back(ds.sessions[s].order);
      out.unit_of_session[s] = s;
    }
    return out;
  }
  std::map<std::pair<std::size_t, int>, std::size_t> index;
  for (const auto& s : ds.sessions) {
    if (!s.module)
      throw ConfigError("module clustering requested but session '" + s.id + "' has no module_index");
    index.emplace(std::make_pair(s.group, *s.module), 0);
  }
  for (auto& [key, idx] : index) {
    idx = out.labels.size();
    out.labels.push_back(ds.group_ids[key.first] + ":" + std::to_string(key.second));
    out.unit_group.push_back(key.first);
    out.unit_order.push_back(key.second);
  }
  for (std::size_t s = 0; s < ds.S(); ++s)
    out.unit_of_session[s] = index.at({ds.sessions[s].group, *ds.sessions[s].module});
  return out;
}

// Closeness Type 1: units adjacent in time within the same rolling group.
inline SessionGraph build_type1_weights(const Dataset& ds, ClusterUnit unit = ClusterUnit::Session) {
  auto layout = unit_layout(ds, unit);
  std::vector<Edge> edges;
  const std::size_t U = layout.labels.size();
  // Units are sorted by (group, order), so temporal neighbours are adjacent.
  for (std::size_t s = 0; s + 1 < U; ++s) {
    if (layout.unit_group[s] == layout.unit_group[s + 1] &&
        layout.unit_order[s + 1] - layout.unit_order[s] == 1)
      edges.push_back(Edge{s, s + 1, 1.0});
  }
  return SessionGraph(unit, std::move(layout.labels), std::move(layout.unit_group),
                      std::move(layout.unit_of_session), edges);
}

// Attendee overlap |A ∩ B| / |A ∪ B| for two sorted client lists.
inline double jaccard(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t common = 0, i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++common;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - common;
  return uni == 0 ? 0.0 : static_cast<double>(common) / static_cast<double>(uni);
}

// Closeness Type 2: shared-attendee proportion within a rolling group.
inline SessionGraph build_type2_weights(const Dataset& ds, ClusterUnit unit = ClusterUnit::Session) {
  auto layout = unit_layout(ds, unit);
  const std::size_t U = layout.labels.size();
  std::vector<std::vector<std::size_t>> attendees(U);
  for (const auto& o : ds.observations) attendees[layout.unit_of_session[o.session]].push_back(o.client);
  for (std::size_t s = 0; s < U; ++s) {
    auto& a = attendees[s];
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    if (a.empty()) throw ValidationError("unit '" + layout.labels[s] + "' has no attendees");
  }
  std::vector<Edge> edges;
  for (std::size_t s = 0; s < U; ++s) {
    for (std::size_t j = s + 1; j < U && layout.unit_group[j] == layout.unit_group[s]; ++j) {
      const double w = jaccard(attendees[s], attendees[j]);
      if (w > 0.0) edges.push_back(Edge{s, j, w});
    }
  }
  return SessionGraph(unit, std::move(layout.labels), std::move(layout.unit_group),
                      std::move(layout.unit_of_session), edges);
}

// User-supplied weights given as (unit, unit, weight) triplets over the
// dataset's units.
inline SessionGraph build_custom_weights(const Dataset& ds, ClusterUnit unit,
                                         const std::vector<Edge>& weights) {
  auto layout = unit_layout(ds, unit);
  return SessionGraph(unit, std::move(layout.labels), std::move(layout.unit_group),
                      std::move(layout.unit_of_session), weights);
}

// Connected components of the positive-weight adjacency.
inline Islands detect_islands(const SessionGraph& graph) { return graph.islands(); }

struct CarMoments {
  double mean = 0.0;
  double variance = 0.0;
};

// Full conditional of u_s given the other structured effects: the
// weighted neighbour average with variance delta / w_s+.  Returns nullopt
// for an isolated unit (w_s+ = 0).
inline std::optional<CarMoments> car_conditional(std::size_t s, const std::vector<double>& u,
                                                 const SessionGraph& graph, double delta) {
  if (!(delta > 0.0)) throw ConfigError("car_conditional requires delta > 0");
  const double ws = graph.row_sum(s);
  if (ws <= 0.0) return std::nullopt;
  double acc = 0.0;
  for (const auto& [j, w] : graph.neighbors(s)) acc += w * u[j];
  return CarMoments{acc / ws, delta / ws};
}

// Debug export: one row per stored pair in both orientations.
inline std::string format_weights_csv(const SessionGraph& graph) {
  std::string out = "s,j,w\n";
  for (std::size_t s = 0; s < graph.size(); ++s)
    for (const auto& [j, w] : graph.neighbors(s))
      out += graph.labels()[s] + "," + graph.labels()[j] + "," + util::format_double(w) + "\n";
  return out;
}

}  // namespace rollcar
