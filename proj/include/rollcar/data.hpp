#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rollcar/error.hpp"
#include "rollcar/util.hpp"

namespace rollcar {

// One client-session observation.  client and session are indices into
// Dataset::clients and Dataset::sessions.
struct Observation {
  std::size_t client = 0;
  std::size_t session = 0;
  double time_weeks = 0.0;
  std::optional<double> outcome;

  bool observed() const { return outcome.has_value(); }
};

struct Session {
  std::string id;
  std::string group_id;
  int order = 1;  // 1-based position within the rolling group
  std::optional<int> module;
  std::size_t group = 0;  // index into Dataset::group_ids
};

struct Client {
  std::string id;
  std::optional<int> pattern;       // R_i; 1 = short stay
  std::vector<double> covariates;   // centered, length K
};

// Long-format rolling-group data.  Immutable once built: sessions are
// sorted by (group, order), clients by id, observations by (client,
// session).
class Dataset {
 public:
  std::vector<Observation> observations;
  std::vector<Session> sessions;
  std::vector<Client> clients;
  std::vector<std::string> group_ids;
  std::vector<std::string> covariate_names;
  std::vector<double> covariate_means;  // means removed at load

  std::size_t n() const { return clients.size(); }
  std::size_t S() const { return sessions.size(); }
  std::size_t K() const { return covariate_names.size(); }
  std::size_t G() const { return group_ids.size(); }

  bool has_patterns() const { return !clients.empty() && clients.front().pattern.has_value(); }

  std::size_t observed_count() const {
    return static_cast<std::size_t>(std::count_if(observations.begin(), observations.end(),
                                                  [](const Observation& o) { return o.observed(); }));
  }

  // Indices of observations whose outcome is absent.
  std::vector<std::size_t> missing_cells() const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < observations.size(); ++k)
      if (!observations[k].observed()) out.push_back(k);
    return out;
  }

  // Sessions attended by each client (rows, with or without outcome).
  std::vector<int> sessions_per_client() const {
    std::vector<int> counts(n(), 0);
    for (const auto& o : observations) ++counts[o.client];
    return counts;
  }

  std::optional<std::size_t> find_session(const std::string& id) const {
    for (std::size_t s = 0; s < sessions.size(); ++s)
      if (sessions[s].id == id) return s;
    return std::nullopt;
  }
};

// Raw records used to assemble a Dataset from any source.
struct SessionRecord {
  std::string id;
  std::string group_id;
  int order = 1;
  std::optional<int> module;
};

struct ClientRecord {
  std::string id;
  std::vector<double> covariates;  // uncentered
  std::optional<int> pattern;
};

struct ObservationRecord {
  std::string client_id;
  std::string session_id;
  double time_weeks = 0.0;
  std::optional<double> outcome;
};

// Column names for the CSV reader.  Covariates are every column whose name
// starts with covariate_prefix, in header order.
struct CsvSchema {
  std::string client_id = "client_id";
  std::string session_id = "session_id";
  std::string group_id = "group_id";
  std::string session_order = "session_order";
  std::string module_index = "module_index";
  std::string time_weeks = "time_weeks";
  std::string outcome = "y";
  std::string pattern = "R";  // optional; 1 = short stay
  std::string covariate_prefix = "x_";
};

namespace detail {

inline void center_covariates(Dataset& ds) {
  const std::size_t K = ds.K();
  ds.covariate_means.assign(K, 0.0);
  if (ds.clients.empty()) return;
  for (std::size_t k = 0; k < K; ++k) {
    double sum = 0.0;
    for (const auto& c : ds.clients) sum += c.covariates[k];
    const double mean = sum / static_cast<double>(ds.clients.size());
    for (auto& c : ds.clients) c.covariates[k] -= mean;
    ds.covariate_means[k] = mean;
  }
}

}  // namespace detail

// Validates the records and assembles a Dataset.  Covariates are centered
// over clients; the removed means are kept in covariate_means.
inline Dataset build_dataset(std::vector<SessionRecord> session_records,
                             std::vector<ClientRecord> client_records,
                             const std::vector<ObservationRecord>& obs_records,
                             std::vector<std::string> covariate_names) {
  if (obs_records.empty()) throw ValidationError("dataset has no observations");
  const std::size_t K = covariate_names.size();

  Dataset ds;
  ds.covariate_names = std::move(covariate_names);

  std::sort(session_records.begin(), session_records.end(),
            [](const SessionRecord& a, const SessionRecord& b) {
              if (a.group_id != b.group_id) return util::id_less(a.group_id, b.group_id);
              return a.order < b.order;
            });
  std::unordered_map<std::string, std::size_t> session_index;
  for (auto& r : session_records) {
    if (!session_index.emplace(r.id, ds.sessions.size()).second)
      throw ValidationError("duplicate session id '" + r.id + "'");
    if (ds.group_ids.empty() || ds.group_ids.back() != r.group_id) {
      if (std::find(ds.group_ids.begin(), ds.group_ids.end(), r.group_id) != ds.group_ids.end())
        throw ValidationError("group '" + r.group_id + "' is not contiguous");
      ds.group_ids.push_back(r.group_id);
    }
    Session s;
    s.id = r.id;
    s.group_id = r.group_id;
    s.order = r.order;
    s.module = r.module;
    s.group = ds.group_ids.size() - 1;
    ds.sessions.push_back(std::move(s));
  }
  // order_index consecutive from 1 within each group
  for (std::size_t s = 0; s < ds.sessions.size(); ++s) {
    const bool first = s == 0 || ds.sessions[s - 1].group != ds.sessions[s].group;
    const int expected = first ? 1 : ds.sessions[s - 1].order + 1;
    if (ds.sessions[s].order != expected)
      throw ValidationError("group '" + ds.sessions[s].group_id +
                            "': session_order values must be consecutive from 1 (session '" +
                            ds.sessions[s].id + "' has " + std::to_string(ds.sessions[s].order) +
                            ", expected " + std::to_string(expected) + ")");
  }

  std::sort(client_records.begin(), client_records.end(),
            [](const ClientRecord& a, const ClientRecord& b) { return util::id_less(a.id, b.id); });
  std::unordered_map<std::string, std::size_t> client_index;
  std::size_t with_pattern = 0;
  for (auto& r : client_records) {
    if (!client_index.emplace(r.id, ds.clients.size()).second)
      throw ValidationError("duplicate client id '" + r.id + "'");
    if (r.covariates.size() != K)
      throw ValidationError("client '" + r.id + "' has " + std::to_string(r.covariates.size()) +
                            " covariates, expected " + std::to_string(K));
    if (r.pattern) {
      if (*r.pattern != 0 && *r.pattern != 1)
        throw ValidationError("client '" + r.id + "': pattern indicator must be 0 or 1");
      ++with_pattern;
    }
    ds.clients.push_back(Client{r.id, r.pattern, std::move(r.covariates)});
  }
  if (with_pattern != 0 && with_pattern != ds.clients.size())
    throw ValidationError("pattern indicators must be present for all clients or none");

  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& r : obs_records) {
    auto ci = client_index.find(r.client_id);
    if (ci == client_index.end())
      throw ValidationError("observation references unknown client '" + r.client_id + "'");
    auto si = session_index.find(r.session_id);
    if (si == session_index.end())
      throw ValidationError("observation references unknown session '" + r.session_id + "'");
    if (!(r.time_weeks >= 0.0))
      throw ValidationError("client '" + r.client_id + "', session '" + r.session_id +
                            "': time_weeks must be nonnegative");
    if (!seen.emplace(ci->second, si->second).second)
      throw ValidationError("duplicate observation for client '" + r.client_id + "', session '" +
                            r.session_id + "'");
    ds.observations.push_back(Observation{ci->second, si->second, r.time_weeks, r.outcome});
  }
  std::sort(ds.observations.begin(), ds.observations.end(),
            [](const Observation& a, const Observation& b) {
              return a.client != b.client ? a.client < b.client : a.session < b.session;
            });

  detail::center_covariates(ds);
  return ds;
}

// Parses the canonical long-format CSV text.
inline Dataset parse_dataset(const std::string& text, const CsvSchema& schema = {}) {
  std::vector<std::string> lines;
  {
    std::size_t start = 0;
    while (start < text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      lines.push_back(text.substr(start, end - start));
      start = end + 1;
    }
  }
  if (lines.empty()) throw ParseError(1, "missing header row");
  auto header = util::split_csv(lines[0]);
  for (auto& h : header) h = util::trim(h);
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0] = header[0].substr(3);

  auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) throw ParseError(1, "missing required column '" + name + "'");
      return std::nullopt;
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_client = *column(schema.client_id, true);
  const auto c_session = *column(schema.session_id, true);
  const auto c_group = *column(schema.group_id, true);
  const auto c_order = *column(schema.session_order, true);
  const auto c_time = *column(schema.time_weeks, true);
  const auto c_y = *column(schema.outcome, true);
  const auto c_module = column(schema.module_index, false);
  const auto c_pattern = column(schema.pattern, false);
  std::vector<std::size_t> c_cov;
  std::vector<std::string> cov_names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c].rfind(schema.covariate_prefix, 0) == 0) {
      c_cov.push_back(c);
      cov_names.push_back(header[c]);
    }
  }

  std::map<std::string, SessionRecord> sessions;
  std::map<std::string, ClientRecord> clients;
  std::vector<ObservationRecord> obs;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::size_t row = li + 1;
    if (util::trim(lines[li]).empty()) continue;
    auto f = util::split_csv(lines[li]);
    if (f.size() != header.size())
      throw ParseError(row, "expected " + std::to_string(header.size()) + " fields, found " +
                                std::to_string(f.size()));
    for (auto& x : f) x = util::trim(x);

    auto need = [&](std::size_t c) -> const std::string& {
      if (f[c].empty()) throw ParseError(row, "empty field '" + header[c] + "'");
      return f[c];
    };
    SessionRecord srec;
    srec.id = need(c_session);
    srec.group_id = need(c_group);
    auto order = util::parse_int(need(c_order));
    if (!order || *order < 1) throw ParseError(row, "session_order must be a positive integer");
    srec.order = static_cast<int>(*order);
    if (c_module && !f[*c_module].empty()) {
      auto m = util::parse_int(f[*c_module]);
      if (!m) throw ParseError(row, "module_index must be an integer");
      srec.module = static_cast<int>(*m);
    }
    auto [sit, s_new] = sessions.emplace(srec.id, srec);
    if (!s_new && (sit->second.group_id != srec.group_id || sit->second.order != srec.order ||
                   sit->second.module != srec.module))
      throw ValidationError("row " + std::to_string(row) + ": session '" + srec.id +
                            "' has inconsistent group/order/module attributes");

    ClientRecord crec;
    crec.id = need(c_client);
    for (auto c : c_cov) {
      auto v = util::parse_double(need(c));
      if (!v) throw ParseError(row, "cannot parse covariate '" + header[c] + "'");
      crec.covariates.push_back(*v);
    }
    if (c_pattern && !f[*c_pattern].empty()) {
      auto r = util::parse_int(f[*c_pattern]);
      if (!r || (*r != 0 && *r != 1)) throw ParseError(row, "pattern indicator must be 0 or 1");
      crec.pattern = static_cast<int>(*r);
    }
    auto [cit, c_new] = clients.emplace(crec.id, crec);
    if (!c_new && cit->second.covariates != crec.covariates)
      throw ValidationError("row " + std::to_string(row) + ": covariates of client '" + crec.id +
                            "' vary across rows");
    if (!c_new && cit->second.pattern != crec.pattern)
      throw ValidationError("row " + std::to_string(row) + ": pattern indicator of client '" + crec.id +
                            "' varies across rows");

    ObservationRecord orec;
    orec.client_id = crec.id;
    orec.session_id = srec.id;
    auto t = util::parse_double(need(c_time));
    if (!t) throw ParseError(row, "cannot parse time_weeks");
    if (*t < 0.0) throw ValidationError("row " + std::to_string(row) + ": time_weeks must be nonnegative");
    orec.time_weeks = *t;
    if (!f[c_y].empty()) {
      auto y = util::parse_double(f[c_y]);
      if (!y) throw ParseError(row, "cannot parse outcome");
      orec.outcome = *y;
    }
    obs.push_back(std::move(orec));
  }

  std::vector<SessionRecord> srecs;
  for (auto& [_, r] : sessions) srecs.push_back(r);
  std::vector<ClientRecord> crecs;
  for (auto& [_, r] : clients) crecs.push_back(r);
  return build_dataset(std::move(srecs), std::move(crecs), obs, std::move(cov_names));
}

inline Dataset load_dataset(const std::string& path, const CsvSchema& schema = {}) {
  return parse_dataset(util::read_file(path), schema);
}

// Canonical CSV text.  Covariates are written on their original scale so a
// reload reproduces both the centered values and the recorded means.
inline std::string format_dataset(const Dataset& ds) {
  const bool patterns = ds.has_patterns();
  std::string out = "client_id,session_id,group_id,session_order,module_index,time_weeks,y";
  if (patterns) out += ",R";
  for (const auto& name : ds.covariate_names) out += "," + name;
  out += "\n";
  for (const auto& o : ds.observations) {
    const auto& c = ds.clients[o.client];
    const auto& s = ds.sessions[o.session];
    out += c.id + "," + s.id + "," + s.group_id + "," + std::to_string(s.order) + ",";
    if (s.module) out += std::to_string(*s.module);
    out += "," + util::format_double(o.time_weeks) + ",";
    if (o.outcome) out += util::format_double(*o.outcome);
    if (patterns) out += "," + std::to_string(*c.pattern);
    for (std::size_t k = 0; k < ds.K(); ++k)
      out += "," + util::format_double(c.covariates[k] + ds.covariate_means[k]);
    out += "\n";
  }
  return out;
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  util::write_file(path, format_dataset(ds));
}

inline std::string dataset_hash(const Dataset& ds) { return util::hex64(util::fnv1a(format_dataset(ds))); }

// R_i = 1 when client i attended fewer than threshold sessions.
inline Dataset derive_pattern_indicators(Dataset ds, int threshold) {
  if (threshold < 1) throw ConfigError("pattern threshold must be at least 1");
  const auto counts = ds.sessions_per_client();
  for (std::size_t i = 0; i < ds.n(); ++i) ds.clients[i].pattern = counts[i] < threshold ? 1 : 0;
  return ds;
}

struct AttendanceSummary {
  std::map<int, int> sessions_per_client;  // sessions attended -> number of clients
  std::vector<int> attendance_per_session;
  std::size_t total_observations = 0;

  double fraction_attending_at_least(int k) const {
    int hit = 0, total = 0;
    for (auto [sessions, clients] : sessions_per_client) {
      total += clients;
      if (sessions >= k) hit += clients;
    }
    return total == 0 ? 0.0 : static_cast<double>(hit) / total;
  }
};

inline AttendanceSummary attendance_summary(const Dataset& ds) {
  AttendanceSummary out;
  out.attendance_per_session.assign(ds.S(), 0);
  for (const auto& o : ds.observations) ++out.attendance_per_session[o.session];
  for (int c : ds.sessions_per_client()) ++out.sessions_per_client[c];
  out.total_observations = ds.observations.size();
  return out;
}

}  // namespace rollcar
