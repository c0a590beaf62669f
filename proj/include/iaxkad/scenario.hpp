#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "iaxkad/sim.hpp"

namespace iaxkad {

using ordered_json = nlohmann::ordered_json;

struct ScenarioError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Declarative description of one simulation run. Times are absolute
/// simulated milliseconds; schedules must be time-sorted. Endpoints refer to
/// the addresses the run assigns: node i gets 10.a.b.c:4569 with
/// a.b.c = big-endian i+1, and address peer<i>@sim.local.
struct Scenario {
  KademliaParams params;
  int n_peers = 2;
  std::uint64_t seed = 1;
  double loss = 0.0;
  SimTime latency_min = 10;
  SimTime latency_max = 50;
  SimTime join_spacing_ms = 300;
  int convergence_passes = 1;
  int auto_calls = 0;  // random calls generated after convergence
  std::vector<std::pair<SimTime, std::string>> join_schedule;
  std::vector<std::pair<SimTime, std::string>> release_schedule;
  std::vector<std::pair<SimTime, std::string>> crash_schedule;
  struct CallEntry {
    SimTime t = 0;
    std::string caller;
    std::string callee;
  };
  std::vector<CallEntry> call_workload;
  std::optional<SimTime> horizon_ms;

  void validate() const {
    params.validate();
    if (n_peers < 1) throw ScenarioError("n_peers must be >= 1");
    if (loss < 0.0 || loss > 1.0) throw ScenarioError("loss out of [0,1]");
    if (latency_min < 0 || latency_max < latency_min)
      throw ScenarioError("bad latency range");
    auto sorted = [](const auto& v) {
      return std::is_sorted(v.begin(), v.end(), [](const auto& a, const auto& b) {
        return a.first < b.first;
      });
    };
    if (!sorted(join_schedule) || !sorted(release_schedule) ||
        !sorted(crash_schedule))
      throw ScenarioError("schedules must be time-sorted");
    if (!std::is_sorted(call_workload.begin(), call_workload.end(),
                        [](const auto& a, const auto& b) { return a.t < b.t; }))
      throw ScenarioError("call_workload must be time-sorted");
  }

  static Scenario from_json(const nlohmann::json& j) {
    Scenario s;
    if (j.contains("params")) {
      const auto& p = j.at("params");
      s.params.alpha = p.value("alpha", s.params.alpha);
      s.params.bits = p.value("bits", s.params.bits);
      s.params.k = p.value("k", s.params.k);
      s.params.offline_expiry_ms =
          p.value("offline_expiry_ms", s.params.offline_expiry_ms);
      s.params.purge_interval_ms =
          p.value("purge_interval_ms", s.params.purge_interval_ms);
    }
    s.n_peers = j.value("n_peers", s.n_peers);
    s.seed = j.value("seed", s.seed);
    s.loss = j.value("loss", s.loss);
    s.latency_min = j.value("latency_min", s.latency_min);
    s.latency_max = j.value("latency_max", s.latency_max);
    s.join_spacing_ms = j.value("join_spacing_ms", s.join_spacing_ms);
    s.convergence_passes = j.value("convergence_passes", s.convergence_passes);
    s.auto_calls = j.value("auto_calls", s.auto_calls);
    auto load_sched = [&](const char* key,
                          std::vector<std::pair<SimTime, std::string>>& out) {
      if (!j.contains(key)) return;
      for (const auto& e : j.at(key))
        out.emplace_back(e.at(0).get<SimTime>(), e.at(1).get<std::string>());
    };
    load_sched("join_schedule", s.join_schedule);
    load_sched("release_schedule", s.release_schedule);
    load_sched("crash_schedule", s.crash_schedule);
    if (j.contains("call_workload")) {
      for (const auto& e : j.at("call_workload"))
        s.call_workload.push_back({e.at(0).get<SimTime>(),
                                   e.at(1).get<std::string>(),
                                   e.at(2).get<std::string>()});
    }
    if (j.contains("horizon_ms")) s.horizon_ms = j.at("horizon_ms").get<SimTime>();
    return s;
  }
};

/// Aggregated run results; a pure function of (Scenario, seed).
struct Metrics {
  // config echo
  KademliaParams params;
  std::uint64_t seed = 0;
  int n_peers = 0;
  double loss = 0.0;
  // traffic
  std::uint64_t frames_sent = 0;
  std::uint64_t frames_delivered = 0;
  std::uint64_t frames_dropped = 0;
  std::uint64_t frames_in_flight_end = 0;
  std::map<std::string, std::uint64_t> sent_by_kind;
  // protocol outcomes
  std::uint64_t joins_attempted = 0;
  std::uint64_t joins_succeeded = 0;
  SimTime convergence_time_ms = 0;
  std::uint64_t lookups_completed = 0;
  double mean_lookup_rounds = 0.0;
  double mean_lookup_messages = 0.0;
  std::uint64_t resolves_attempted = 0;
  std::uint64_t resolves_found = 0;
  std::uint64_t calls_attempted = 0;
  std::uint64_t calls_up = 0;
  std::uint64_t releases_completed = 0;
  std::uint64_t media_frames_received = 0;
  SimTime end_time_ms = 0;

  double resolve_success_rate() const {
    return resolves_attempted == 0
               ? 0.0
               : static_cast<double>(resolves_found) /
                     static_cast<double>(resolves_attempted);
  }
  double call_success_rate() const {
    return calls_attempted == 0 ? 0.0
                                : static_cast<double>(calls_up) /
                                      static_cast<double>(calls_attempted);
  }

  ordered_json to_json() const {
    ordered_json j;
    j["config"] = {{"alpha", params.alpha},
                   {"bits", params.bits},
                   {"k", params.k},
                   {"offline_expiry_ms", params.offline_expiry_ms},
                   {"purge_interval_ms", params.purge_interval_ms},
                   {"seed", seed},
                   {"n_peers", n_peers},
                   {"loss", loss}};
    j["traffic"] = {{"sent", frames_sent},
                    {"delivered", frames_delivered},
                    {"dropped", frames_dropped},
                    {"in_flight_at_end", frames_in_flight_end},
                    {"by_kind", sent_by_kind}};
    j["joins"] = {{"attempted", joins_attempted},
                  {"succeeded", joins_succeeded},
                  {"convergence_time_ms", convergence_time_ms}};
    j["lookups"] = {{"completed", lookups_completed},
                    {"mean_rounds", mean_lookup_rounds},
                    {"mean_messages", mean_lookup_messages}};
    j["resolution"] = {{"attempted", resolves_attempted},
                       {"found", resolves_found},
                       {"success_rate", resolve_success_rate()}};
    j["calls"] = {{"attempted", calls_attempted},
                  {"up", calls_up},
                  {"success_rate", call_success_rate()},
                  {"media_frames_received", media_frames_received}};
    j["releases"] = {{"completed", releases_completed}};
    j["end_time_ms"] = end_time_ms;
    return j;
  }

  std::string to_string() const { return to_json().dump(2) + "\n"; }
};

namespace detail {

struct WorkloadDriver {
  SimNet* net = nullptr;
  Metrics* metrics = nullptr;

  void place_call(PeerNode* caller, const std::string& callee_address) {
    if (!net->is_live(*caller)) return;
    ++metrics->calls_attempted;
    ++metrics->resolves_attempted;
    SimNet* n = net;
    Metrics* m = metrics;
    caller->setup_call(
        callee_address, net->now(),
        [n, m, caller](std::optional<std::uint16_t> call_id, std::string reason,
                       SimTime when) {
          if (!call_id) {
            if (reason != "no route") ++m->resolves_found;
            return;
          }
          ++m->resolves_found;
          ++m->calls_up;
          std::uint16_t id = *call_id;
          for (int i = 0; i < 3; ++i) {
            n->post(when + 20 * (i + 1), [caller, id, n] {
              if (caller->call(id) && caller->call(id)->phase == CallPhase::up)
                caller->send_media(id, {0x61, 0x62, 0x63}, n->now());
            });
          }
          n->post(when + 100, [caller, id, n] {
            if (caller->call(id)) caller->hangup(id, n->now());
          });
        });
  }
};

}  // namespace detail

inline Metrics run_scenario(
    const Scenario& s, std::function<void(const std::string&)> trace = {}) {
  s.validate();
  Metrics m;
  m.params = s.params;
  m.seed = s.seed;
  m.n_peers = s.n_peers;
  m.loss = s.loss;

  LinkModel link;
  link.loss_probability = s.loss;
  link.latency_min = s.latency_min;
  link.latency_max = s.latency_max;
  SimNet net(s.params, s.seed, link);
  if (trace) net.set_trace(std::move(trace));
  for (int i = 0; i < s.n_peers; ++i)
    net.add_node("peer" + std::to_string(i) + "@sim.local", i == 0);

  auto resolve_endpoint = [&](const std::string& text) -> PeerNode* {
    PeerNode* n = net.node(Endpoint::parse(text));
    if (!n) throw ScenarioError("schedule references unknown endpoint: " + text);
    return n;
  };
  // Validate every schedule reference before any event runs.
  for (const auto& [t, ep] : s.join_schedule) resolve_endpoint(ep);
  for (const auto& [t, ep] : s.release_schedule) resolve_endpoint(ep);
  for (const auto& [t, ep] : s.crash_schedule) resolve_endpoint(ep);
  for (const auto& c : s.call_workload) {
    resolve_endpoint(c.caller);
    resolve_endpoint(c.callee);
  }

  Contact bootstrap_contact = net.node_at(0).self_contact(0);
  auto schedule_join = [&](PeerNode* node, SimTime t) {
    ++m.joins_attempted;
    bool is_bootstrap = node == &net.node_at(0);
    net.post(t, [node, is_bootstrap, bootstrap_contact, &m, &net] {
      std::optional<Contact> first;
      if (!is_bootstrap) first = bootstrap_contact;
      node->join(first, net.now(), [&m](bool ok, SimTime when) {
        if (ok) {
          ++m.joins_succeeded;
          m.convergence_time_ms = std::max(m.convergence_time_ms, when);
        }
      });
    });
  };

  SimTime last_join = 0;
  if (s.join_schedule.empty()) {
    for (int i = 0; i < s.n_peers; ++i) {
      SimTime t = i * s.join_spacing_ms;
      schedule_join(&net.node_at(static_cast<std::size_t>(i)), t);
      last_join = t;
    }
  } else {
    for (const auto& [t, ep] : s.join_schedule) {
      schedule_join(resolve_endpoint(ep), t);
      last_join = std::max(last_join, t);
    }
  }
  net.run_until(last_join + 20 * kSecond);

  for (int pass = 0; pass < s.convergence_passes; ++pass) {
    SimTime base = net.now();
    for (int i = 0; i < s.n_peers; ++i) {
      PeerNode* node = &net.node_at(static_cast<std::size_t>(i));
      net.post(base + i * 10, [node, &net] {
        if (node->registration() != Registration::registered) return;
        node->lookup_k_closest(node->id(), net.now(),
                               [](LookupResult, SimTime) {});
      });
    }
    net.run_for(static_cast<SimTime>(s.n_peers) * 10 + 15 * kSecond);
  }
  m.convergence_time_ms = std::max(m.convergence_time_ms, net.now());

  detail::WorkloadDriver driver{&net, &m};
  SimTime last_event = net.now();

  for (const auto& [t, ep] : s.release_schedule) {
    PeerNode* node = resolve_endpoint(ep);
    net.post(t, [node, &net, &m] {
      if (node->registration() != Registration::registered) return;
      node->release(net.now(), [&m](SimTime) { ++m.releases_completed; });
    });
    last_event = std::max(last_event, t);
  }
  for (const auto& [t, ep] : s.crash_schedule) {
    net.inject_crash(Endpoint::parse(ep), t);
    last_event = std::max(last_event, t);
  }
  for (const auto& c : s.call_workload) {
    PeerNode* caller = resolve_endpoint(c.caller);
    std::string callee_address = resolve_endpoint(c.callee)->address();
    net.post(c.t, [&driver, caller, callee_address] {
      driver.place_call(caller, callee_address);
    });
    last_event = std::max(last_event, c.t);
  }
  if (s.auto_calls > 0) {
    std::uniform_int_distribution<int> pick(0, s.n_peers - 1);
    SimTime base = net.now();
    for (int i = 0; i < s.auto_calls; ++i) {
      int a = pick(net.rng());
      int b = pick(net.rng());
      if (a == b) b = (b + 1) % s.n_peers;
      PeerNode* caller = &net.node_at(static_cast<std::size_t>(a));
      std::string callee_address =
          net.node_at(static_cast<std::size_t>(b)).address();
      SimTime t = base + (i + 1) * 200;
      net.post(t, [&driver, caller, callee_address] {
        driver.place_call(caller, callee_address);
      });
      last_event = std::max(last_event, t);
    }
  }

  SimTime horizon = s.horizon_ms.value_or(last_event + 30 * kSecond);
  net.run_until(horizon);

  m.frames_sent = net.frames_sent();
  m.frames_delivered = net.frames_delivered();
  m.frames_dropped = net.frames_dropped();
  m.frames_in_flight_end = net.frames_in_flight();
  m.sent_by_kind = net.sent_by_kind();
  std::uint64_t rounds = 0, messages = 0;
  for (std::size_t i = 0; i < net.node_count(); ++i) {
    const auto& st = net.node_at(i).stats();
    m.lookups_completed += st.lookups_completed;
    rounds += st.lookup_rounds_total;
    messages += st.lookup_messages_total;
    m.media_frames_received += st.minis_received;
  }
  if (m.lookups_completed > 0) {
    m.mean_lookup_rounds =
        static_cast<double>(rounds) / static_cast<double>(m.lookups_completed);
    m.mean_lookup_messages = static_cast<double>(messages) /
                             static_cast<double>(m.lookups_completed);
  }
  m.end_time_ms = net.now();
  return m;
}

/// Scaling probe for the O(log N) routing claim: fresh static network per
/// size, `lookups` random-key lookups, mean iteration rounds and messages.
struct ScalingRow {
  int n = 0;
  double mean_rounds = 0.0;
  double mean_messages = 0.0;
};

inline std::vector<ScalingRow> measure_scaling(const std::vector<int>& sizes,
                                               std::uint64_t seed,
                                               const KademliaParams& params,
                                               int lookups = 500) {
  if (!std::is_sorted(sizes.begin(), sizes.end()))
    throw std::invalid_argument("sizes must be ascending");
  std::vector<ScalingRow> rows;
  for (int n : sizes) {
    StaticNetwork sn = build_static_network(n, params, seed);
    SimNet& net = *sn.net;
    std::uniform_int_distribution<int> pick(0, n - 1);
    std::uint64_t total_rounds = 0, total_messages = 0, completed = 0;
    SimTime base = net.now();
    for (int i = 0; i < lookups; ++i) {
      PeerNode* from = &net.node_at(static_cast<std::size_t>(pick(net.rng())));
      PeerId target = PeerId::random(net.rng(), params.bits);
      net.post(base + (i + 1) * 50, [from, target, &net, &total_rounds,
                                     &total_messages, &completed] {
        if (from->registration() != Registration::registered) return;
        from->lookup_k_closest(
            target, net.now(),
            [&](LookupResult r, SimTime) {
              total_rounds += static_cast<std::uint64_t>(r.rounds);
              total_messages += static_cast<std::uint64_t>(r.messages);
              ++completed;
            });
      });
    }
    net.run_for(static_cast<SimTime>(lookups) * 50 + 15 * kSecond);
    ScalingRow row;
    row.n = n;
    if (completed > 0) {
      row.mean_rounds = static_cast<double>(total_rounds) /
                        static_cast<double>(completed);
      row.mean_messages = static_cast<double>(total_messages) /
                          static_cast<double>(completed);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace iaxkad
