#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "iaxkad/engine.hpp"

namespace iaxkad {

/// Per-transmission delivery model. Loss is sampled independently per frame;
/// latency is uniform in [latency_min, latency_max]. Endpoints in different
/// partition groups never reach each other.
struct LinkModel {
  double loss_probability = 0.0;
  SimTime latency_min = 10;
  SimTime latency_max = 50;
  std::map<Endpoint, int> partition_group;

  bool connected(const Endpoint& a, const Endpoint& b) const {
    if (partition_group.empty()) return true;
    auto ga = partition_group.find(a);
    auto gb = partition_group.find(b);
    int va = ga == partition_group.end() ? 0 : ga->second;
    int vb = gb == partition_group.end() ? 0 : gb->second;
    return va == vb;
  }
};

/// Deterministic discrete-event network hosting many PeerNodes on one
/// logical thread. All randomness flows through the single seeded generator;
/// equal seeds yield byte-identical runs.
class SimNet {
 public:
  SimNet(KademliaParams params, std::uint64_t seed, LinkModel link = {})
      : params_(params), seed_(seed), link_(link), rng_(seed) {
    params_.validate();
    if (link_.latency_min < 0 || link_.latency_max < link_.latency_min)
      throw std::invalid_argument("bad latency range");
    if (link_.loss_probability < 0.0 || link_.loss_probability > 1.0)
      throw std::invalid_argument("loss probability out of [0,1]");
  }

  PeerNode& add_node(const std::string& address, bool bootstrap = false) {
    std::uint32_t idx = static_cast<std::uint32_t>(nodes_.size());
    Endpoint ep{0x0A000000u + idx + 1, 4569};
    std::uint64_t node_seed = mix(seed_, idx + 1);
    auto node = std::make_unique<PeerNode>(address, ep, params_, node_seed,
                                           bootstrap);
    PeerNode* raw = node.get();
    node->set_sink([this, raw](Datagram d) { transmit(raw->endpoint(), d); });
    node->set_timer_notify([this, raw](SimTime due) {
      post(due, [this, raw] { raw->tick(clock_); });
    });
    by_endpoint_[ep] = raw;
    nodes_.push_back(std::move(node));
    return *raw;
  }

  std::size_t node_count() const { return nodes_.size(); }
  PeerNode& node_at(std::size_t i) { return *nodes_.at(i); }
  const PeerNode& node_at(std::size_t i) const { return *nodes_.at(i); }

  PeerNode* node(const Endpoint& ep) {
    auto it = by_endpoint_.find(ep);
    return it == by_endpoint_.end() ? nullptr : it->second;
  }

  PeerNode* node_by_address(std::string_view address) {
    for (auto& n : nodes_)
      if (n->address() == address) return n.get();
    return nullptr;
  }

  SimTime now() const { return clock_; }
  std::mt19937_64& rng() { return rng_; }
  const KademliaParams& params() const { return params_; }

  void post(SimTime t, std::function<void()> fn) {
    queue_.push({std::max(t, clock_), next_seq_++, std::move(fn)});
  }

  /// Runs every event due at or before `horizon`; leaves later events queued.
  void run_until(SimTime horizon) {
    while (!queue_.empty() && queue_.top().t <= horizon) {
      Event ev = queue_.top();
      queue_.pop();
      clock_ = std::max(clock_, ev.t);
      ev.fn();
    }
    clock_ = std::max(clock_, horizon);
  }

  void run_for(SimTime dt) { run_until(clock_ + dt); }

  void inject_crash(const Endpoint& ep, SimTime t) {
    PeerNode* n = node(ep);
    if (!n) throw std::invalid_argument("inject_crash: unknown endpoint");
    post(t, [n] { n->crash(); });
  }

  // ---- global-knowledge oracles (independent of any routing table) -------

  bool is_live(const PeerNode& n) const {
    return !n.crashed() && n.registration() == Registration::registered;
  }

  std::vector<PeerId> oracle_k_closest(const PeerId& target, int k) const {
    std::vector<const PeerNode*> live;
    for (const auto& n : nodes_)
      if (is_live(*n)) live.push_back(n.get());
    std::sort(live.begin(), live.end(),
              [&](const PeerNode* a, const PeerNode* b) {
                return closer(target, a->id(), b->id()) ==
                       std::strong_ordering::less;
              });
    std::vector<PeerId> out;
    for (const auto* n : live) {
      out.push_back(n->id());
      if (static_cast<int>(out.size()) == k) break;
    }
    return out;
  }

  bool oracle_resolvable(std::string_view address) const {
    for (const auto& n : nodes_)
      if (n->address() == address && is_live(*n)) return true;
    return false;
  }

  // ---- frame accounting ---------------------------------------------------

  std::uint64_t frames_sent() const { return frames_sent_; }
  std::uint64_t frames_delivered() const { return frames_delivered_; }
  std::uint64_t frames_dropped() const { return frames_dropped_; }
  std::uint64_t frames_in_flight() const { return frames_in_flight_; }
  const std::map<std::string, std::uint64_t>& sent_by_kind() const {
    return sent_by_kind_;
  }

  /// Optional JSON-lines event trace; one record per frame sent/received.
  void set_trace(std::function<void(const std::string&)> sink) {
    trace_ = std::move(sink);
  }

 private:
  struct Event {
    SimTime t = 0;
    std::uint64_t seq = 0;
    std::function<void()> fn;
    friend bool operator>(const Event& a, const Event& b) {
      if (a.t != b.t) return a.t > b.t;
      return a.seq > b.seq;
    }
  };

  static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 step
    std::uint64_t z = seed + salt * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::string kind_of(const std::vector<std::uint8_t>& bytes) {
    if (bytes.empty()) return "EMPTY";
    if (!(bytes[0] & 0x80)) return "MINI";
    if (bytes.size() < kFullHeaderSize) return "MALFORMED";
    return to_string(static_cast<MessageKind>(bytes[11]));
  }

  void trace_frame(const char* dir, const Endpoint& from, const Endpoint& to,
                   const std::string& kind) {
    if (!trace_) return;
    std::ostringstream line;
    line << "{\"t\":" << clock_ << ",\"event\":\"" << dir << "\",\"from\":\""
         << from.to_string() << "\",\"to\":\"" << to.to_string()
         << "\",\"kind\":\"" << kind << "\"}";
    trace_(line.str());
  }

  void transmit(const Endpoint& from, Datagram d) {
    std::string kind = kind_of(d.bytes);
    ++frames_sent_;
    ++sent_by_kind_[kind];
    trace_frame("send", from, d.to, kind);
    if (!link_.connected(from, d.to)) {
      ++frames_dropped_;
      return;
    }
    if (link_.loss_probability > 0.0) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      if (u(rng_) < link_.loss_probability) {
        ++frames_dropped_;
        return;
      }
    }
    std::uniform_int_distribution<SimTime> lat(link_.latency_min,
                                               link_.latency_max);
    SimTime arrive = clock_ + lat(rng_);
    ++frames_in_flight_;
    post(arrive, [this, from, to = d.to, bytes = std::move(d.bytes),
                  kind = std::move(kind)] {
      --frames_in_flight_;
      ++frames_delivered_;
      trace_frame("recv", from, to, kind);
      if (PeerNode* n = node(to)) n->handle_datagram(bytes, from, clock_);
    });
  }

  KademliaParams params_;
  std::uint64_t seed_;
  LinkModel link_;
  std::mt19937_64 rng_;
  SimTime clock_ = 0;
  std::uint64_t next_seq_ = 0;
  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> queue_;
  std::vector<std::unique_ptr<PeerNode>> nodes_;
  std::map<Endpoint, PeerNode*> by_endpoint_;
  std::uint64_t frames_sent_ = 0;
  std::uint64_t frames_delivered_ = 0;
  std::uint64_t frames_dropped_ = 0;
  std::uint64_t frames_in_flight_ = 0;
  std::map<std::string, std::uint64_t> sent_by_kind_;
  std::function<void(const std::string&)> trace_;
};

/// Builds a network of n peers joined through node 0 (the bootstrap), then
/// runs `convergence_passes` rounds of self-lookups so every table covers
/// its closest region. Addresses are peer<i>@sim.local.
struct StaticNetwork {
  std::unique_ptr<SimNet> net;
  int joins_attempted = 0;
  int joins_succeeded = 0;
  SimTime last_join_done = 0;
};

inline StaticNetwork build_static_network(int n, const KademliaParams& params,
                                          std::uint64_t seed,
                                          LinkModel link = {},
                                          int convergence_passes = 1,
                                          SimTime join_spacing_ms = 300) {
  StaticNetwork out;
  out.net = std::make_unique<SimNet>(params, seed, link);
  SimNet& net = *out.net;
  for (int i = 0; i < n; ++i)
    net.add_node("peer" + std::to_string(i) + "@sim.local", i == 0);
  out.joins_attempted = n;
  auto* counters = &out;
  Contact bootstrap_contact;
  if (n > 0)
    bootstrap_contact = net.node_at(0).self_contact(0);
  for (int i = 0; i < n; ++i) {
    PeerNode* node = &net.node_at(static_cast<std::size_t>(i));
    SimTime t = i * join_spacing_ms;
    std::optional<Contact> first;
    if (i > 0) first = bootstrap_contact;
    net.post(t, [node, first, counters, &net] {
      node->join(first, net.now(), [counters, &net](bool ok, SimTime when) {
        if (ok) {
          ++counters->joins_succeeded;
          counters->last_join_done = std::max(counters->last_join_done, when);
        }
        (void)net;
      });
    });
  }
  // Retry ladder worst case is ~15.5 s; leave room for it plus refreshes.
  net.run_until(static_cast<SimTime>(n) * join_spacing_ms + 20 * kSecond);
  for (int pass = 0; pass < convergence_passes; ++pass) {
    SimTime base = net.now();
    for (int i = 0; i < n; ++i) {
      PeerNode* node = &net.node_at(static_cast<std::size_t>(i));
      net.post(base + i * 10, [node, &net] {
        if (node->registration() != Registration::registered) return;
        node->lookup_k_closest(node->id(), net.now(),
                               [](LookupResult, SimTime) {});
      });
    }
    net.run_for(static_cast<SimTime>(n) * 10 + 15 * kSecond);
  }
  return out;
}

}  // namespace iaxkad
