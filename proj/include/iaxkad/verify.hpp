#pragma once

#include <algorithm>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "iaxkad/sim.hpp"

namespace iaxkad {

/// Result of checking a converged static network against the global oracle.
struct VerifyReport {
  int n_peers = 0;
  int joins_succeeded = 0;
  int nodes_checked = 0;
  int neighbor_view_matches = 0;  // top-k of own id equals the oracle's
  int tables_with_stale_online = 0;
  double mean_table_size = 0.0;
  std::vector<std::string> failures;

  bool ok() const {
    return joins_succeeded == n_peers &&
           neighbor_view_matches == nodes_checked &&
           tables_with_stale_online == 0;
  }

  std::string to_string() const {
    std::ostringstream s;
    s << "peers: " << n_peers << "\n"
      << "joins_succeeded: " << joins_succeeded << "\n"
      << "neighbor_view_matches: " << neighbor_view_matches << "/"
      << nodes_checked << "\n"
      << "tables_with_stale_online: " << tables_with_stale_online << "\n"
      << "mean_table_size: " << mean_table_size << "\n"
      << "result: " << (ok() ? "OK" : "FAIL") << "\n";
    for (const auto& f : failures) s << "  " << f << "\n";
    return s.str();
  }
};

/// A node's view of its own neighborhood, as the protocol delivers it: the
/// result of a self-lookup plus the node itself must cover the oracle's k
/// closest live peers. A single table need not hold all of them (a full
/// far-range bucket may have discarded one); the iterative lookup must
/// still find them.
inline bool neighbor_view_matches_oracle(SimNet& net, PeerNode& node) {
  std::set<PeerId> view;
  view.insert(node.id());
  bool done = false;
  net.post(net.now(), [&] {
    node.lookup_k_closest(node.id(), net.now(),
                          [&](LookupResult r, SimTime) {
                            for (const auto& c : r.contacts)
                              view.insert(c.peer_id);
                            done = true;
                          });
  });
  net.run_for(60 * kSecond);
  if (!done) return false;
  for (const auto& id : net.oracle_k_closest(node.id(), net.params().k))
    if (!view.count(id)) return false;
  return true;
}

/// True when some contact is listed online but its owner is not live.
inline bool has_stale_online_contact(const SimNet& net, const PeerNode& node) {
  for (const auto& c : node.table().all_contacts(false)) {
    bool live = false;
    for (std::size_t i = 0; i < net.node_count(); ++i) {
      const PeerNode& other = net.node_at(i);
      if (other.id() == c.peer_id) {
        live = net.is_live(other);
        break;
      }
    }
    if (!live) return true;
  }
  return false;
}

inline VerifyReport verify_network(int n, const KademliaParams& params,
                                   std::uint64_t seed, LinkModel link = {},
                                   int convergence_passes = 2) {
  StaticNetwork sn =
      build_static_network(n, params, seed, link, convergence_passes);
  SimNet& net = *sn.net;
  VerifyReport r;
  r.n_peers = n;
  r.joins_succeeded = sn.joins_succeeded;
  std::size_t total = 0;
  for (std::size_t i = 0; i < net.node_count(); ++i) {
    PeerNode& node = net.node_at(i);
    if (!net.is_live(node)) continue;
    ++r.nodes_checked;
    total += node.table().all_contacts(false).size();
    if (neighbor_view_matches_oracle(net, node))
      ++r.neighbor_view_matches;
    else
      r.failures.push_back("neighbor view mismatch at " + node.address());
    if (has_stale_online_contact(net, node)) {
      ++r.tables_with_stale_online;
      r.failures.push_back("stale online contact at " + node.address());
    }
  }
  if (r.nodes_checked > 0)
    r.mean_table_size =
        static_cast<double>(total) / static_cast<double>(r.nodes_checked);
  return r;
}

}  // namespace iaxkad
