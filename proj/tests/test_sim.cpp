#include <doctest.h>

#include "iaxkad/scenario.hpp"
#include "iaxkad/sim.hpp"
#include "iaxkad/verify.hpp"

using namespace iaxkad;

namespace {
KademliaParams small_params() {
  KademliaParams p;
  p.k = 8;
  return p;
}
}  // namespace

TEST_CASE("equal seeds reproduce identical runs, different seeds diverge") {
  Scenario s;
  s.params = small_params();
  s.n_peers = 12;
  s.seed = 99;
  s.loss = 0.03;
  s.auto_calls = 4;
  Metrics a = run_scenario(s);
  Metrics b = run_scenario(s);
  CHECK(a.to_json() == b.to_json());

  s.seed = 100;
  Metrics c = run_scenario(s);
  CHECK(a.to_json() != c.to_json());
}

TEST_CASE("every routing table matches the global oracle after convergence") {
  VerifyReport r = verify_network(20, small_params(), 5);
  CHECK(r.joins_succeeded == 20);
  CHECK(r.neighbor_view_matches == r.nodes_checked);
  CHECK(r.tables_with_stale_online == 0);
  CHECK(r.ok());
}

TEST_CASE("convergence also holds under frame loss") {
  LinkModel lossy;
  lossy.loss_probability = 0.05;
  VerifyReport r = verify_network(16, small_params(), 6, lossy);
  CHECK(r.ok());
}

TEST_CASE("a released peer ends up offline or absent in every table") {
  StaticNetwork sn = build_static_network(12, small_params(), 3);
  SimNet& net = *sn.net;
  PeerNode& leaver = net.node_at(5);
  PeerId gone = leaver.id();
  bool released = false;
  net.post(net.now(), [&] {
    leaver.release(net.now(), [&](SimTime) { released = true; });
  });
  net.run_for(30 * kSecond);
  CHECK(released);
  CHECK(leaver.registration() == Registration::released);
  for (std::size_t i = 0; i < net.node_count(); ++i) {
    if (i == 5) continue;
    auto hit = net.node_at(i).table().find(gone);
    if (hit) CHECK_FALSE(hit->online());
  }
  // and no lookup resolves the departed address
  int found = -1;
  net.post(net.now(), [&] {
    net.node_at(2).resolve("peer5@sim.local", net.now(),
                           [&](LookupResult r, SimTime) {
                             found = r.found_callee ? 1 : 0;
                           });
  });
  net.run_for(60 * kSecond);
  CHECK(found == 0);
  CHECK_FALSE(net.oracle_resolvable("peer5@sim.local"));
}

TEST_CASE("a crashed peer stops responding and lookups route around it") {
  StaticNetwork sn = build_static_network(12, small_params(), 8);
  SimNet& net = *sn.net;
  net.inject_crash(net.node_at(4).endpoint(), net.now());
  net.run_for(kSecond);
  CHECK(net.node_at(4).crashed());
  CHECK_FALSE(net.is_live(net.node_at(4)));

  int completed = 0;
  for (std::size_t i : {1u, 7u, 10u}) {
    net.post(net.now(), [&net, i, &completed] {
      net.node_at(i).lookup_k_closest(net.node_at(4).id(), net.now(),
                                      [&](LookupResult r, SimTime) {
                                        ++completed;
                                        CHECK_FALSE(r.contacts.empty());
                                      });
    });
  }
  net.run_for(60 * kSecond);
  CHECK(completed == 3);
}

TEST_CASE("frame conservation: sent equals delivered plus dropped plus in flight") {
  Scenario s;
  s.params = small_params();
  s.n_peers = 10;
  s.seed = 21;
  s.loss = 0.1;
  s.auto_calls = 5;
  Metrics m = run_scenario(s);
  CHECK(m.frames_sent ==
        m.frames_delivered + m.frames_dropped + m.frames_in_flight_end);
  CHECK(m.frames_dropped > 0);
}

TEST_CASE("partitioned endpoints never exchange frames") {
  LinkModel link;
  link.partition_group[Endpoint{0x0A000001, 4569}] = 0;
  link.partition_group[Endpoint{0x0A000002, 4569}] = 1;
  SimNet net(small_params(), 4, link);
  PeerNode& a = net.add_node("peera@sim.local", true);
  PeerNode& b = net.add_node("peerb@sim.local");
  net.post(0, [&] { a.join(std::nullopt, 0, nullptr); });
  bool ok = true;
  net.post(10, [&] {
    b.join(a.self_contact(10), 10, [&](bool r, SimTime) { ok = r; });
  });
  net.run_for(60 * kSecond);
  CHECK_FALSE(ok);
  CHECK(b.registration() == Registration::unregistered);
  CHECK(net.frames_delivered() == 0);
  CHECK(net.frames_dropped() == net.frames_sent());
}

TEST_CASE("scenario config errors are rejected before the run starts") {
  Scenario s;
  s.n_peers = 0;
  CHECK_THROWS_AS(run_scenario(s), ScenarioError);
  s = {};
  s.loss = 1.5;
  CHECK_THROWS_AS(run_scenario(s), ScenarioError);
  s = {};
  s.latency_min = 50;
  s.latency_max = 10;
  CHECK_THROWS_AS(run_scenario(s), ScenarioError);
  s = {};
  s.params.bits = 4;
  CHECK_THROWS_AS(run_scenario(s), std::invalid_argument);
  s = {};
  s.release_schedule = {{100, "10.0.0.1:4569"}, {50, "10.0.0.1:4569"}};
  CHECK_THROWS_AS(run_scenario(s), ScenarioError);
  s = {};
  s.n_peers = 2;
  s.crash_schedule = {{100, "10.9.9.9:4569"}};
  CHECK_THROWS_AS(run_scenario(s), ScenarioError);
}

TEST_CASE("scenario JSON round trip drives the run") {
  nlohmann::json j = {
      {"params", {{"k", 8}, {"alpha", 3}}},
      {"n_peers", 6},
      {"seed", 77},
      {"loss", 0.0},
      {"call_workload",
       nlohmann::json::array(
           {{0, "10.0.0.2:4569", "10.0.0.5:4569"}})},
  };
  Scenario s = Scenario::from_json(j);
  CHECK(s.params.k == 8);
  CHECK(s.n_peers == 6);
  Metrics m = run_scenario(s);
  CHECK(m.calls_attempted == 1);
  CHECK(m.calls_up == 1);
  CHECK(m.joins_succeeded == 6);
}

TEST_CASE("lookup cost grows far slower than network size") {
  auto rows = measure_scaling({16, 64}, 13, small_params(), 60);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].mean_rounds > 0);
  // 4x the nodes must cost far less than 4x the rounds
  CHECK(rows[1].mean_rounds < rows[0].mean_rounds * 2.5);
}
