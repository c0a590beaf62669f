#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "iaxkad/routing_table.hpp"

using namespace iaxkad;

namespace {

KademliaParams small_params(int k = 2, int bits = 8) {
  KademliaParams p;
  p.k = k;
  p.bits = bits;
  return p;
}

Contact make_contact(std::uint64_t id, int bits, std::uint16_t port = 4569) {
  return {PeerId::from_u64(id, bits),
          Endpoint{0x0A000000u + static_cast<std::uint32_t>(id) + 1, port},
          ContactStatus::online, 0, std::nullopt};
}

/// Brute-force reference: k closest online contacts by XOR distance.
std::vector<PeerId> oracle_closest(const std::vector<Contact>& pool,
                                   const PeerId& target, int count) {
  std::vector<Contact> live;
  for (const auto& c : pool)
    if (c.status == ContactStatus::online) live.push_back(c);
  std::sort(live.begin(), live.end(), [&](const Contact& a, const Contact& b) {
    return closer(target, a.peer_id, b.peer_id) == std::strong_ordering::less;
  });
  std::vector<PeerId> out;
  for (const auto& c : live) {
    out.push_back(c.peer_id);
    if (static_cast<int>(out.size()) == count) break;
  }
  return out;
}

}  // namespace

TEST_CASE("observe outcomes: insert, update, split, discard") {
  KademliaParams p = small_params(/*k=*/2);
  RoutingTable t(PeerId::from_u64(0, 8), p);

  CHECK(t.observe_contact(make_contact(0x80, 8), 10) ==
        ObserveOutcome::inserted);
  CHECK(t.observe_contact(make_contact(0x81, 8), 11) ==
        ObserveOutcome::inserted);
  CHECK(t.observe_contact(make_contact(0x80, 8), 12) ==
        ObserveOutcome::updated);

  // third high-half contact forces a split of the root (which holds local 0)
  CHECK(t.observe_contact(make_contact(0x01, 8), 13) ==
        ObserveOutcome::split_inserted);
  CHECK(t.leaves().size() == 2);

  // high-half leaf is now foreign and full: newcomers are discarded
  CHECK(t.observe_contact(make_contact(0x82, 8), 14) ==
        ObserveOutcome::discarded);
  CHECK(t.size() == 3);
}

TEST_CASE("update refreshes endpoint, liveness and recency order") {
  KademliaParams p = small_params(/*k=*/3);
  RoutingTable t(PeerId::from_u64(0, 8), p);
  t.observe_contact(make_contact(0x10, 8), 1);
  t.observe_contact(make_contact(0x11, 8), 2);
  t.mark_offline(PeerId::from_u64(0x10, 8), 5);
  CHECK_FALSE(t.find(PeerId::from_u64(0x10, 8))->online());

  CHECK(t.observe_contact(make_contact(0x10, 8, 9999), 8) ==
        ObserveOutcome::updated);
  auto c = t.find(PeerId::from_u64(0x10, 8));
  REQUIRE(c.has_value());
  CHECK(c->online());
  CHECK(c->endpoint.port == 9999);
  CHECK(c->last_seen == 8);
  CHECK_FALSE(c->offline_since.has_value());
  // most recently seen sits at the tail of its bucket
  CHECK(t.leaves().front().contacts.back().peer_id ==
        PeerId::from_u64(0x10, 8));
}

TEST_CASE("a node never stores itself") {
  RoutingTable t(PeerId::from_u64(7, 8), small_params());
  CHECK_THROWS_AS(t.observe_contact(make_contact(7, 8), 0),
                  std::invalid_argument);
}

TEST_CASE("full foreign bucket evicts its oldest offline member") {
  KademliaParams p = small_params(/*k=*/2);
  RoutingTable t(PeerId::from_u64(0, 8), p);
  t.observe_contact(make_contact(0x80, 8), 1);
  t.observe_contact(make_contact(0x81, 8), 2);
  t.observe_contact(make_contact(0x01, 8), 3);  // splits, isolates high leaf
  t.mark_offline(PeerId::from_u64(0x81, 8), 4);
  t.mark_offline(PeerId::from_u64(0x80, 8), 6);

  CHECK(t.observe_contact(make_contact(0x90, 8), 7) ==
        ObserveOutcome::inserted);
  CHECK_FALSE(t.find(PeerId::from_u64(0x81, 8)).has_value());  // oldest left
  CHECK(t.find(PeerId::from_u64(0x80, 8)).has_value());
}

TEST_CASE("mark_offline keeps the earliest timestamp") {
  RoutingTable t(PeerId::from_u64(0, 8), small_params());
  t.observe_contact(make_contact(0x40, 8), 0);
  CHECK(t.mark_offline(PeerId::from_u64(0x40, 8), 100));
  CHECK(t.mark_offline(PeerId::from_u64(0x40, 8), 500));
  CHECK(t.find(PeerId::from_u64(0x40, 8))->offline_since == 100);
  CHECK_FALSE(t.mark_offline(PeerId::from_u64(0x77, 8), 0));
}

TEST_CASE("purge removes offline contacts strictly past the expiry window") {
  KademliaParams p = small_params();
  RoutingTable t(PeerId::from_u64(0, 8), p);
  t.observe_contact(make_contact(0x20, 8), 0);
  t.observe_contact(make_contact(0x21, 8), 0);
  t.mark_offline(PeerId::from_u64(0x20, 8), 1000);

  CHECK(t.purge_expired(1000 + p.offline_expiry_ms).empty());  // boundary kept
  auto removed = t.purge_expired(1001 + p.offline_expiry_ms);
  REQUIRE(removed.size() == 1);
  CHECK(removed[0] == PeerId::from_u64(0x20, 8));
  CHECK(t.size() == 1);
}

TEST_CASE("closest_contacts agrees with brute force and skips offline") {
  std::mt19937_64 rng(17);
  KademliaParams p = small_params(/*k=*/4);
  PeerId local = PeerId::from_u64(0x55, 8);
  RoutingTable t(local, p);
  std::vector<Contact> pool;
  for (int i = 0; i < 120; ++i) {
    std::uint64_t id = rng() & 0xFF;
    if (id == 0x55) continue;
    Contact c = make_contact(id, 8);
    ObserveOutcome out = t.observe_contact(c, i);
    if (out == ObserveOutcome::discarded) continue;
    if (std::none_of(pool.begin(), pool.end(), [&](const Contact& x) {
          return x.peer_id == c.peer_id;
        }))
      pool.push_back(c);
  }
  // knock a third of them offline
  for (std::size_t i = 0; i < pool.size(); i += 3) {
    t.mark_offline(pool[i].peer_id, 500);
    pool[i].status = ContactStatus::offline;
  }
  for (std::uint64_t target : {0x00ull, 0x55ull, 0xFFull, 0x9Aull}) {
    PeerId key = PeerId::from_u64(target, 8);
    auto got = t.closest_contacts(key, p.k);
    auto want = oracle_closest(pool, key, p.k);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got[i].peer_id == want[i]);
  }
}

TEST_CASE("tree invariants hold over random operation sequences") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    KademliaParams p = small_params(/*k=*/3);
    PeerId local = PeerId::from_u64(rng() & 0xFF, 8);
    RoutingTable t(local, p);
    for (int step = 0; step < 300; ++step) {
      std::uint64_t id = rng() & 0xFF;
      if (PeerId::from_u64(id, 8) == local) continue;
      switch (rng() % 3) {
        case 0:
        case 1:
          t.observe_contact(make_contact(id, 8), step);
          break;
        case 2:
          t.mark_offline(PeerId::from_u64(id, 8), step);
          break;
      }
    }
    // every id is covered by exactly one leaf, buckets respect capacity,
    // and exactly one leaf covers the local id
    int local_leaves = 0;
    for (const auto& leaf : t.leaves()) {
      CHECK(static_cast<int>(leaf.contacts.size()) <= p.k);
      if (leaf.covers(local)) ++local_leaves;
      for (const auto& c : leaf.contacts) CHECK(leaf.covers(c.peer_id));
    }
    CHECK(local_leaves == 1);
    for (int v = 0; v < 256; ++v) {
      int covering = 0;
      for (const auto& leaf : t.leaves())
        if (leaf.covers(PeerId::from_u64(static_cast<std::uint64_t>(v), 8)))
          ++covering;
      CHECK(covering == 1);
    }
  }
}

TEST_CASE("refresh targets fall beyond the first contact's bucket") {
  std::mt19937_64 rng(31);
  KademliaParams p = small_params(/*k=*/1);
  PeerId local = PeerId::from_u64(0x00, 8);
  RoutingTable t(local, p);
  for (std::uint64_t id : {0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80})
    t.observe_contact(make_contact(id, 8), 0);

  PeerId first = PeerId::from_u64(0x04, 8);  // bucket index 2
  auto keys = t.refresh_targets(first, rng);
  CHECK_FALSE(keys.empty());
  int prev = -1;
  for (const auto& key : keys) {
    int bi = bucket_index(local, key);
    CHECK(bi > bucket_index(local, first));
    CHECK(bi > prev);  // ordered near to far
    prev = bi;
  }
}

TEST_CASE("dump emits one canonical line per contact") {
  RoutingTable t(PeerId::from_u64(0, 8), small_params());
  t.observe_contact(make_contact(0xAB, 8), 42);
  std::istringstream in(t.dump());
  std::string id_hex, ep, status;
  SimTime seen;
  REQUIRE(static_cast<bool>(in >> id_hex >> ep >> status >> seen));
  CHECK(id_hex == "ab");
  CHECK(ep == "10.0.0.172:4569");
  CHECK(status == "online");
  CHECK(seen == 42);
}
