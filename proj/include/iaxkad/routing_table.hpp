#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iaxkad/contact.hpp"
#include "iaxkad/params.hpp"
#include "iaxkad/peer_id.hpp"

namespace iaxkad {

enum class ObserveOutcome { inserted, updated, split_inserted, discarded };

inline const char* to_string(ObserveOutcome o) {
  switch (o) {
    case ObserveOutcome::inserted: return "inserted";
    case ObserveOutcome::updated: return "updated";
    case ObserveOutcome::split_inserted: return "split_inserted";
    case ObserveOutcome::discarded: return "discarded";
  }
  return "?";
}

/// Per-node contact store: a binary prefix tree whose leaves are k-buckets.
/// Only the leaf covering the local id splits; full foreign-range leaves
/// replace their oldest offline contact or discard the newcomer.
class RoutingTable {
 public:
  struct Leaf {
    int prefix_len = 0;     // number of significant MSB bits in `prefix`
    PeerId prefix;          // covered ids share these bits
    std::vector<Contact> contacts;  // least-recently-seen first

    bool covers(const PeerId& id) const {
      for (int i = 0; i < prefix_len; ++i)
        if (id.bit_from_msb(i) != prefix.bit_from_msb(i)) return false;
      return true;
    }
  };

  RoutingTable(PeerId local_id, KademliaParams params)
      : local_id_(std::move(local_id)), params_(params) {
    params_.validate();
    Leaf root;
    root.prefix = PeerId::zero(params_.bits);
    leaves_.push_back(std::move(root));
  }

  const PeerId& local_id() const { return local_id_; }
  const KademliaParams& params() const { return params_; }
  const std::vector<Leaf>& leaves() const { return leaves_; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& l : leaves_) n += l.contacts.size();
    return n;
  }

  ObserveOutcome observe_contact(const Contact& c, SimTime now) {
    if (c.peer_id == local_id_)
      throw std::invalid_argument("a node never stores itself");
    if (!c.endpoint.valid())
      throw std::invalid_argument("contact endpoint is empty");
    bool did_split = false;
    while (true) {
      Leaf& leaf = leaf_for(c.peer_id);
      if (auto it = find_in(leaf, c.peer_id); it != leaf.contacts.end()) {
        Contact updated = *it;
        updated.endpoint = c.endpoint;
        updated.status = ContactStatus::online;
        updated.last_seen = now;
        updated.offline_since.reset();
        leaf.contacts.erase(it);
        leaf.contacts.push_back(std::move(updated));
        return ObserveOutcome::updated;
      }
      if (static_cast<int>(leaf.contacts.size()) < params_.k) {
        Contact fresh = c;
        fresh.status = ContactStatus::online;
        fresh.last_seen = now;
        fresh.offline_since.reset();
        leaf.contacts.push_back(std::move(fresh));
        return did_split ? ObserveOutcome::split_inserted
                         : ObserveOutcome::inserted;
      }
      if (leaf.covers(local_id_) && leaf.prefix_len < params_.bits) {
        split(leaf);
        did_split = true;
        continue;  // retry against the new leaves
      }
      // Full bucket in a foreign range: evict the oldest offline contact.
      auto victim = leaf.contacts.end();
      for (auto it = leaf.contacts.begin(); it != leaf.contacts.end(); ++it) {
        if (it->status != ContactStatus::offline) continue;
        if (victim == leaf.contacts.end() ||
            it->offline_since.value_or(0) < victim->offline_since.value_or(0))
          victim = it;
      }
      if (victim != leaf.contacts.end()) {
        leaf.contacts.erase(victim);
        Contact fresh = c;
        fresh.status = ContactStatus::online;
        fresh.last_seen = now;
        fresh.offline_since.reset();
        leaf.contacts.push_back(std::move(fresh));
        return ObserveOutcome::inserted;
      }
      return ObserveOutcome::discarded;
    }
  }

  bool mark_offline(const PeerId& peer_id, SimTime now) {
    for (auto& leaf : leaves_) {
      if (auto it = find_in(leaf, peer_id); it != leaf.contacts.end()) {
        if (it->status != ContactStatus::offline) {
          it->status = ContactStatus::offline;
          it->offline_since = now;  // first marking wins
        }
        return true;
      }
    }
    return false;
  }

  std::vector<PeerId> purge_expired(SimTime now) {
    std::vector<PeerId> removed;
    for (auto& leaf : leaves_) {
      std::erase_if(leaf.contacts, [&](const Contact& c) {
        bool expired = c.status == ContactStatus::offline &&
                       now - *c.offline_since > params_.offline_expiry_ms;
        if (expired) removed.push_back(c.peer_id);
        return expired;
      });
    }
    return removed;
  }

  std::vector<Contact> closest_contacts(const PeerId& target, int count,
                                        bool include_offline = false) const {
    if (count < 1) throw std::invalid_argument("count must be >= 1");
    std::vector<Contact> all = all_contacts(include_offline);
    std::sort(all.begin(), all.end(), [&](const Contact& a, const Contact& b) {
      return closer(target, a.peer_id, b.peer_id) == std::strong_ordering::less;
    });
    if (static_cast<int>(all.size()) > count) all.resize(count);
    return all;
  }

  std::vector<Contact> all_contacts(bool include_offline) const {
    std::vector<Contact> out;
    for (const auto& leaf : leaves_)
      for (const auto& c : leaf.contacts)
        if (include_offline || c.status == ContactStatus::online)
          out.push_back(c);
    return out;
  }

  std::optional<Contact> find(const PeerId& peer_id) const {
    for (const auto& leaf : leaves_)
      for (const auto& c : leaf.contacts)
        if (c.peer_id == peer_id) return c;
    return std::nullopt;
  }

  /// One random key per leaf whose distance range from the local id lies
  /// beyond the bucket the first contact falls in, ordered near-to-far.
  template <class Rng>
  std::vector<PeerId> refresh_targets(const PeerId& first_contact_id,
                                      Rng& rng) const {
    int threshold = bucket_index(local_id_, first_contact_id);
    std::vector<std::pair<int, const Leaf*>> farther;
    for (const auto& leaf : leaves_) {
      if (leaf.covers(local_id_)) continue;
      int bi = leaf_bucket_index(leaf);
      if (bi > threshold) farther.emplace_back(bi, &leaf);
    }
    std::sort(farther.begin(), farther.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<PeerId> keys;
    keys.reserve(farther.size());
    for (const auto& [bi, leaf] : farther)
      keys.push_back(random_in_leaf(*leaf, rng));
    return keys;
  }

  /// One line per contact: `<hex peer_id> <endpoint> <status> <last_seen>`.
  std::string dump() const {
    std::ostringstream out;
    for (const auto& leaf : leaves_)
      for (const auto& c : leaf.contacts)
        out << c.peer_id.to_hex() << ' ' << c.endpoint.to_string() << ' '
            << to_string(c.status) << ' ' << c.last_seen << '\n';
    return out.str();
  }

 private:
  static std::vector<Contact>::iterator find_in(Leaf& leaf, const PeerId& id) {
    return std::find_if(leaf.contacts.begin(), leaf.contacts.end(),
                        [&](const Contact& c) { return c.peer_id == id; });
  }

  Leaf& leaf_for(const PeerId& id) {
    for (auto& leaf : leaves_)
      if (leaf.covers(id)) return leaf;
    throw std::logic_error("prefix tree does not cover the key space");
  }

  void split(Leaf& leaf) {
    Leaf zero, one;
    zero.prefix_len = one.prefix_len = leaf.prefix_len + 1;
    zero.prefix = one.prefix = leaf.prefix;
    one.prefix = flip_bit(one.prefix, leaf.prefix_len);
    for (auto& c : leaf.contacts)
      (zero.covers(c.peer_id) ? zero : one).contacts.push_back(std::move(c));
    std::size_t idx = static_cast<std::size_t>(&leaf - leaves_.data());
    leaves_[idx] = std::move(zero);
    leaves_.push_back(std::move(one));
  }

  static PeerId flip_bit(const PeerId& id, int pos_from_msb) {
    detail::WideUint v = id.raw();
    v.set_bit_from_msb(pos_from_msb, !v.bit_from_msb(pos_from_msb));
    return PeerId::from_bytes(
        {v.b.data(), static_cast<std::size_t>(v.byte_size())}, v.bits);
  }

  /// All ids in a non-local leaf share a bucket index relative to local_id:
  /// bits - 1 - (position of the first prefix bit differing from local_id).
  int leaf_bucket_index(const Leaf& leaf) const {
    for (int i = 0; i < leaf.prefix_len; ++i)
      if (leaf.prefix.bit_from_msb(i) != local_id_.bit_from_msb(i))
        return params_.bits - 1 - i;
    throw std::logic_error("leaf covers the local id");
  }

  template <class Rng>
  PeerId random_in_leaf(const Leaf& leaf, Rng& rng) const {
    PeerId key = PeerId::random(rng, params_.bits);
    detail::WideUint v = key.raw();
    for (int i = 0; i < leaf.prefix_len; ++i)
      v.set_bit_from_msb(i, leaf.prefix.bit_from_msb(i));
    return PeerId::from_bytes(
        {v.b.data(), static_cast<std::size_t>(v.byte_size())}, v.bits);
  }

  PeerId local_id_;
  KademliaParams params_;
  std::vector<Leaf> leaves_;
};

}  // namespace iaxkad
