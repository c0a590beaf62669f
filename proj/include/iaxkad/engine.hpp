#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iaxkad/contact.hpp"
#include "iaxkad/params.hpp"
#include "iaxkad/peer_id.hpp"
#include "iaxkad/routing_table.hpp"
#include "iaxkad/wire.hpp"

namespace iaxkad {

struct Datagram {
  Endpoint to;
  std::vector<std::uint8_t> bytes;
};

enum class Registration { unregistered, registering, registered, releasing, released };

inline const char* to_string(Registration r) {
  switch (r) {
    case Registration::unregistered: return "unregistered";
    case Registration::registering: return "registering";
    case Registration::registered: return "registered";
    case Registration::releasing: return "releasing";
    case Registration::released: return "released";
  }
  return "?";
}

enum class CallPhase { initiating, ringing, up, hungup };

struct CallState {
  std::uint16_t local_call = 0;
  std::optional<std::uint16_t> remote_call;
  Contact peer;
  CallPhase phase = CallPhase::initiating;
  std::string callee_address;
  std::uint64_t media_sent = 0;
  std::uint64_t media_received = 0;
  std::uint8_t oseq = 0;
};

struct LookupResult {
  bool found_callee = false;
  std::optional<Contact> callee;
  std::vector<Contact> contacts;  // ascending by distance to the target
  bool starved = false;
  int rounds = 0;
  int messages = 0;
};

// Protocol timers. The retry ladder doubles from 500 ms; a reliable frame is
// sent up to 1 + kMaxRetries times before the sender gives up.
constexpr SimTime kRetransInitialMs = 500;
constexpr int kMaxRetries = 4;
constexpr SimTime kLookupRoundTimeoutMs = 2000;
constexpr int kRegrelHopLimit = 3;
constexpr SimTime kFloodRetentionMs = 10 * kMinute;
constexpr SimTime kJoinRefreshDelayMs = 500;

/// Per-node protocol state machine. Consumes timestamped events (datagrams,
/// timers, local commands) and emits frames through the sink; no internal
/// concurrency, all calls must come from one logical thread.
class PeerNode {
 public:
  using JoinCallback = std::function<void(bool ok, SimTime now)>;
  using LookupCallback = std::function<void(LookupResult, SimTime now)>;
  using CallCallback = std::function<void(std::optional<std::uint16_t> call_id,
                                          std::string reason, SimTime now)>;
  using ReleaseCallback = std::function<void(SimTime now)>;

  struct Stats {
    std::map<std::string, std::uint64_t> sent_by_kind;
    std::map<std::string, std::uint64_t> received_by_kind;
    std::uint64_t retransmissions = 0;
    std::uint64_t acks_sent = 0;
    std::uint64_t minis_sent = 0;
    std::uint64_t minis_received = 0;
    std::uint64_t malformed_frames = 0;
    std::uint64_t lookups_completed = 0;
    std::uint64_t lookup_rounds_total = 0;
    std::uint64_t lookup_messages_total = 0;
  };

  PeerNode(std::string address, Endpoint endpoint, KademliaParams params,
           std::uint64_t seed, bool bootstrap = false)
      : address_(std::move(address)),
        endpoint_(endpoint),
        params_(params),
        bootstrap_(bootstrap),
        rng_(seed),
        id_(address_.empty() ? PeerId::random(rng_, params.bits)
                             : derive_peer_id(address_, params)),
        table_(id_, params) {
    params_.validate();
  }

  // ---- identity / state ---------------------------------------------------
  const PeerId& id() const { return id_; }
  const Endpoint& endpoint() const { return endpoint_; }
  const std::string& address() const { return address_; }
  Registration registration() const { return registration_; }
  bool is_bootstrap() const { return bootstrap_; }
  RoutingTable& table() { return table_; }
  const RoutingTable& table() const { return table_; }
  const Stats& stats() const { return stats_; }
  bool crashed() const { return crashed_; }
  void crash() { crashed_ = true; }
  Contact self_contact(SimTime now) const {
    return {id_, endpoint_, ContactStatus::online, now, std::nullopt};
  }
  const CallState* call(std::uint16_t id) const {
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : &it->second;
  }
  std::string dump_table() const { return table_.dump(); }

  /// Wire the node to a transport. Without a sink, emissions queue in the
  /// outbox for take_outbox().
  void set_sink(std::function<void(Datagram)> sink) { sink_ = std::move(sink); }
  void set_timer_notify(std::function<void(SimTime)> fn) {
    timer_notify_ = std::move(fn);
  }

  std::vector<Datagram> take_outbox() { return std::exchange(outbox_, {}); }

  std::optional<SimTime> next_timer() const {
    if (timers_.empty()) return std::nullopt;
    return timers_.top().due;
  }

  // ---- local commands -----------------------------------------------------

  /// Registration: populate the table through a REGREQ routed toward the own
  /// id, then refresh the far buckets with keyed PINGs.
  void join(std::optional<Contact> first_contact, SimTime now, JoinCallback cb) {
    if (registration_ != Registration::unregistered)
      throw std::logic_error("join: node is not unregistered");
    if (!first_contact) {
      if (bootstrap_) {
        registration_ = Registration::registered;
        schedule(now + params_.purge_interval_ms, TimerKind::purge_sweep);
        if (cb) cb(true, now);
      } else if (cb) {
        cb(false, now);
      }
      return;
    }
    registration_ = Registration::registering;
    join_cb_ = std::move(cb);
    got_regack_ = false;
    first_contact_ = *first_contact;
    table_.observe_contact(*first_contact, now);
    FullFrame f = make_sessionless(MessageKind::RegReq, now);
    f.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
    f.add_ie(IeId::AddressIe, ie_string(address_));
    f.add_ie(IeId::EndpointIe, ie_endpoint(endpoint_));
    f.add_ie(IeId::FloodIdIe, ie_u64(fresh_flood_id()));
    f.add_ie(IeId::HopCountIe, {0});
    send_reliable(first_contact->endpoint, std::move(f), now,
                  [this](bool ok, SimTime when) {
                    if (!ok && registration_ == Registration::registering &&
                        !got_regack_)
                      fail_join(when);
                  });
  }

  void lookup_k_closest(const PeerId& target, SimTime now, LookupCallback cb) {
    require_registered("lookup");
    start_lookup(target, /*callee_mode=*/false, {}, now, std::move(cb));
  }

  void resolve(std::string_view callee_address, SimTime now,
               LookupCallback cb) {
    require_registered("resolve");
    PeerId target = derive_peer_id(callee_address, params_);
    start_lookup(target, /*callee_mode=*/true, std::string(callee_address),
                 now, std::move(cb));
  }

  void setup_call(const std::string& callee_address, SimTime now,
                  CallCallback cb) {
    require_registered("setup_call");
    resolve(callee_address, now,
            [this, callee_address, cb](LookupResult r, SimTime when) {
              if (!r.found_callee) {
                if (cb) cb(std::nullopt, "no route", when);
                return;
              }
              begin_call(*r.callee, callee_address, when, cb);
            });
  }

  void send_media(std::uint16_t call_id, std::vector<std::uint8_t> payload,
                  SimTime now) {
    auto it = sessions_.find(call_id);
    if (it == sessions_.end() || it->second.phase != CallPhase::up)
      throw std::logic_error("send_media: call is not up");
    MiniFrame f;
    f.source_call = call_id;
    f.timestamp_low = static_cast<std::uint16_t>(now & 0xFFFF);
    f.payload = std::move(payload);
    ++stats_.minis_sent;
    ++it->second.media_sent;
    emit(it->second.peer.endpoint, encode_frame(f));
  }

  void hangup(std::uint16_t call_id, SimTime now) {
    auto it = sessions_.find(call_id);
    if (it == sessions_.end() || it->second.phase == CallPhase::hungup)
      throw std::logic_error("hangup: no such active call");
    CallState& s = it->second;
    s.phase = CallPhase::hungup;
    FullFrame f;
    f.source_call = s.local_call;
    f.dest_call = s.remote_call.value_or(0);
    f.oseqno = s.oseq++;
    f.timestamp_ms = static_cast<std::uint32_t>(now);
    f.kind = MessageKind::Hangup;
    send_reliable(s.peer.endpoint, std::move(f), now,
                  [this, call_id](bool, SimTime) { close_session(call_id); });
  }

  /// Graceful leave: REGREL flood to every online contact, wait for REGACKs.
  void release(SimTime now, ReleaseCallback cb) {
    require_registered("release");
    registration_ = Registration::releasing;
    release_cb_ = std::move(cb);
    auto contacts = table_.all_contacts(/*include_offline=*/false);
    if (contacts.empty()) {
      finish_release(now);
      return;
    }
    release_outstanding_ = static_cast<int>(contacts.size());
    std::uint64_t flood = fresh_flood_id();
    for (const auto& c : contacts) {
      FullFrame f = make_sessionless(MessageKind::RegRel, now);
      f.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
      f.add_ie(IeId::FloodIdIe, ie_u64(flood));
      f.add_ie(IeId::HopCountIe, {0});
      send_reliable(c.endpoint, std::move(f), now,
                    [this](bool, SimTime when) {
                      if (--release_outstanding_ == 0) finish_release(when);
                    });
    }
  }

  // ---- transport events ---------------------------------------------------

  void handle_datagram(std::span<const std::uint8_t> bytes,
                       const Endpoint& from, SimTime now) {
    if (crashed_) return;
    Frame frame;
    try {
      frame = decode_frame(bytes);
    } catch (const CodecError&) {
      ++stats_.malformed_frames;
      return;
    }
    if (auto* mini = std::get_if<MiniFrame>(&frame)) {
      handle_mini(*mini, from);
      return;
    }
    const FullFrame& f = std::get<FullFrame>(frame);
    ++stats_.received_by_kind[to_string(f.kind)];
    resolve_pending(f, from, now);
    if (registration_ == Registration::released) {
      if (f.kind == MessageKind::RegRel) ack_regrel(f, from, now);
      return;
    }
    switch (f.kind) {
      case MessageKind::RegReq: handle_regreq(f, from, now); break;
      case MessageKind::RegAck: handle_regack(f, from, now); break;
      case MessageKind::RegRej: handle_regrej(f, from, now); break;
      case MessageKind::RegRel: handle_regrel(f, from, now); break;
      case MessageKind::Ping: handle_ping(f, from, now); break;
      case MessageKind::Pong: handle_pong(f, from, now); break;
      case MessageKind::FindCallees: handle_find(f, from, now, false); break;
      case MessageKind::FindCallee: handle_find(f, from, now, true); break;
      case MessageKind::ReplyContacts: handle_reply_contacts(f, from, now); break;
      case MessageKind::ReplyCallee: handle_reply_callee(f, from, now); break;
      case MessageKind::New: handle_new(f, from, now); break;
      case MessageKind::Accept: handle_accept(f, from, now); break;
      case MessageKind::Answer: handle_answer(f, from, now); break;
      case MessageKind::Hangup: handle_hangup(f, from, now); break;
      case MessageKind::Ack: break;      // consumed by resolve_pending
      case MessageKind::RegAuth: break;  // plaintext auth round disabled
    }
  }

  /// Fires every timer due at or before `now`, in (due, id) order.
  void tick(SimTime now) {
    if (crashed_) return;
    while (!timers_.empty() && timers_.top().due <= now) {
      TimerEntry t = timers_.top();
      timers_.pop();
      switch (t.kind) {
        case TimerKind::retransmit: fire_retransmit(t.ref, now); break;
        case TimerKind::lookup_round: fire_lookup_round(t.ref, t.ref2, now); break;
        case TimerKind::join_refresh: fire_join_refresh(now); break;
        case TimerKind::purge_sweep: fire_purge_sweep(now); break;
      }
    }
  }

 private:
  enum class TimerKind { retransmit, lookup_round, join_refresh, purge_sweep };

  struct TimerEntry {
    SimTime due = 0;
    std::uint64_t id = 0;
    TimerKind kind = TimerKind::retransmit;
    std::uint64_t ref = 0;
    std::uint64_t ref2 = 0;
    friend bool operator>(const TimerEntry& a, const TimerEntry& b) {
      if (a.due != b.due) return a.due > b.due;
      return a.id > b.id;
    }
  };

  struct PendingSend {
    Endpoint dest;
    FullFrame frame;
    int attempts = 1;
    SimTime interval = kRetransInitialMs;
    std::function<void(bool, SimTime)> done;
  };

  struct Lookup {
    std::uint64_t id = 0;
    PeerId target;
    bool callee_mode = false;
    std::string address;
    struct Cand {
      Contact c;
      bool queried = false;
      bool responded = false;
      bool failed = false;
      std::uint8_t query_oseq = 0;
      std::uint64_t pending_id = 0;
    };
    std::vector<Cand> cands;  // ascending by distance to target
    std::set<PeerId> known;
    std::optional<PeerId> closest_prev;
    int rounds = 0;
    int messages = 0;
    LookupCallback cb;
    bool finished = false;
  };

  // ---- emission helpers ---------------------------------------------------

  void emit(const Endpoint& to, std::vector<std::uint8_t> bytes) {
    if (sink_)
      sink_({to, std::move(bytes)});
    else
      outbox_.push_back({to, std::move(bytes)});
  }

  void send_full(const Endpoint& to, const FullFrame& f) {
    ++stats_.sent_by_kind[to_string(f.kind)];
    emit(to, encode_frame(f));
  }

  FullFrame make_sessionless(MessageKind kind, SimTime now) {
    FullFrame f;
    f.kind = kind;
    f.source_call = 0;
    f.dest_call = 0;
    f.oseqno = oseq_++;
    f.timestamp_ms = static_cast<std::uint32_t>(now);
    return f;
  }

  FullFrame make_response(MessageKind kind, const FullFrame& req, SimTime now) {
    FullFrame f;
    f.kind = kind;
    f.source_call = 0;
    f.dest_call = req.source_call;
    f.oseqno = oseq_++;
    f.iseqno = static_cast<std::uint8_t>(req.oseqno + 1);
    f.timestamp_ms = static_cast<std::uint32_t>(now);
    return f;
  }

  void send_ack(const Endpoint& to, const FullFrame& req, SimTime now) {
    FullFrame f = make_response(MessageKind::Ack, req, now);
    ++stats_.acks_sent;
    send_full(to, f);
  }

  std::uint64_t send_reliable(const Endpoint& to, FullFrame f, SimTime now,
                              std::function<void(bool, SimTime)> done) {
    std::uint64_t id = next_pending_id_++;
    send_full(to, f);
    pending_.emplace(id, PendingSend{to, std::move(f), 1, kRetransInitialMs,
                                     std::move(done)});
    schedule(now + kRetransInitialMs, TimerKind::retransmit, id);
    return id;
  }

  void cancel_pending(std::uint64_t id) { pending_.erase(id); }

  /// A response frame bearing the matching call/iseqno pair acknowledges the
  /// pending frame and stops its retransmission.
  void resolve_pending(const FullFrame& f, const Endpoint& from, SimTime now) {
    std::vector<std::function<void(bool, SimTime)>> done;
    for (auto it = pending_.begin(); it != pending_.end();) {
      const PendingSend& p = it->second;
      if (p.dest == from && f.dest_call == p.frame.source_call &&
          f.iseqno == static_cast<std::uint8_t>(p.frame.oseqno + 1)) {
        if (p.done) done.push_back(p.done);
        it = pending_.erase(it);
      } else {
        ++it;
      }
    }
    for (auto& fn : done) fn(true, now);
  }

  void schedule(SimTime due, TimerKind kind, std::uint64_t ref = 0,
                std::uint64_t ref2 = 0) {
    timers_.push({due, next_timer_id_++, kind, ref, ref2});
    if (timer_notify_) timer_notify_(due);
  }

  std::uint64_t fresh_flood_id() { return rng_(); }

  void require_registered(const char* op) const {
    if (registration_ != Registration::registered)
      throw std::logic_error(std::string(op) + ": node is not registered");
  }

  // ---- timer handlers -----------------------------------------------------

  void fire_retransmit(std::uint64_t pending_id, SimTime now) {
    auto it = pending_.find(pending_id);
    if (it == pending_.end()) return;
    PendingSend& p = it->second;
    if (p.attempts <= kMaxRetries) {
      FullFrame copy = p.frame;
      copy.retransmission = true;
      ++p.attempts;
      ++stats_.retransmissions;
      p.interval *= 2;
      send_full(p.dest, copy);
      schedule(now + p.interval, TimerKind::retransmit, pending_id);
    } else {
      auto done = std::move(p.done);
      pending_.erase(it);
      if (done) done(false, now);
    }
  }

  void fire_lookup_round(std::uint64_t lookup_id, std::uint64_t round,
                         SimTime now) {
    auto it = lookups_.find(lookup_id);
    if (it == lookups_.end()) return;
    Lookup& l = it->second;
    if (l.finished || static_cast<std::uint64_t>(l.rounds) != round) return;
    // Non-responders are dropped from the searchlist (but stay in the table).
    for (auto& cand : l.cands) {
      if (cand.queried && !cand.responded && !cand.failed) {
        cand.failed = true;
        cancel_pending(cand.pending_id);
      }
    }
    lookup_advance(l, now);
  }

  void fire_join_refresh(SimTime now) {
    if (registration_ != Registration::registered || !first_contact_) return;
    std::vector<PeerId> keys =
        table_.refresh_targets(first_contact_->peer_id, rng_);
    for (const auto& key : keys) {
      auto dests = table_.closest_contacts(key, 1);
      if (dests.empty()) continue;
      FullFrame f = make_sessionless(MessageKind::Ping, now);
      f.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
      f.add_ie(IeId::TargetKeyIe, ie_peer_id(key));
      send_reliable(dests.front().endpoint, std::move(f), now, {});
    }
  }

  void fire_purge_sweep(SimTime now) {
    if (crashed_ || registration_ == Registration::released) return;
    table_.purge_expired(now);
    std::erase_if(seen_floods_,
                  [now](const auto& kv) { return kv.second <= now; });
    schedule(now + params_.purge_interval_ms, TimerKind::purge_sweep);
  }

  // ---- registration -------------------------------------------------------

  void fail_join(SimTime now) {
    registration_ = Registration::unregistered;
    auto cb = std::exchange(join_cb_, nullptr);
    if (cb) cb(false, now);
  }

  void handle_regreq(const FullFrame& f, const Endpoint& from, SimTime now) {
    if (registration_ != Registration::registered) return;
    const auto* id_ie = f.find_ie(IeId::PeerIdIe);
    const auto* ep_ie = f.find_ie(IeId::EndpointIe);
    if (!id_ie || !ep_ie) return;
    PeerId joiner = ie_to_peer_id(*id_ie, params_.bits);
    Endpoint joiner_ep = ie_to_endpoint(*ep_ie);
    if (joiner == id_) return;
    if (const auto* addr_ie = f.find_ie(IeId::AddressIe)) {
      std::string addr = ie_to_string(*addr_ie);
      bool ok = false;
      try {
        ok = derive_peer_id(addr, params_) == joiner;
      } catch (const std::invalid_argument&) {
      }
      if (!ok) {
        FullFrame rej = make_response(MessageKind::RegRej, f, now);
        rej.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
        rej.add_ie(IeId::CauseIe, ie_string("identity mismatch"));
        send_full(joiner_ep, rej);
        return;
      }
    }
    table_.observe_contact({joiner, joiner_ep, ContactStatus::online, now, {}},
                           now);
    // Accept: return our k closest contacts to the joiner's id.
    FullFrame ack = make_response(MessageKind::RegAck, f, now);
    ack.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
    std::vector<Contact> closest;
    for (auto& c : table_.closest_contacts(joiner, params_.k + 1))
      if (c.peer_id != joiner) closest.push_back(std::move(c));
    if (static_cast<int>(closest.size()) > params_.k)
      closest.resize(static_cast<std::size_t>(params_.k));
    add_contact_list(ack, closest, params_.bits);
    send_full(joiner_ep, ack);
    // Converging flood: forward once per flood id toward the joiner's id.
    std::uint64_t flood = 0;
    if (const auto* fl = f.find_ie(IeId::FloodIdIe)) flood = ie_to_u64(*fl);
    if (seen_floods_.count(flood)) return;
    seen_floods_[flood] = now + kFloodRetentionMs;
    std::uint8_t hop = 0;
    if (const auto* h = f.find_ie(IeId::HopCountIe); h && !h->data.empty())
      hop = h->data[0];
    int forwarded = 0;
    for (const auto& c : table_.closest_contacts(joiner, params_.k)) {
      if (forwarded >= params_.alpha) break;
      if (c.peer_id == joiner || c.endpoint == from) continue;
      if (closer(joiner, c.peer_id, id_) != std::strong_ordering::less)
        continue;  // only strictly closer peers, so the flood terminates
      FullFrame fwd = f;
      fwd.retransmission = false;
      for (auto& ie : fwd.body)
        if (ie.ie_id == static_cast<std::uint8_t>(IeId::HopCountIe))
          ie.data = {static_cast<std::uint8_t>(hop + 1)};
      send_full(c.endpoint, fwd);
      ++forwarded;
    }
  }

  void handle_regack(const FullFrame& f, const Endpoint& from, SimTime now) {
    if (registration_ == Registration::releasing) return;
    observe_sender(f, from, now);
    learn_contacts(f, now);
    if (registration_ == Registration::registering && !got_regack_) {
      got_regack_ = true;
      registration_ = Registration::registered;
      schedule(now + kJoinRefreshDelayMs, TimerKind::join_refresh);
      schedule(now + params_.purge_interval_ms, TimerKind::purge_sweep);
      auto cb = std::exchange(join_cb_, nullptr);
      if (cb) cb(true, now);
    }
  }

  void handle_regrej(const FullFrame&, const Endpoint&, SimTime now) {
    if (registration_ == Registration::registering && !got_regack_)
      fail_join(now);
  }

  void ack_regrel(const FullFrame& f, const Endpoint& from, SimTime now) {
    FullFrame ack = make_response(MessageKind::RegAck, f, now);
    ack.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
    send_full(from, ack);
  }

  void handle_regrel(const FullFrame& f, const Endpoint& from, SimTime now) {
    ack_regrel(f, from, now);
    if (registration_ != Registration::registered &&
        registration_ != Registration::releasing)
      return;
    const auto* id_ie = f.find_ie(IeId::PeerIdIe);
    if (!id_ie) return;
    PeerId released = ie_to_peer_id(*id_ie, params_.bits);
    if (released == id_) return;
    std::uint64_t flood = 0;
    if (const auto* fl = f.find_ie(IeId::FloodIdIe)) flood = ie_to_u64(*fl);
    if (seen_floods_.count(flood)) return;
    seen_floods_[flood] = now + kFloodRetentionMs;
    table_.mark_offline(released, now);
    std::uint8_t hop = 0;
    if (const auto* h = f.find_ie(IeId::HopCountIe); h && !h->data.empty())
      hop = h->data[0];
    if (hop >= kRegrelHopLimit) return;
    int forwarded = 0;
    for (const auto& c : table_.closest_contacts(released, params_.k)) {
      if (forwarded >= params_.alpha) break;
      if (c.peer_id == released || c.endpoint == from) continue;
      FullFrame fwd = make_sessionless(MessageKind::RegRel, now);
      fwd.add_ie(IeId::PeerIdIe, ie_peer_id(released));
      fwd.add_ie(IeId::FloodIdIe, ie_u64(flood));
      fwd.add_ie(IeId::HopCountIe, {static_cast<std::uint8_t>(hop + 1)});
      send_reliable(c.endpoint, std::move(fwd), now, {});
      ++forwarded;
    }
  }

  void finish_release(SimTime now) {
    registration_ = Registration::released;
    auto cb = std::exchange(release_cb_, nullptr);
    if (cb) cb(now);
  }

  void handle_ping(const FullFrame& f, const Endpoint& from, SimTime now) {
    if (registration_ != Registration::registered) return;
    observe_sender(f, from, now);
    PeerId target = id_;
    if (const auto* t = f.find_ie(IeId::TargetKeyIe))
      target = ie_to_peer_id(*t, params_.bits);
    FullFrame pong = make_response(MessageKind::Pong, f, now);
    pong.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
    add_contact_list(pong, table_.closest_contacts(target, params_.k),
                     params_.bits);
    send_full(from, pong);
  }

  void handle_pong(const FullFrame& f, const Endpoint& from, SimTime now) {
    observe_sender(f, from, now);
    learn_contacts(f, now);
    send_ack(from, f, now);  // final ACK of the registration refresh
  }

  // ---- overlay lookups ----------------------------------------------------

  void handle_find(const FullFrame& f, const Endpoint& from, SimTime now,
                   bool callee) {
    if (registration_ != Registration::registered) return;
    observe_sender(f, from, now);
    const auto* t = f.find_ie(IeId::TargetKeyIe);
    if (!t) return;
    PeerId target = ie_to_peer_id(*t, params_.bits);
    if (callee) {
      if (target == id_) {
        FullFrame reply = make_response(MessageKind::ReplyCallee, f, now);
        reply.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
        std::vector<Contact> self{self_contact(now)};
        add_contact_list(reply, self, params_.bits);
        send_full(from, reply);
        return;
      }
      if (auto hit = table_.find(target);
          hit && hit->status == ContactStatus::online) {
        FullFrame reply = make_response(MessageKind::ReplyCallee, f, now);
        reply.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
        std::vector<Contact> rec{*hit};
        add_contact_list(reply, rec, params_.bits);
        send_full(from, reply);
        return;
      }
    }
    PeerId sender;
    bool have_sender = false;
    if (const auto* s = f.find_ie(IeId::PeerIdIe)) {
      sender = ie_to_peer_id(*s, params_.bits);
      have_sender = true;
    }
    FullFrame reply = make_response(MessageKind::ReplyContacts, f, now);
    reply.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
    std::vector<Contact> closest;
    for (auto& c : table_.closest_contacts(target, params_.k + 1)) {
      if (have_sender && c.peer_id == sender) continue;
      closest.push_back(std::move(c));
    }
    if (static_cast<int>(closest.size()) > params_.k)
      closest.resize(static_cast<std::size_t>(params_.k));
    add_contact_list(reply, closest, params_.bits);
    send_full(from, reply);
  }

  void start_lookup(const PeerId& target, bool callee_mode, std::string address,
                    SimTime now, LookupCallback cb) {
    std::uint64_t id = next_lookup_id_++;
    Lookup& l = lookups_[id];
    l.id = id;
    l.target = target;
    l.callee_mode = callee_mode;
    l.address = std::move(address);
    l.cb = std::move(cb);
    for (auto& c : table_.closest_contacts(target, params_.alpha)) {
      l.known.insert(c.peer_id);
      l.cands.push_back({std::move(c)});
    }
    if (l.cands.empty()) {
      LookupResult r;
      r.starved = true;
      finish_lookup(id, std::move(r), now);
      return;
    }
    lookup_advance(l, now);
  }

  void lookup_advance(Lookup& l, SimTime now) {
    if (l.finished) return;
    int inflight = 0;
    for (const auto& c : l.cands)
      if (c.queried && !c.responded && !c.failed) ++inflight;
    if (inflight > 0) return;

    // Work over the k closest non-failed candidates (the trimmed searchlist).
    std::vector<Lookup::Cand*> top;
    for (auto& c : l.cands) {
      if (c.failed) continue;
      top.push_back(&c);
      if (static_cast<int>(top.size()) == params_.k) break;
    }
    if (top.empty()) {
      LookupResult r;
      r.starved = l.rounds == 0;
      finish_lookup(l.id, std::move(r), now);
      return;
    }
    bool all_responded = true;
    std::vector<Lookup::Cand*> unqueried;
    for (auto* c : top) {
      if (!c->responded) all_responded = false;
      if (!c->queried) unqueried.push_back(c);
    }
    if (all_responded || unqueried.empty()) {
      // No candidate beats the closest responder and the k best known
      // active contacts have been accumulated.
      LookupResult r;
      for (auto* c : top)
        if (c->responded) r.contacts.push_back(c->c);
      finish_lookup(l.id, std::move(r), now);
      return;
    }
    const PeerId& cur_closest = top.front()->c.peer_id;
    bool exhaustive = l.closest_prev && *l.closest_prev == cur_closest;
    std::size_t fanout = exhaustive ? unqueried.size()
                                    : static_cast<std::size_t>(params_.alpha);
    l.closest_prev = cur_closest;
    ++l.rounds;
    for (std::size_t i = 0; i < unqueried.size() && i < fanout; ++i) {
      Lookup::Cand* c = unqueried[i];
      FullFrame f = make_sessionless(
          l.callee_mode ? MessageKind::FindCallee : MessageKind::FindCallees,
          now);
      f.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
      f.add_ie(IeId::TargetKeyIe, ie_peer_id(l.target));
      if (l.callee_mode) f.add_ie(IeId::AddressIe, ie_string(l.address));
      c->queried = true;
      c->query_oseq = f.oseqno;
      std::uint64_t lid = l.id;
      PeerId pid = c->c.peer_id;
      c->pending_id = send_reliable(
          c->c.endpoint, std::move(f), now,
          [this, lid, pid](bool ok, SimTime when) {
            if (!ok) lookup_query_failed(lid, pid, when);
          });
      ++l.messages;
    }
    schedule(now + kLookupRoundTimeoutMs, TimerKind::lookup_round, l.id,
             static_cast<std::uint64_t>(l.rounds));
  }

  void lookup_query_failed(std::uint64_t lookup_id, const PeerId& peer,
                           SimTime now) {
    auto it = lookups_.find(lookup_id);
    if (it == lookups_.end() || it->second.finished) return;
    for (auto& c : it->second.cands)
      if (c.c.peer_id == peer && c.queried && !c.responded) c.failed = true;
    lookup_advance(it->second, now);
  }

  Lookup::Cand* match_lookup_reply(const FullFrame& f, const PeerId& sender,
                                   Lookup** out) {
    for (auto& [id, l] : lookups_) {
      if (l.finished) continue;
      for (auto& c : l.cands) {
        if (c.queried && c.c.peer_id == sender &&
            f.iseqno == static_cast<std::uint8_t>(c.query_oseq + 1)) {
          *out = &l;
          return &c;
        }
      }
    }
    return nullptr;
  }

  void merge_lookup_contacts(Lookup& l, const std::vector<Contact>& contacts,
                             SimTime now) {
    for (const auto& cc : contacts) {
      if (cc.peer_id == id_ || l.known.count(cc.peer_id)) continue;
      learn_contact(cc, now);
      l.known.insert(cc.peer_id);
      Lookup::Cand cand{cc};
      cand.c.status = ContactStatus::online;
      auto pos = std::find_if(l.cands.begin(), l.cands.end(),
                              [&](const Lookup::Cand& other) {
                                return closer(l.target, cc.peer_id,
                                              other.c.peer_id) ==
                                       std::strong_ordering::less;
                              });
      l.cands.insert(pos, std::move(cand));
    }
    // Trim the unqueried tail so the searchlist stays k long.
    int rank = 0;
    std::erase_if(l.cands, [&](const Lookup::Cand& c) {
      if (c.failed) return false;
      ++rank;
      return rank > params_.k && !c.queried;
    });
  }

  void handle_reply_contacts(const FullFrame& f, const Endpoint& from,
                             SimTime now) {
    const auto* s = f.find_ie(IeId::PeerIdIe);
    if (!s) return;
    PeerId sender = ie_to_peer_id(*s, params_.bits);
    observe_sender(f, from, now);
    Lookup* l = nullptr;
    Lookup::Cand* cand = match_lookup_reply(f, sender, &l);
    if (!cand) return;
    cand->responded = true;
    cand->failed = false;  // a late reply re-validates the contact
    merge_lookup_contacts(*l, contact_list(f, params_.bits), now);
    lookup_advance(*l, now);
  }

  void handle_reply_callee(const FullFrame& f, const Endpoint& from,
                           SimTime now) {
    const auto* s = f.find_ie(IeId::PeerIdIe);
    if (!s) return;
    PeerId sender = ie_to_peer_id(*s, params_.bits);
    observe_sender(f, from, now);
    Lookup* l = nullptr;
    Lookup::Cand* cand = match_lookup_reply(f, sender, &l);
    if (!cand || !l->callee_mode) return;
    cand->responded = true;
    cand->failed = false;
    if (sender == l->target) {
      // The callee itself answered: resolution confirmed live.
      LookupResult r;
      r.found_callee = true;
      r.callee = Contact{l->target, from, ContactStatus::online, now, {}};
      finish_lookup(l->id, std::move(r), now);
      return;
    }
    // Third-party hit: treat the record as a hint and confirm it directly.
    auto records = contact_list(f, params_.bits);
    if (!records.empty() && records.front().peer_id == l->target &&
        !l->known.count(l->target)) {
      l->known.insert(l->target);
      Lookup::Cand hint{records.front()};
      hint.c.status = ContactStatus::online;
      l->cands.insert(l->cands.begin(), std::move(hint));  // distance zero
    }
    lookup_advance(*l, now);
  }

  void finish_lookup(std::uint64_t id, LookupResult r, SimTime now) {
    auto it = lookups_.find(id);
    if (it == lookups_.end()) return;
    it->second.finished = true;
    r.rounds = it->second.rounds;
    r.messages = it->second.messages;
    auto cb = std::move(it->second.cb);
    lookups_.erase(it);
    ++stats_.lookups_completed;
    stats_.lookup_rounds_total += static_cast<std::uint64_t>(r.rounds);
    stats_.lookup_messages_total += static_cast<std::uint64_t>(r.messages);
    if (cb) cb(std::move(r), now);
  }

  // ---- calls ----------------------------------------------------------

  void begin_call(const Contact& callee, const std::string& callee_address,
                  SimTime now, CallCallback cb) {
    std::uint16_t n = call_numbers_.allocate();
    CallState s;
    s.local_call = n;
    s.peer = callee;
    s.callee_address = callee_address;
    s.phase = CallPhase::initiating;
    sessions_[n] = std::move(s);
    call_cbs_[n] = std::move(cb);
    FullFrame f;
    f.kind = MessageKind::New;
    f.source_call = n;
    f.dest_call = 0;
    f.oseqno = sessions_[n].oseq++;
    f.timestamp_ms = static_cast<std::uint32_t>(now);
    f.add_ie(IeId::PeerIdIe, ie_peer_id(id_));
    f.add_ie(IeId::AddressIe, ie_string(callee_address));
    send_reliable(callee.endpoint, std::move(f), now,
                  [this, n](bool ok, SimTime when) {
                    if (ok) return;
                    auto it = sessions_.find(n);
                    if (it == sessions_.end() ||
                        it->second.phase == CallPhase::up)
                      return;
                    close_session(n);
                    auto cb = take_call_cb(n);
                    if (cb) cb(std::nullopt, "unreachable", when);
                  });
  }

  void handle_new(const FullFrame& f, const Endpoint& from, SimTime now) {
    if (registration_ != Registration::registered) return;
    // Retransmitted NEW for an existing session: repeat the accept.
    for (auto& [n, s] : sessions_) {
      if (s.peer.endpoint == from && s.remote_call == f.source_call) {
        send_accept_answer(s, f, now, /*repeat=*/true);
        return;
      }
    }
    std::uint16_t n = call_numbers_.allocate();
    CallState s;
    s.local_call = n;
    s.remote_call = f.source_call;
    Contact caller;
    caller.endpoint = from;
    caller.status = ContactStatus::online;
    caller.last_seen = now;
    if (const auto* ie = f.find_ie(IeId::PeerIdIe)) {
      caller.peer_id = ie_to_peer_id(*ie, params_.bits);
      if (caller.peer_id != id_) table_.observe_contact(caller, now);
    }
    s.peer = caller;
    s.phase = CallPhase::ringing;
    sessions_[n] = std::move(s);
    send_accept_answer(sessions_[n], f, now, /*repeat=*/false);
  }

  void send_accept_answer(CallState& s, const FullFrame& req, SimTime now,
                          bool repeat) {
    FullFrame accept;
    accept.kind = MessageKind::Accept;
    accept.source_call = s.local_call;
    accept.dest_call = *s.remote_call;
    accept.oseqno = repeat ? 0 : s.oseq++;
    accept.iseqno = static_cast<std::uint8_t>(req.oseqno + 1);
    accept.timestamp_ms = static_cast<std::uint32_t>(now);
    send_full(s.peer.endpoint, accept);
    if (repeat) return;
    FullFrame answer;
    answer.kind = MessageKind::Answer;
    answer.source_call = s.local_call;
    answer.dest_call = *s.remote_call;
    answer.oseqno = s.oseq++;
    answer.iseqno = static_cast<std::uint8_t>(req.oseqno + 1);
    answer.timestamp_ms = static_cast<std::uint32_t>(now);
    std::uint16_t n = s.local_call;
    send_reliable(s.peer.endpoint, std::move(answer), now,
                  [this, n](bool ok, SimTime) {
                    auto it = sessions_.find(n);
                    if (it == sessions_.end()) return;
                    if (ok && it->second.phase == CallPhase::ringing)
                      it->second.phase = CallPhase::up;
                    else if (!ok)
                      close_session(n);
                  });
  }

  void handle_accept(const FullFrame& f, const Endpoint&, SimTime) {
    auto it = sessions_.find(f.dest_call);
    if (it == sessions_.end()) return;
    CallState& s = it->second;
    if (s.phase == CallPhase::initiating) {
      s.remote_call = f.source_call;
      s.phase = CallPhase::ringing;
    }
  }

  void handle_answer(const FullFrame& f, const Endpoint& from, SimTime now) {
    auto it = sessions_.find(f.dest_call);
    if (it == sessions_.end()) return;
    CallState& s = it->second;
    send_ack(from, f, now);
    if (s.phase == CallPhase::initiating || s.phase == CallPhase::ringing) {
      s.remote_call = f.source_call;
      s.phase = CallPhase::up;
      auto cb = take_call_cb(s.local_call);
      if (cb) cb(s.local_call, "", now);
    }
  }

  void handle_hangup(const FullFrame& f, const Endpoint& from, SimTime now) {
    send_ack(from, f, now);
    auto it = sessions_.find(f.dest_call);
    if (it == sessions_.end()) return;
    if (it->second.remote_call != f.source_call) return;
    close_session(f.dest_call);
  }

  void handle_mini(const MiniFrame& f, const Endpoint& from) {
    ++stats_.minis_received;
    for (auto& [n, s] : sessions_) {
      if (s.phase == CallPhase::up && s.peer.endpoint == from &&
          s.remote_call == f.source_call) {
        ++s.media_received;
        return;
      }
    }
  }

  void close_session(std::uint16_t call_id) {
    auto it = sessions_.find(call_id);
    if (it == sessions_.end()) return;
    call_numbers_.release(call_id);
    sessions_.erase(it);
    call_cbs_.erase(call_id);
  }

  CallCallback take_call_cb(std::uint16_t call_id) {
    auto it = call_cbs_.find(call_id);
    if (it == call_cbs_.end()) return nullptr;
    CallCallback cb = std::move(it->second);
    call_cbs_.erase(it);
    return cb;
  }

  // ---- table population -----------------------------------------------

  /// Direct evidence: the frame came from this peer right now.
  void observe_sender(const FullFrame& f, const Endpoint& from, SimTime now) {
    const auto* ie = f.find_ie(IeId::PeerIdIe);
    if (!ie) return;
    PeerId sender = ie_to_peer_id(*ie, params_.bits);
    if (sender == id_) return;
    table_.observe_contact({sender, from, ContactStatus::online, now, {}}, now);
  }

  /// Hearsay from contact lists: insert unknown peers, never touch the
  /// liveness state of peers already tracked.
  void learn_contact(const Contact& c, SimTime now) {
    if (c.peer_id == id_ || !c.endpoint.valid()) return;
    if (table_.find(c.peer_id)) return;
    table_.observe_contact({c.peer_id, c.endpoint, ContactStatus::online, now,
                            {}},
                           now);
  }

  void learn_contacts(const FullFrame& f, SimTime now) {
    for (const auto& c : contact_list(f, params_.bits)) learn_contact(c, now);
  }

  // ---- state ----------------------------------------------------------

  std::string address_;
  Endpoint endpoint_;
  KademliaParams params_;
  bool bootstrap_ = false;
  std::mt19937_64 rng_;
  PeerId id_;
  RoutingTable table_;

  Registration registration_ = Registration::unregistered;
  std::function<void(Datagram)> sink_;
  std::function<void(SimTime)> timer_notify_;
  std::vector<Datagram> outbox_;

  std::priority_queue<TimerEntry, std::vector<TimerEntry>,
                      std::greater<TimerEntry>>
      timers_;
  std::uint64_t next_timer_id_ = 1;

  std::map<std::uint64_t, PendingSend> pending_;
  std::uint64_t next_pending_id_ = 1;
  std::uint8_t oseq_ = 0;

  std::optional<Contact> first_contact_;
  JoinCallback join_cb_;
  bool got_regack_ = false;

  std::map<std::uint64_t, Lookup> lookups_;
  std::uint64_t next_lookup_id_ = 1;

  std::map<std::uint64_t, SimTime> seen_floods_;

  CallNumberAllocator call_numbers_;
  std::map<std::uint16_t, CallState> sessions_;
  std::map<std::uint16_t, CallCallback> call_cbs_;

  ReleaseCallback release_cb_;
  int release_outstanding_ = 0;

  bool crashed_ = false;
  Stats stats_;
};

}  // namespace iaxkad
