#pragma once

#include <compare>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "iaxkad/params.hpp"
#include "iaxkad/peer_id.hpp"

namespace iaxkad {

/// Abstract UDP endpoint (IPv4 host + port) of a simulated or real peer.
struct Endpoint {
  std::uint32_t host = 0;
  std::uint16_t port = 0;

  bool valid() const { return host != 0 && port != 0; }

  std::string to_string() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%u.%u.%u.%u:%u", (host >> 24) & 0xFF,
                  (host >> 16) & 0xFF, (host >> 8) & 0xFF, host & 0xFF, port);
    return buf;
  }

  static Endpoint parse(std::string_view text) {
    unsigned a, b, c, d, p;
    std::string s(text);
    if (std::sscanf(s.c_str(), "%u.%u.%u.%u:%u", &a, &b, &c, &d, &p) != 5 ||
        a > 255 || b > 255 || c > 255 || d > 255 || p == 0 || p > 65535)
      throw std::invalid_argument("bad endpoint: " + s);
    return {(a << 24) | (b << 16) | (c << 8) | d, static_cast<std::uint16_t>(p)};
  }

  friend auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

enum class ContactStatus { online, offline };

inline const char* to_string(ContactStatus s) {
  return s == ContactStatus::online ? "online" : "offline";
}

/// The {IP address, UDP port, NodeID} triple plus liveness bookkeeping.
struct Contact {
  PeerId peer_id;
  Endpoint endpoint;
  ContactStatus status = ContactStatus::online;
  SimTime last_seen = 0;
  std::optional<SimTime> offline_since;

  bool online() const { return status == ContactStatus::online; }
};

}  // namespace iaxkad
